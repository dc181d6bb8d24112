import sys

from premixer.cli import main

sys.exit(main())
