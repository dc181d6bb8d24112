import json

import pytest

from premixer.datapipe import generate_synthetic, save_series


def small_config(data, **extra):
    cfg = {
        "data": str(data),
        "T_long": 96,
        "D": 16,
        "d_model": 4,
        "d_emb": 8,
        "d_ctx": 8,
        "train_stride": 24,
        "eval_stride": 24,
        "seed": 3,
        "optim": {"epochs": 2, "batch": 16, "patience": 5},
        "pretrain": {"epochs": 2, "stride": 48},
    }
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    path = root / "tiny.pmxt"
    save_series(generate_synthetic(5, 14, seed=2), path)
    return path


@pytest.fixture
def tiny_config(tmp_path, tiny_data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(small_config(tiny_data)))
    return path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    order = ["1", "2", "3", "4", "5", "6", "7a", "7b", "8", "9", "10", "11"]
    for key in order:
        terminalreporter.write_line(mod.RESULTS.get(key, f"criterion {key:>3}: NOT RUN"))
