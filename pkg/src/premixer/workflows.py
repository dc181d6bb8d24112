"""End-to-end runs: pre-training, forecaster training, evaluation, transfer.

Every run writes into its own output directory: a resolved config snapshot,
CSV logs, metric reports (CSV + JSON), checkpoints and figures.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from premixer import checkpoint
from premixer.config import RunConfig
from premixer.datapipe import (
    Normalizer,
    SplitSpec,
    add_time_features,
    aggregate,
    fill_missing,
    fit_normalizer,
    gather_windows,
    load_series,
    split_anchors,
    split_bounds,
    window_anchors,
)
from premixer.errors import CheckpointError, DataError, NumericError
from premixer.evalmetrics import MetricsReport, horizon_report
from premixer.forecaster import ModelSpec, PreMixer
from premixer.pretrain import (
    PIEncoder,
    Pretrainer,
    load_checkpoint,
    reconstruction_mse,
    restore_optimizer,
    save_checkpoint,
)
from premixer.tensorcore import Adam, Rng

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class Dataset:
    inputs: np.ndarray  # normalized model inputs (T_total, N, c_in)
    truth: np.ndarray  # raw-unit targets, NaN where missing (T_total, N, C)
    normalizer: Normalizer
    bounds: tuple
    node_ids: list

    @property
    def length(self):
        return self.inputs.shape[0]

    @property
    def n_nodes(self):
        return self.inputs.shape[1]

    @property
    def n_channels(self):
        return self.truth.shape[2]


def prepare_dataset(cfg: RunConfig, path=None, normalizer: Normalizer | None = None) -> Dataset:
    path = path or cfg.data
    if path is None:
        raise DataError("no dataset path given (set 'data' in the config or pass --data)")
    raw = load_series(path)
    if cfg.aggregate_factor > 1:
        raw = aggregate(raw, cfg.aggregate_factor)
    truth = raw.values
    clean = fill_missing(truth)
    bounds = split_bounds(clean.shape[0], SplitSpec.from_ratio(*cfg.split))
    if normalizer is None:
        normalizer = fit_normalizer(truth[: bounds[0]])
    inputs = normalizer.normalize(clean)
    if cfg.time_features:
        inputs = add_time_features(inputs, cfg.steps_per_day)
    return Dataset(np.ascontiguousarray(inputs), truth, normalizer, bounds, raw.node_ids)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _fingerprint(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def _maybe_plot(enabled, fn, *args):
    if not enabled:
        return
    try:
        from premixer import plotting
    except ImportError:  # matplotlib missing
        log.warning("matplotlib unavailable; skipping figures")
        return
    getattr(plotting, fn)(*args)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


def pretrain_windows(cfg: RunConfig, data: Dataset) -> np.ndarray:
    """Training-split anchors whose whole long history lies in the train slice."""
    return window_anchors(data.bounds[0], cfg.T_long, 0, cfg.pretrain.stride)


def run_pretrain(cfg: RunConfig, out_dir, resume=None, plots=True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.json")
    data = prepare_dataset(cfg)
    flow = data.inputs[..., :1]
    anchors = pretrain_windows(cfg, data)
    if anchors.size == 0:
        raise DataError(
            f"training slice of {data.bounds[0]} steps is shorter than T_long={cfg.T_long}"
        )
    use_cl = not cfg.ablation.no_cl
    model = PIEncoder(cfg.L, cfg.D, Rng(cfg.seed), dropout=cfg.pretrain.dropout, L=cfg.L, C=1)
    trainer = Pretrainer(model, lr=cfg.pretrain.lr, mask_ratio=cfg.mask_ratio, use_cl=use_cl,
                         seed=cfg.seed + 1)
    first_epoch = 1
    if resume is not None:
        loaded, manifest, arrays = load_checkpoint(resume, expect_P=cfg.L, expect_L=cfg.L, expect_C=1)
        model.load_state_dict(loaded.state_dict())
        restore_optimizer(trainer.optim, manifest, arrays)
        first_epoch = int(manifest.get("epochs_done", 0)) + 1
        trainer.rng = Rng(cfg.seed + 1 + first_epoch)
    shuffle = Rng(cfg.seed + 2 + first_epoch)
    rows = []
    bs = cfg.pretrain.batch
    for epoch in range(first_epoch, first_epoch + cfg.pretrain.epochs):
        order = anchors[shuffle.permutation(anchors.size)]
        sums = np.zeros(3)
        steps = 0
        for i in range(0, order.size, bs):
            _, _, x_long = gather_windows(flow, order[i : i + bs], cfg.T, 0, cfg.T_long)
            losses = trainer.step(x_long)
            sums += (losses.recon, losses.contrastive, losses.total)
            steps += 1
        recon, cl, total = sums / steps
        rows.append((epoch, recon, cl, total))
        log.info("pretrain epoch %d: recon %.4f cl %.4f total %.4f (step %d)",
                 epoch, recon, cl, total, trainer.optim.step_count)
    _write_csv(out / "pretrain_log.csv", ("epoch", "recon", "cl", "total"), rows)
    last_epoch = first_epoch + cfg.pretrain.epochs - 1
    ckpt = save_checkpoint(model, out / "piencoder", seed=cfg.seed, optim=trainer.optim,
                           epochs_done=last_epoch, use_cl=use_cl, T_long=cfg.T_long,
                           mask_ratio=cfg.mask_ratio)
    _, _, sample = gather_windows(flow, anchors[: min(anchors.size, 64)], cfg.T, 0, cfg.T_long)
    mse = reconstruction_mse(model, sample)
    baseline = float(np.var(sample))
    summary = {"epochs_done": last_epoch, "steps": trainer.optim.step_count,
               "recon_mse": mse, "baseline_var": baseline, "windows": int(anchors.size)}
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _maybe_plot(plots, "plot_pretrain_losses", rows, out / "pretrain_loss.png")
    return {"checkpoint": ckpt, "log": rows, "model": model, **summary}


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


def model_spec(cfg: RunConfig, data: Dataset) -> ModelSpec:
    return ModelSpec(
        N=data.n_nodes, T=cfg.T, horizon=cfg.horizon, c_in=data.inputs.shape[2],
        c_out=data.n_channels, d_pe=cfg.d_pe, d_model=cfg.d_model, D=cfg.D, d_emb=cfg.d_emb,
        d_ctx=cfg.d_ctx, spatial_layers=cfg.spatial_layers, ff_mult=cfg.ff_mult,
        dropout=cfg.dropout, spatial_mode=cfg.spatial_mode, aggregation=cfg.aggregation,
        no_pretrain=cfg.ablation.no_pretrain, no_context=cfg.ablation.no_context,
        no_stpe=cfg.ablation.no_stpe, seed=cfg.seed,
    )


def predict_split(model: PreMixer, cfg: RunConfig, data: Dataset, anchors, batch=64):
    """Raw-unit predictions and truths, each (S, horizon, N, C)."""
    preds, truths = [], []
    for i in range(0, anchors.size, batch):
        a = anchors[i : i + batch]
        x, _, _ = gather_windows(data.inputs, a, cfg.T, cfg.horizon, 0)
        _, y_raw, _ = gather_windows(data.truth, a, cfg.T, cfg.horizon, 0)
        preds.append(data.normalizer.denormalize(model.forward(x)))
        truths.append(y_raw)
    return np.concatenate(preds), np.concatenate(truths)


def evaluate(model, cfg, data, split="val") -> MetricsReport:
    anchors = split_anchors(data.length, data.bounds, SPLITS[split], cfg.T_long, cfg.horizon,
                            cfg.eval_stride)
    if anchors.size == 0:
        raise DataError(f"the {split} split has no complete forecast windows")
    preds, truths = predict_split(model, cfg, data, anchors)
    return horizon_report(preds, truths, min_truth=cfg.mape_min_truth, expected_len=None)


def train_anchors(cfg: RunConfig, data: Dataset) -> np.ndarray:
    anchors = split_anchors(data.length, data.bounds, 0, cfg.T_long, cfg.horizon, cfg.train_stride)
    if cfg.train_subset is not None:
        anchors = anchors[: cfg.train_subset]
    return anchors


def _load_encoder(cfg: RunConfig, pretrained):
    if cfg.ablation.no_pretrain:
        return None, None
    if pretrained is None:
        raise CheckpointError("forecaster training needs --pretrained unless no_pretrain is set")
    enc, manifest, _ = load_checkpoint(pretrained, expect_L=cfg.L, expect_C=1)
    return enc, manifest


def save_forecaster(model: PreMixer, path, cfg: RunConfig, data: Dataset, extra: dict):
    arrays = dict(model.state_dict())
    if model.piencoder is not None:
        arrays.update({f"piencoder.{k}": v for k, v in model.piencoder.state_dict().items()})
    body = {
        "kind": "forecaster",
        "model": model.spec.to_dict(),
        "ablation": cfg.to_dict()["ablation"],
        "normalizer": data.normalizer.to_dict(),
        "config": cfg.to_dict(),
        "node_ids": data.node_ids,
    }
    body.update(extra)
    return checkpoint.save(path, body, arrays)


def load_forecaster(path):
    """Returns ``(model, manifest)``."""
    manifest, arrays = checkpoint.load(path)
    if manifest.get("kind") != "forecaster":
        raise CheckpointError(f"{path} is not a forecaster checkpoint (kind={manifest.get('kind')})")
    spec = ModelSpec(**manifest["model"])
    enc = None
    pie = manifest.get("piencoder")
    if pie is not None:
        m = pie["manifest"]
        enc = PIEncoder(m["P"], m["D"], L=m["L"], C=m["C"])
        enc.load_state_dict({k[len("piencoder."):]: v for k, v in arrays.items()
                             if k.startswith("piencoder.")})
    model = PreMixer(spec, enc)
    model.load_state_dict(arrays)
    return model, manifest


def run_train(cfg: RunConfig, out_dir, pretrained=None, plots=True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.json")
    data = prepare_dataset(cfg)
    enc, enc_manifest = _load_encoder(cfg, pretrained)
    model = PreMixer(model_spec(cfg, data), enc)
    counts = model.parameter_counts()
    groups = {}
    for p in model.trainable_parameters():
        groups[p.name.split(".")[0]] = groups.get(p.name.split(".")[0], 0) + p.size
    counts["trainable_by_group"] = groups
    counts["trainable_names"] = [p.name for p in model.trainable_parameters()]
    (out / "params.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
    log.info("parameters: total %d, trainable %d", counts["total"], counts["trainable"])

    anchors = train_anchors(cfg, data)
    if anchors.size == 0:
        raise DataError("training split has no complete windows (series too short for T_long)")
    optim = Adam(model.trainable_parameters(), lr=cfg.optim.lr)
    shuffle = Rng(cfg.seed + 11)
    drop_rng = Rng(cfg.seed + 12)
    enc_print = _fingerprint(enc.parameters()) if enc is not None else None

    log_rows, val_rows = [], []
    best_mae, best_epoch, best_state, stale = np.inf, 0, None, 0
    for epoch in range(1, cfg.optim.epochs + 1):
        order = anchors[shuffle.permutation(anchors.size)]
        total, count = 0.0, 0
        for i in range(0, order.size, cfg.optim.batch):
            x, y, _ = gather_windows(data.inputs, order[i : i + cfg.optim.batch], cfg.T,
                                     cfg.horizon, 0)
            y = y[..., : data.n_channels]
            optim.zero_grad()
            loss = model.loss_and_grad(x, y, training=True, rng=drop_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            optim.step()
            total += loss * x.shape[0]
            count += x.shape[0]
        if enc is not None and _fingerprint(enc.parameters()) != enc_print:
            raise NumericError("frozen PIEncoder parameters changed during training")
        report = evaluate(model, cfg, data, "val")
        avg = report.average
        log_rows.append((epoch, total / count, avg.mae, avg.rmse, avg.mape))
        for label, m in report.rows.items():
            val_rows.append((epoch, label, m.mae, m.rmse, m.mape))
        log.info("epoch %d: train MAE(norm) %.4f, val MAE %.3f RMSE %.3f MAPE %.2f%%",
                 epoch, total / count, avg.mae, avg.rmse, avg.mape)
        if avg.mae < best_mae:
            best_mae, best_epoch, stale = avg.mae, epoch, 0
            best_state = {k: checkpoint.round_f32(v) for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.optim.patience:
                log.info("early stop after %d epochs without val improvement", stale)
                break

    _write_csv(out / "train_log.csv", ("epoch", "train_loss", "val_mae", "val_rmse", "val_mape"),
               log_rows)
    _write_csv(out / "val_metrics.csv", ("epoch", "horizon", "mae", "rmse", "mape_percent"),
               val_rows)
    if best_state is None:
        best_state = {k: checkpoint.round_f32(v) for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    val_report = evaluate(model, cfg, data, "val")
    val_report.write(out / "val_report")
    extra = {
        "best_epoch": best_epoch,
        "epochs_run": len(log_rows),
        "val_report": val_report.to_dict(),
        "parameter_counts": {k: counts[k] for k in ("total", "trainable", "piencoder_frozen")},
        "piencoder": None if enc is None else {"linked": str(pretrained), "manifest": enc_manifest},
    }
    ckpt = save_forecaster(model, out / "forecaster", cfg, data, extra)
    _maybe_plot(plots, "plot_training_curves", log_rows, out / "train_curve.png")
    _maybe_plot(plots, "plot_horizon_report", val_report, out / "val_report.png")
    return {"checkpoint": ckpt, "log": log_rows, "val_report": val_report, "counts": counts,
            "model": model, "best_epoch": best_epoch}


def run_eval(checkpoint_dir, out_dir, data_path=None, split="test", plots=True) -> MetricsReport:
    model, manifest = load_forecaster(checkpoint_dir)
    cfg = RunConfig.from_dict(manifest["config"])
    data = prepare_dataset(cfg, data_path, Normalizer.from_dict(manifest["normalizer"]))
    if data.n_nodes != model.spec.N:
        raise DataError(f"dataset has {data.n_nodes} nodes, checkpoint expects {model.spec.N}")
    report = evaluate(model, cfg, data, split)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"{split}_report")
    _maybe_plot(plots, "plot_horizon_report", report, out / f"{split}_report.png")
    return report


def run_transfer(source_checkpoint, cfg: RunConfig, out_dir, plots=True) -> dict:
    """Train a forecaster on the target data with a PIEncoder pre-trained
    elsewhere, then report on the target test split."""
    if cfg.ablation.no_pretrain:
        cfg = cfg.replace(**{"ablation.no_pretrain": False})
    result = run_train(cfg, out_dir, pretrained=source_checkpoint, plots=plots)
    result["test_report"] = run_eval(result["checkpoint"], out_dir, split="test", plots=plots)
    return result


def fit_subset(model: PreMixer, cfg: RunConfig, data: Dataset, anchors, target_mae: float,
               max_epochs: int = 500, time_budget: float | None = None):
    """Train on a fixed set of windows until the eval-mode train MAE (normalized
    units) drops below ``target_mae``. Returns ``(reached, epochs, history)``.

    Used as a capacity check: no validation, no early stopping.
    """
    optim = Adam(model.trainable_parameters(), lr=cfg.optim.lr)
    shuffle, drop_rng = Rng(cfg.seed + 21), Rng(cfg.seed + 22)
    x_all, y_all, _ = gather_windows(data.inputs, anchors, cfg.T, cfg.horizon, 0)
    y_all = y_all[..., : data.n_channels]
    t0 = time.perf_counter()
    history = []
    for epoch in range(1, max_epochs + 1):
        order = shuffle.permutation(anchors.size)
        for i in range(0, order.size, cfg.optim.batch):
            idx = order[i : i + cfg.optim.batch]
            optim.zero_grad()
            model.loss_and_grad(x_all[idx], y_all[idx], training=True, rng=drop_rng)
            optim.step()
        err = sum(float(np.abs(model.forward(x_all[i : i + 128]) - y_all[i : i + 128]).sum())
                  for i in range(0, anchors.size, 128))
        mae = err / y_all.size
        history.append(mae)
        if mae < target_mae:
            return True, epoch, history
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return False, len(history), history
