"""Training loop and learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forge import gpam, leakage
from forge.ad.optim import Adam
from forge.errors import ConfigOutOfRange, IoFailure, ShapeMismatch

log = logging.getLogger(__name__)

WARMUP_FRACTION = 0.05


def lr_at(step: int, total_steps: int, target_lr: float) -> float:
    """Linear warmup from target/100 over the first 5% of steps, then cosine to 0."""
    if total_steps <= 0:
        return target_lr
    w = WARMUP_FRACTION * total_steps
    if step < w:
        return target_lr / 100 + (target_lr - target_lr / 100) * step / w
    return target_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total_steps - w)))


@dataclass
class TrainRun:
    config: gpam.ModelConfig
    dataset: str | None
    seed: int
    fraction: float = 1.0
    train_count: int = 0
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    params: dict | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"config": self.config.to_json(), "dataset": self.dataset, "seed": self.seed,
                "fraction": self.fraction, "train_count": self.train_count,
                "history": self.history, "checkpoint": self.checkpoint}


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels)) if len(labels) else float("nan")


def evaluate(traces, labels, cfg: gpam.ModelConfig, params, batch_size: int = 256) -> dict:
    """Per-head loss and accuracy in eval mode."""
    targets = gpam.head_targets(cfg, labels)
    probs = gpam.predict(traces, cfg, params, batch_size)
    out = {}
    for h in cfg.heads:
        p = probs[h.name]
        y = targets[h.name]
        nll = -np.log(np.maximum(p[np.arange(len(y)), y], 1e-40))
        out[h.name] = {"loss": float(nll.mean()) if len(y) else float("nan"),
                       "accuracy": _accuracy(p, y)}
    return out


def train(cfg: gpam.ModelConfig, data, seed: int = 0, fraction: float = 1.0,
          eval_split: str = "test", eval_limit: int | None = None, checkpoint: str | None = None,
          epochs: int | None = None, progress=None) -> TrainRun:
    """Train from scratch.

    Args:
        cfg: model and optimisation settings.
        data: a dataset directory, or a dict with "train" (and optionally the
            eval split) mapping to (traces, labels) tuples.
        seed: controls initialisation, batch order and dropout.
        fraction: use only the first ``fraction`` of the train split.
        eval_split: split scored after every epoch; None disables it.
        eval_limit: cap on evaluated examples per epoch.
        checkpoint: where to write the final parameters.
        epochs: overrides ``cfg.epochs`` (used by sweeps).
        progress: optional callable receiving each history entry.
    """
    cfg.validate()
    if not 0.0 < fraction <= 1.0:
        raise ConfigOutOfRange("fraction must be in (0, 1]")
    dataset_ref, sim_config = None, None
    if isinstance(data, (str, Path)):
        dataset_ref = str(data)
        manifest = leakage.read_manifest(data)
        sim_config = manifest.get("sim_config")
        if manifest["trace_length"] != cfg.trace_length:
            raise ShapeMismatch(f"dataset trace length {manifest['trace_length']} != "
                                f"config {cfg.trace_length}")
        splits = {"train": leakage.load_split(data, "train")}
        if eval_split:
            splits[eval_split] = leakage.load_split(data, eval_split)
    else:
        splits = data
    X, Y = splits["train"]
    if X.shape[1] != cfg.trace_length:
        raise ShapeMismatch(f"train traces have length {X.shape[1]}, config {cfg.trace_length}")
    n_use = max(1, int(round(len(X) * fraction))) if len(X) else 0
    X = X[:n_use]
    targets = {k: v[:n_use] for k, v in gpam.head_targets(cfg, Y).items()}
    log.info("training on %d of %d train examples (fraction %.3g)",
             n_use, len(splits["train"][0]), fraction)
    eval_data = None
    if eval_split and eval_split in splits:
        ex, ey = splits[eval_split]
        if eval_limit:
            ex, ey = ex[:eval_limit], {k: v[:eval_limit] for k, v in ey.items()}
        eval_data = (ex, ey)

    params = gpam.init_params(cfg, seed)
    opt = Adam(params)
    order_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2])
    n_epochs = cfg.epochs if epochs is None else epochs
    total = n_epochs * cfg.steps_per_epoch
    run = TrainRun(cfg, dataset_ref, seed, fraction, n_use)
    perm, cursor = order_rng.permutation(n_use), 0
    step = 0
    for epoch in range(n_epochs):
        t0 = time.time()
        sums = {h.name: [0.0, 0.0] for h in cfg.heads}
        seen = 0
        for _ in range(cfg.steps_per_epoch):
            if cursor + cfg.batch_size > n_use:
                perm, cursor = order_rng.permutation(n_use), 0
            idx = perm[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch_labels = {k: v[idx] for k, v in targets.items()}
            opt.zero_grad()
            loss, per_head, outs = gpam.model_loss(X[idx], batch_labels, cfg, params,
                                                   train=True, rng=drop_rng)
            loss.backward()
            opt.step(lr_at(step, total, cfg.target_lr))
            step += 1
            for name, lt in per_head.items():
                sums[name][0] += float(lt.data) * len(idx)
                sums[name][1] += _accuracy(outs[name][1].data, batch_labels[name]) * len(idx)
            seen += len(idx)
        entry = {"epoch": epoch + 1, "seconds": round(time.time() - t0, 3),
                 "lr_end": lr_at(max(step - 1, 0), total, cfg.target_lr),
                 "train": {k: {"loss": v[0] / max(seen, 1), "accuracy": v[1] / max(seen, 1)}
                           for k, v in sums.items()}}
        if eval_data is not None:
            entry[eval_split] = evaluate(eval_data[0], eval_data[1], cfg, params)
        run.history.append(entry)
        log.info("epoch %d: %s", epoch + 1, json.dumps(entry))
        if progress:
            progress(entry)
    run.params = params
    if checkpoint:
        gpam.save_checkpoint(checkpoint, cfg, params,
                             {"provenance": {"dataset": dataset_ref, "seed": seed,
                                             "fraction": fraction, "train_count": n_use,
                                             "sim_config": sim_config}})
        run.checkpoint = str(checkpoint)
    return run


def write_history(run: TrainRun, path) -> None:
    try:
        Path(path).write_text(json.dumps(run.to_json(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
