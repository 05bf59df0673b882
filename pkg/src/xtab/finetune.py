"""Downstream finetuning: fresh featurizer and head, warm-started backbone."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import BINARY, MULTICLASS, REGRESSION, EncodedTable, TableDataset, destandardize_labels, iterate_batches, prepare
from .fedpretrain import Checkpoint, CheckpointError, config_diff
from .metrics import HIGHER_BETTER, METRIC_DIRECTION, RESULT_SCHEMA_VERSION, auc, log_loss, rmse
from .model import Backbone, BackboneConfig, Featurizer, cls_output
from .objectives import MLPHead, head_output_dim, supervised_loss_from_outputs
from .tensor import OptimizerState, ParamSet, adamw_step, no_grad

CONTINUE = "continue"
STOP = "stop"

REGIMES = {
    # max_epochs, patience (None = no early stopping), val_check_interval, top_k
    "light": (3, None, 1.0, 1),
    "heavy": (500, 3, 1.0, 1),
    "best": (500, 20, 0.5, 3),
}


@dataclass(frozen=True)
class FinetuneConfig:
    regime: str = "light"
    init: str = "random"  # "random" or a checkpoint path
    train_fraction: float = 1.0
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-5
    head_hidden: int = 192
    # regime overrides; None takes the regime default
    max_epochs: int | None = None
    patience: int | None = None
    val_check_interval: float | None = None
    top_k: int | None = None

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {sorted(REGIMES)}")
        max_epochs, patience, interval, top_k = REGIMES[self.regime]
        for name, default in (("max_epochs", max_epochs), ("val_check_interval", interval), ("top_k", top_k)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.patience is None and patience is not None:
            object.__setattr__(self, "patience", patience)
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.val_check_interval not in (0.5, 1.0):
            raise ValueError("val_check_interval must be 0.5 or 1.0")
        if self.top_k < 1 or self.max_epochs < 1:
            raise ValueError("top_k and max_epochs must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def early_stop_check(history: Sequence[float], patience: int | None, direction: str) -> str:
    """Stop once ``patience`` consecutive checks passed without strictly beating the best."""
    if not history:
        raise ValueError("empty validation history")
    if patience is None:
        return CONTINUE
    sign = 1.0 if direction == HIGHER_BETTER else -1.0
    best = -math.inf
    since = 0
    for score in history:
        if sign * score > best:
            best = sign * score
            since = 0
        else:
            since += 1
    return STOP if since >= patience else CONTINUE


class CheckpointPool:
    """The ``capacity`` best (score, snapshot) pairs seen so far, best first."""

    def __init__(self, capacity: int, direction: str) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.direction = direction
        self.entries: list[tuple[float, dict[str, np.ndarray]]] = []

    def _key(self, score: float) -> float:
        return -score if self.direction == HIGHER_BETTER else score

    def offer(self, score: float, snapshot: dict[str, np.ndarray]) -> bool:
        if len(self.entries) == self.capacity and self._key(score) >= self._key(self.entries[-1][0]):
            return False
        # earlier entries win ties
        pos = len(self.entries)
        while pos > 0 and self._key(score) < self._key(self.entries[pos - 1][0]):
            pos -= 1
        self.entries.insert(pos, (score, {k: v.copy() for k, v in snapshot.items()}))
        del self.entries[self.capacity:]
        return True

    @property
    def best_score(self) -> float:
        return self.entries[0][0]

    def snapshots(self) -> list[dict[str, np.ndarray]]:
        return [s for _, s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def model_soup(snapshots: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Uniform soup: element-wise mean of every tensor (accumulated in float64)."""
    if not snapshots:
        raise ValueError("soup of zero snapshots")
    first = snapshots[0]
    for snap in snapshots[1:]:
        if snap.keys() != first.keys():
            raise ValueError("snapshots have different parameter names")
        for name, value in snap.items():
            if value.shape != first[name].shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {first[name].shape}")
    out = {}
    for name, value in first.items():
        total = np.zeros(value.shape, dtype=np.float64)
        for snap in snapshots:
            total += snap[name]
        out[name] = (total / len(snapshots)).astype(value.dtype)
    return out


class TabularModel:
    """Featurizer -> backbone -> CLS -> supervised head."""

    def __init__(self, featurizer: Featurizer, backbone: Backbone, head: MLPHead, task_type: str) -> None:
        self.featurizer = featurizer
        self.backbone = backbone
        self.head = head
        self.task_type = task_type
        self.params = ParamSet()
        for part in (featurizer.params, backbone.params, head.params):
            self.params.update(part)

    def forward(self, x_num: np.ndarray, x_cat: np.ndarray, training: bool = False, rng=None):
        return self.head(cls_output(self.backbone(self.featurizer(x_num, x_cat), training, rng)))

    def predict(self, data: EncodedTable, batch_size: int = 512) -> np.ndarray:
        """Raw head outputs (standardized values or logits) in float64."""
        outs = []
        with no_grad():
            for i in range(0, len(data), batch_size):
                chunk = data.rows(np.arange(i, min(i + batch_size, len(data))))
                outs.append(self.forward(chunk.x_num, chunk.x_cat).data.astype(np.float64))
        return np.concatenate(outs)


def init_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators so init choices never shift each other."""
    names = ("featurizer", "head", "backbone", "batches", "dropout")
    children = np.random.SeedSequence([seed, 0xF1]).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def load_backbone_weights(model: TabularModel, ckpt: Checkpoint) -> None:
    diff = config_diff(model.backbone.config, ckpt.backbone_config)
    if diff:
        detail = ", ".join(f"{k}: model {a!r}, checkpoint {b!r}" for k, (a, b) in diff.items())
        raise CheckpointError(f"checkpoint incompatible with model ({detail})")
    for name, value in ckpt.tensors.items():
        if name not in model.params:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
        if model.params[name].shape != value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {value.shape} vs model {model.params[name].shape}")
    model.params.load_state_dict(ckpt.tensors, strict=False)


def build_model(
    task: TableDataset, backbone_config: BackboneConfig, seed: int, head_hidden: int = 192, checkpoint: Checkpoint | None = None
) -> tuple[TabularModel, dict[str, np.random.Generator]]:
    streams = init_streams(seed)
    cards = [c.category_count for c in task.categorical]
    featurizer = Featurizer(len(task.numerical), cards, backbone_config.d, streams["featurizer"])
    backbone = Backbone(backbone_config, streams["backbone"])
    head = MLPHead(backbone_config.d, head_hidden, head_output_dim(task.task_type, task.n_classes), streams["head"])
    model = TabularModel(featurizer, backbone, head, task.task_type)
    if checkpoint is not None:
        load_backbone_weights(model, checkpoint)
    return model, streams


def task_metric(task_type: str) -> str:
    return {BINARY: "auc", MULTICLASS: "logloss", REGRESSION: "rmse"}[task_type]


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_outputs(outputs: np.ndarray, task: TableDataset, rows: np.ndarray) -> float:
    """Metric of raw head outputs against the original labels of ``rows``."""
    y = task.columns[task.label.name][rows]
    if task.task_type == BINARY:
        return auc(outputs[:, 0], y)
    if task.task_type == MULTICLASS:
        return log_loss(_softmax64(outputs), y)
    return rmse(destandardize_labels(outputs[:, 0], task.preprocess), y)


def evaluate(model: TabularModel, task: TableDataset, encoded: EncodedTable, split: str = "val") -> float:
    rows = task.split[split]
    return score_outputs(model.predict(encoded.rows(rows)), task, rows)


@dataclass
class FinetuneResult:
    model: TabularModel
    best_val: float
    val_history: list[float]
    epochs_run: int
    steps: int
    train_rows: int
    initial_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def finetune(
    task: TableDataset,
    encoded: EncodedTable,
    config: FinetuneConfig,
    backbone_config: BackboneConfig,
    seed: int,
    checkpoint: Checkpoint | None = None,
    val_scorer: Callable[[TabularModel], float] | None = None,
) -> FinetuneResult:
    """Train every component on ``task``'s training split; keep the best validation snapshot.

    ``task`` must carry a split and preprocessing statistics (see :func:`prepare`).
    """
    if task.split is None or task.preprocess is None:
        raise ValueError("task must be split and preprocessed before finetuning")
    model, streams = build_model(task, backbone_config, seed, config.head_hidden, checkpoint)
    initial_state = model.params.state_dict()
    train_rows = task.subset_train(config.train_fraction, seed).split.train
    direction = METRIC_DIRECTION[task_metric(task.task_type)]
    scorer = val_scorer or (lambda m: evaluate(m, task, encoded, "val"))
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    pool = CheckpointPool(config.top_k, direction)
    history: list[float] = []
    batch_seed = int(streams["batches"].integers(2**31))
    steps = 0
    epochs = 0
    stop = False
    for epoch in range(config.max_epochs):
        batches = iterate_batches(train_rows, config.batch_size, True, batch_seed, epoch)
        n = len(batches)
        checks = {n} if config.val_check_interval == 1.0 else {math.ceil(n / 2), n}
        for b, rows in enumerate(batches, start=1):
            batch = encoded.rows(rows)
            out = model.forward(batch.x_num, batch.x_cat, training=True, rng=streams["dropout"])
            loss = supervised_loss_from_outputs(out, batch.y, task.task_type)
            loss.backward()
            adamw_step(model.params, opt)
            steps += 1
            if b in checks:
                score = scorer(model)
                history.append(score)
                pool.offer(score, model.params.state_dict())
                if early_stop_check(history, config.patience, direction) == STOP:
                    stop = True
                    break
        epochs = epoch + 1
        if stop:
            break
    final = pool.snapshots()[0] if config.top_k == 1 else model_soup(pool.snapshots())
    model.params.load_state_dict(final)
    return FinetuneResult(model, pool.best_score, history, epochs, steps, len(train_rows), initial_state)


def result_record(
    *,
    task: str,
    trial: int,
    seed: int,
    regime: str,
    init: str,
    model: str,
    pretrain_round: int | None,
    metric: str,
    value: float,
    wall_clock: float,
    config_hash: str,
    **extra,
) -> dict:
    record = {
        "schema_version": RESULT_SCHEMA_VERSION,
        "task": task,
        "trial": trial,
        "seed": seed,
        "regime": regime,
        "init": init,
        "model": model,
        "pretrain_round": pretrain_round,
        "metric": metric,
        "value": float(value),
        "direction": METRIC_DIRECTION[metric],
        "wall_clock": wall_clock,
        "config_hash": config_hash,
    }
    record.update(extra)
    return record


def append_records(path: str | Path, records: Sequence[dict]) -> None:
    """Append one JSON object per line; each line goes out in a single write."""
    with Path(path).open("a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()


def run_trial(
    dataset: TableDataset,
    trial: int,
    config: FinetuneConfig,
    backbone_config: BackboneConfig,
    seed: int,
    checkpoint: Checkpoint | None = None,
    model_name: str = "ftt",
    config_hash: str = "",
) -> dict:
    """Split by ``trial``, finetune, score on the test fold and return a result record."""
    start = time.perf_counter()
    task, encoded = prepare(dataset, trial)
    result = finetune(task, encoded, config, backbone_config, seed, checkpoint)
    value = evaluate(result.model, task, encoded, "test")
    pretrain_round = None
    if checkpoint is not None:
        pretrain_round = checkpoint.metadata.get("round")
    return result_record(
        task=dataset.name,
        trial=trial,
        seed=seed,
        regime=config.regime,
        init="random" if checkpoint is None else "checkpoint",
        model=model_name,
        pretrain_round=pretrain_round,
        metric=task_metric(task.task_type),
        value=value,
        wall_clock=time.perf_counter() - start,
        config_hash=config_hash,
        val_score=result.best_val,
        epochs=result.epochs_run,
        train_rows=result.train_rows,
    )


def with_regime(config: FinetuneConfig, regime: str) -> FinetuneConfig:
    return replace(config, regime=regime, max_epochs=None, patience=None, val_check_interval=None, top_k=None)
