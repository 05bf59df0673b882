"""Projection heads and the reconstruction / contrastive / supervised losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import BINARY, MULTICLASS, REGRESSION, CorruptionConfig, EncodedTable, PreprocessStats, corrupt_batch
from .model import Backbone, Featurizer, cls_output, column_outputs
from .tensor import (
    ParamSet,
    Tensor,
    bce_with_logits,
    cross_entropy,
    kaiming_init,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    mse,
    relu,
    zeros_init,
)

RECONSTRUCTION = "reconstruction"
CONTRASTIVE = "contrastive"
SUPERVISED = "supervised"
OBJECTIVES = (RECONSTRUCTION, CONTRASTIVE, SUPERVISED)


@dataclass(frozen=True)
class ObjectiveKind:
    name: str = RECONSTRUCTION
    temperature: float = 1.0
    corruption: CorruptionConfig = CorruptionConfig()
    mask_only: bool = False  # reconstruction: score corrupted cells only

    def __post_init__(self) -> None:
        if self.name not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.name!r}; choose from {OBJECTIVES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class MLPHead:
    """Two-layer ReLU projection: in -> hidden -> out."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, prefix: str = "head") -> None:
        self.prefix = prefix
        self.out_dim = out_dim
        self.params = ParamSet()
        self.params.add(f"{prefix}.fc1.weight", kaiming_init((in_dim, hidden), in_dim, rng), decay=True)
        self.params.add(f"{prefix}.fc1.bias", zeros_init((hidden,)))
        self.params.add(f"{prefix}.fc2.weight", kaiming_init((hidden, out_dim), hidden, rng), decay=True)
        self.params.add(f"{prefix}.fc2.bias", zeros_init((out_dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = relu(linear(x, p[f"{self.prefix}.fc1.weight"], p[f"{self.prefix}.fc1.bias"]))
        return linear(h, p[f"{self.prefix}.fc2.weight"], p[f"{self.prefix}.fc2.bias"])


class ReconstructionHead:
    """One two-layer ReLU network per column, applied to that column's output token.

    Numerical columns predict one value, categorical columns emit logits over
    the column's category indices (reserved slots included).
    """

    def __init__(
        self, n_num: int, cat_cardinalities: Sequence[int], d: int, hidden: int, rng: np.random.Generator, prefix: str = "head"
    ) -> None:
        self.prefix = prefix
        self.n_num = n_num
        self.cat_cardinalities = tuple(cat_cardinalities)
        c = n_num + len(self.cat_cardinalities)
        p = self.params = ParamSet()
        p.add(f"{prefix}.fc1.weight", kaiming_init((c, d, hidden), d, rng), decay=True)
        p.add(f"{prefix}.fc1.bias", zeros_init((c, 1, hidden)))
        if n_num:
            p.add(f"{prefix}.num.weight", kaiming_init((n_num, hidden, 1), hidden, rng), decay=True)
            p.add(f"{prefix}.num.bias", zeros_init((n_num, 1, 1)))
        for j, card in enumerate(self.cat_cardinalities):
            p.add(f"{prefix}.cat{j}.weight", kaiming_init((hidden, card), hidden, rng), decay=True)
            p.add(f"{prefix}.cat{j}.bias", zeros_init((card,)))

    def __call__(self, columns: Tensor) -> tuple[Tensor | None, list[Tensor]]:
        """(B, c, d) column tokens -> ((n_num, B) predictions, per-column logits)."""
        p, pre = self.params, self.prefix
        per_col = columns.transpose(1, 0, 2)  # (c, B, d)
        h = relu(matmul(per_col, p[f"{pre}.fc1.weight"]) + p[f"{pre}.fc1.bias"])
        num = None
        if self.n_num:
            out = matmul(h[: self.n_num], p[f"{pre}.num.weight"]) + p[f"{pre}.num.bias"]
            num = out.reshape(self.n_num, -1)
        logits = [
            linear(h[self.n_num + j], p[f"{pre}.cat{j}.weight"], p[f"{pre}.cat{j}.bias"])
            for j in range(len(self.cat_cardinalities))
        ]
        return num, logits


def reconstruction_loss_from_outputs(
    num_pred: Tensor | None,
    cat_logits: Sequence[Tensor],
    x_num: np.ndarray,
    x_cat: np.ndarray,
    mask: np.ndarray | None = None,
) -> Tensor:
    """MSE averaged over numerical columns plus CE averaged over categorical ones.

    With ``mask`` (B, c) only flagged cells are scored.
    """
    n_num = x_num.shape[1]
    terms: list[Tensor] = []
    if num_pred is not None and n_num:
        if mask is None:
            terms.append(mse(num_pred, x_num.T))
        else:
            w = mask[:, :n_num].T.astype(num_pred.data.dtype)
            diff = num_pred - Tensor(x_num.T, dtype=num_pred.data.dtype)
            terms.append((diff * diff * Tensor(w, dtype=w.dtype)).sum() * (1.0 / max(w.sum(), 1.0)))
    if cat_logits:
        if mask is None:
            ce = [cross_entropy(logit, x_cat[:, j]) for j, logit in enumerate(cat_logits)]
            total = ce[0]
            for term in ce[1:]:
                total = total + term
            terms.append(total * (1.0 / len(ce)))
        else:
            cat_mask = mask[:, n_num:]
            count = max(float(cat_mask.sum()), 1.0)
            rows = np.arange(x_cat.shape[0])
            picked = None
            for j, logit in enumerate(cat_logits):
                sel = rows[cat_mask[:, j]]
                if sel.size == 0:
                    continue
                nll = -log_softmax(logit, axis=-1)[sel, x_cat[sel, j]].sum()
                picked = nll if picked is None else picked + nll
            if picked is not None:
                terms.append(picked * (1.0 / count))
    if not terms:
        raise ValueError("reconstruction needs at least one feature column")
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    return loss


def reconstruction_loss(
    x_num: np.ndarray,
    x_cat: np.ndarray,
    tokens_out: Tensor,
    head: ReconstructionHead,
    mask: np.ndarray | None = None,
    mask_only: bool = False,
) -> Tensor:
    """Loss of reconstructing the clean row from the backbone output of its corrupted view."""
    num, logits = head(column_outputs(tokens_out))
    return reconstruction_loss_from_outputs(num, logits, x_num, x_cat, mask if mask_only else None)


def infonce_loss(z: Tensor, z_tilde: Tensor, temperature: float = 1.0) -> Tensor:
    """Symmetric InfoNCE on cosine similarities; row ``i`` of each view is the positive pair."""
    if z.shape != z_tilde.shape or z.ndim != 2:
        raise ValueError(f"embeddings must share a (B, k) shape, got {z.shape} and {z_tilde.shape}")
    a = l2_normalize(z)
    b = l2_normalize(z_tilde)
    sim = (a @ b.T) * (1.0 / temperature)
    targets = np.arange(z.shape[0])
    return (cross_entropy(sim, targets) + cross_entropy(sim.T, targets)) * 0.5


def supervised_loss_from_outputs(out: Tensor, labels: np.ndarray, task_type: str) -> Tensor:
    labels = np.asarray(labels)
    if task_type == REGRESSION:
        if out.shape[-1] != 1:
            raise ValueError("regression head must emit one value")
        return mse(out, labels.reshape(-1, 1))
    if task_type == BINARY:
        if out.shape[-1] != 1:
            raise ValueError("binary head must emit one logit")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("binary labels must be 0 or 1")
        return bce_with_logits(out, labels)
    if task_type == MULTICLASS:
        if labels.min() < 0 or labels.max() >= out.shape[-1]:
            raise ValueError(f"class labels outside [0, {out.shape[-1]})")
        return cross_entropy(out, labels.astype(np.int64))
    raise ValueError(f"unknown task type {task_type!r}")


def supervised_loss(cls_out: Tensor, head: MLPHead, labels: np.ndarray, task_type: str) -> Tensor:
    return supervised_loss_from_outputs(head(cls_out), labels, task_type)


def head_output_dim(task_type: str, n_classes: int) -> int:
    return n_classes if task_type == MULTICLASS else 1


def build_head(
    objective: ObjectiveKind,
    n_num: int,
    cat_cardinalities: Sequence[int],
    task_type: str,
    n_classes: int,
    d: int,
    rng: np.random.Generator,
    hidden: int = 192,
    embed_dim: int = 192,
):
    if objective.name == RECONSTRUCTION:
        return ReconstructionHead(n_num, cat_cardinalities, d, hidden, rng)
    if objective.name == CONTRASTIVE:
        return MLPHead(d, hidden, embed_dim, rng)
    return MLPHead(d, hidden, head_output_dim(task_type, n_classes), rng)


def objective_loss(
    objective: ObjectiveKind,
    featurizer: Featurizer,
    backbone: Backbone,
    head,
    batch: EncodedTable,
    stats: PreprocessStats,
    task_type: str,
    rng: np.random.Generator,
    training: bool = True,
) -> Tensor:
    """Forward one batch through featurizer, backbone and head; return the scalar loss."""
    if objective.name == SUPERVISED:
        out = backbone(featurizer(batch.x_num, batch.x_cat), training, rng)
        return supervised_loss(cls_output(out), head, batch.y, task_type)
    x_num_t, x_cat_t, mask = corrupt_batch(batch.x_num, batch.x_cat, objective.corruption, stats, rng)
    if objective.name == RECONSTRUCTION:
        out = backbone(featurizer(x_num_t, x_cat_t), training, rng)
        return reconstruction_loss(batch.x_num, batch.x_cat, out, head, mask, objective.mask_only)
    clean = backbone(featurizer(batch.x_num, batch.x_cat), training, rng)
    corrupted = backbone(featurizer(x_num_t, x_cat_t), training, rng)
    return infonce_loss(head(cls_output(clean)), head(cls_output(corrupted)), objective.temperature)
