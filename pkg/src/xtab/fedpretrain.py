"""Simulated federated cross-table pretraining.

Each client owns one table, its featurizer and projection head, a local copy
of the shared backbone and its own optimizer state.  A round is: broadcast the
server's shared weights, let every client take ``N`` local optimizer steps,
then add the *sum* of the client deltas to the server weights.  Client deltas
are summed in client-index order in float64, so results do not depend on how
many worker threads ran the clients.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import EncodedTable, Split, TableDataset, attach_preprocess, batch_stream
from .model import Backbone, BackboneConfig, Featurizer, VARIANTS
from .objectives import ObjectiveKind, build_head, objective_loss
from .tensor import OptimizerState, ParamSet, adamw_step, sgd_step

logger = logging.getLogger(__name__)

SHARE_MODES = ("blocks_only", "blocks_plus_cls", "first_block_only")
DEFAULT_CHECKPOINT_ROUNDS = (250, 500, 1000, 1500, 2000)


class ProtocolError(RuntimeError):
    """A round's messages are missing or inconsistent."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or incompatible."""


@dataclass(frozen=True)
class FedConfig:
    n_local: int = 5
    lr: float = 1e-4
    weight_decay: float = 1e-5
    optimizer: str = "adamw"  # or "sgd" (plain local gradient steps)
    batch_size: int = 128
    share_mode: str = "blocks_only"
    aggregation: str = "sum"  # "mean" divides the delta sum by K
    head_hidden: int = 192
    embed_dim: int = 192
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_local < 0:
            raise ValueError("n_local must be non-negative")
        if self.share_mode not in SHARE_MODES:
            raise ValueError(f"unknown share mode {self.share_mode!r}; choose from {SHARE_MODES}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.aggregation not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def is_shared_name(name: str, share_mode: str, backbone_prefix: str = "backbone") -> bool:
    if name.startswith(f"{backbone_prefix}."):
        if share_mode == "first_block_only":
            return name.startswith(f"{backbone_prefix}.block0.")
        return True
    return share_mode == "blocks_plus_cls" and name.endswith(".cls")


def optimizer_step(params: ParamSet, state: OptimizerState, kind: str) -> None:
    if kind == "sgd":
        sgd_step(params, state.lr)
    else:
        adamw_step(params, state)


class Client:
    """One pretraining table with its private (non-shared) weights."""

    def __init__(
        self,
        index: int,
        table: TableDataset,
        objective: ObjectiveKind,
        backbone_config: BackboneConfig,
        config: FedConfig,
        seed: int,
    ) -> None:
        self.index = index
        self.objective = objective
        self.config = config
        # pretraining tables use every row for training
        if table.split is None:
            n = table.n_rows
            table = table.with_split(Split(np.arange(n), np.arange(0), np.arange(0)))
        self.table, self.encoded = attach_preprocess(table)
        if len(self.table.split.train) == 0:
            raise ValueError(f"client {index}: empty training split")
        init_ss, stream_ss, step_ss = np.random.SeedSequence([seed, index]).spawn(3)
        init_rng = np.random.default_rng(init_ss)
        cards = [c.category_count for c in self.table.categorical]
        self.featurizer = Featurizer(len(self.table.numerical), cards, backbone_config.d, init_rng)
        self.backbone = Backbone(backbone_config, init_rng)
        self.head = build_head(
            objective,
            len(self.table.numerical),
            cards,
            self.table.task_type,
            self.table.n_classes,
            backbone_config.d,
            init_rng,
            hidden=config.head_hidden,
            embed_dim=config.embed_dim,
        )
        self.params = ParamSet()
        for part in (self.featurizer.params, self.backbone.params, self.head.params):
            self.params.update(part)
        for name in self.params.names():
            self.params.set_shared(name, is_shared_name(name, config.share_mode))
        self.opt_state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(step_ss)
        self._batches = batch_stream(self.table.split.train, config.batch_size, int(stream_ss.generate_state(1)[0]))
        self.steps_taken = 0

    def shared_names(self) -> list[str]:
        return self.params.shared_names()

    def shared_state(self) -> dict[str, np.ndarray]:
        return self.params.state_dict(self.shared_names())

    def load_shared(self, weights: dict[str, np.ndarray]) -> None:
        missing = set(self.shared_names()) - set(weights)
        if missing:
            raise ProtocolError(f"client {self.index}: broadcast lacks {sorted(missing)[:3]}")
        self.params.load_state_dict({n: weights[n] for n in self.shared_names()})

    def train_step(self) -> float:
        """One batch: loss, backward, optimizer update of shared and private weights."""
        rows = next(self._batches)
        batch: EncodedTable = self.encoded.rows(rows)
        loss = objective_loss(
            self.objective,
            self.featurizer,
            self.backbone,
            self.head,
            batch,
            self.table.preprocess,
            self.table.task_type,
            self.rng,
            training=True,
        )
        loss.backward()
        optimizer_step(self.params, self.opt_state, self.config.optimizer)
        self.steps_taken += 1
        return loss.item()


def client_local_steps(client: Client, n_steps: int) -> tuple[dict[str, np.ndarray], list[float]]:
    """Run ``n_steps`` local updates; return the float64 shared-weight delta and losses."""
    if len(client.table.split.train) == 0:
        raise ValueError(f"client {client.index}: empty training split")
    start = {n: v.astype(np.float64) for n, v in client.shared_state().items()}
    losses = [client.train_step() for _ in range(n_steps)]
    end = client.shared_state()
    delta = {n: end[n].astype(np.float64) - start[n] for n in start}
    return delta, losses


@dataclass
class ServerState:
    weights: dict[str, np.ndarray]
    config: FedConfig
    n_clients: int
    round: int = 0
    aggregations: int = 0
    broadcasts: int = 0


def server_aggregate(server: ServerState, deltas: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """``w <- w + sum_k delta_k`` over shared tensors only, summed in client order."""
    if len(deltas) != server.n_clients:
        raise ProtocolError(f"expected {server.n_clients} client deltas, got {len(deltas)}")
    names = set(server.weights)
    for k, delta in enumerate(deltas):
        if delta is None or set(delta) != names:
            raise ProtocolError(f"client {k} delta does not cover the shared tensors")
    new = {}
    for name, w in server.weights.items():
        total = np.zeros(w.shape, dtype=np.float64)
        for delta in deltas:
            total += delta[name]
        if server.config.aggregation == "mean":
            total /= len(deltas)
        new[name] = (w.astype(np.float64) + total).astype(w.dtype)
    server.weights = new
    server.aggregations += 1
    return new


def broadcast(server: ServerState, clients: Iterable[Client]) -> None:
    for client in clients:
        client.load_shared(server.weights)
    server.broadcasts += 1


def init_server(clients: Sequence[Client], backbone_config: BackboneConfig, config: FedConfig, seed: int) -> ServerState:
    """Kaiming-initialized shared weights (CLS taken from a seed-derived featurizer)."""
    if not clients:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E77]))
    backbone = Backbone(backbone_config, rng)
    weights = backbone.params.state_dict()
    names = clients[0].shared_names()
    for client in clients[1:]:
        if client.shared_names() != names:
            raise ProtocolError("clients disagree on the shared parameter set")
    if config.share_mode == "first_block_only":
        weights = {n: v for n, v in weights.items() if n in names}
    if config.share_mode == "blocks_plus_cls":
        cls_name = clients[0].featurizer.cls_name
        weights[cls_name] = Featurizer(0, (), backbone_config.d, rng).params[cls_name].data.copy()
    weights = {n: weights[n] for n in names}
    return ServerState(weights=weights, config=config, n_clients=len(clients))


@dataclass
class Checkpoint:
    backbone_config: BackboneConfig
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = 1


@dataclass
class PretrainResult:
    history: list[dict]
    checkpoints: dict[int, Checkpoint]
    server: ServerState


def checkpoint_schedule(rounds: int, every: Iterable[int] | None = None) -> list[int]:
    """Requested rounds that fall within the run, plus the final round."""
    wanted = DEFAULT_CHECKPOINT_ROUNDS if every is None else every
    points = sorted({r for r in wanted if 0 < r <= rounds} | {rounds})
    return points


def pretrain_run(
    clients: Sequence[Client],
    server: ServerState,
    rounds: int,
    checkpoint_rounds: Iterable[int] | None = None,
    metadata: dict | None = None,
    on_round: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, Checkpoint], None] | None = None,
) -> PretrainResult:
    """Synchronous FedAvg loop: broadcast, N local steps per client, aggregate."""
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    backbone_config = clients[0].backbone.config
    schedule = set(checkpoint_schedule(rounds, checkpoint_rounds))
    history: list[dict] = []
    checkpoints: dict[int, Checkpoint] = {}
    n_local = server.config.n_local
    workers = max(1, server.config.workers)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def emit(round_no: int) -> None:
        meta = dict(metadata or {})
        meta.update(round=round_no, aggregations=server.aggregations, broadcasts=server.broadcasts)
        ckpt = Checkpoint(backbone_config, {n: v.copy() for n, v in server.weights.items()}, meta)
        checkpoints[round_no] = ckpt
        if on_checkpoint is not None:
            on_checkpoint(round_no, ckpt)

    try:
        if 0 in schedule:
            emit(0)
        for _ in range(rounds):
            broadcast(server, clients)
            if pool is None:
                results = [client_local_steps(c, n_local) for c in clients]
            else:
                # a failing client raises here and aborts the round
                results = list(pool.map(lambda c: client_local_steps(c, n_local), clients))
            server_aggregate(server, [delta for delta, _ in results])
            server.round += 1
            client_losses = [float(np.mean(losses)) if losses else float("nan") for _, losses in results]
            record = {
                "round": server.round,
                "mean_loss": float(np.mean(client_losses)),
                "client_losses": client_losses,
                "aggregations": server.aggregations,
                "broadcasts": server.broadcasts,
                "local_steps": server.round * n_local,
            }
            history.append(record)
            if on_round is not None:
                on_round(record)
            if server.round in schedule:
                emit(server.round)
    finally:
        if pool is not None:
            pool.shutdown()
    # leave clients synchronized with the final server weights
    broadcast(server, clients)
    return PretrainResult(history, checkpoints, server)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# "XTB1" | version u32 | variant u8 | n_blocks u16 | d u16 | n_heads u16 |
# tensor_count u32 | per tensor: name_len u16, name, ndim u8, dims u64..., f32 data |
# CRC32 u32 of everything before it.  All little-endian.

MAGIC = b"XTB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBHHHI")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.backbone_config
    parts = [_HEADER.pack(MAGIC, ckpt.version, VARIANTS.index(cfg.variant), cfg.n_blocks, cfg.d, cfg.n_heads, len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError(f"{source}: file too short ({len(blob)} bytes)")
    body, trailer = blob[:-4], blob[-4:]
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:4]!r}")
    (crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch (truncated or corrupt file)")
    _, version, variant, n_blocks, d, n_heads, count = _HEADER.unpack_from(body, 0)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    if variant >= len(VARIANTS):
        raise CheckpointError(f"{source}: unknown variant code {variant}")
    offset = _HEADER.size
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", body, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}Q", body, offset)
            offset += 8 * ndim
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
            if offset + n_bytes > len(body):
                raise CheckpointError(f"{source}: tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(dims).astype(np.float32)
            offset += n_bytes
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated tensor table") from exc
    if offset != len(body):
        raise CheckpointError(f"{source}: {len(body) - offset} trailing bytes after tensors")
    ff_hidden = None
    ff2 = next((v for n, v in tensors.items() if n.endswith("ff.ff2.weight")), None)
    if ff2 is not None and ff2.shape[0] != d:
        ff_hidden = int(ff2.shape[0])
    cfg = BackboneConfig(variant=VARIANTS[variant], n_blocks=n_blocks, d=d, n_heads=n_heads, ff_hidden=ff_hidden)
    return Checkpoint(cfg, tensors, version=version)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def checkpoint_save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(encode_checkpoint(ckpt))
    if ckpt.metadata:
        _meta_path(path).write_text(json.dumps(ckpt.metadata, sort_keys=True, indent=1))


def config_diff(expected: BackboneConfig, found: BackboneConfig) -> dict[str, tuple]:
    keys = ("variant", "n_blocks", "d", "n_heads")
    return {k: (getattr(expected, k), getattr(found, k)) for k in keys if getattr(expected, k) != getattr(found, k)}


def checkpoint_load(path: str | Path, expected: BackboneConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(blob, str(path))
    if expected is not None:
        diff = config_diff(expected, ckpt.backbone_config)
        if diff:
            detail = ", ".join(f"{k}: expected {a!r}, checkpoint has {b!r}" for k, (a, b) in diff.items())
            raise CheckpointError(f"{path}: incompatible backbone ({detail})")
    meta = _meta_path(path)
    if meta.exists():
        ckpt.metadata = json.loads(meta.read_text())
    return ckpt
