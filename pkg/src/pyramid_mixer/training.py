"""Loss, Adam, the epoch loop with early stopping, and checkpointing.

Training minimizes mean full-vocabulary softmax cross-entropy over
autoregressive (prefix, next item) rows, stops when validation MRR@10
fails to improve for ``patience`` consecutive epochs, and checkpoints
the complete run state (current and best parameters, optimizer moments,
shuffle RNG state, bookkeeping) after every epoch so an interrupted run
resumes bit-exactly.

Checkpoint layout, little-endian throughout: magic ``PYMX``, u32 format
version, u64-length-prefixed JSON run metadata, u64-length-prefixed
tensor manifest (u64 count, then per tensor u64 name length, name bytes,
u64 rank, u64 dims), the raw float32 tensor data in manifest order, and
a trailing CRC32 of everything before it.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from io import BytesIO

import numpy as np

from . import tensor as T
from .data import Dataset, batch_sequences
from .errors import ConfigError, ContractError, DivergenceError, FormatError, NumericError
from .evaluation import evaluate_ranking
from .model import ModelConfig, PyramidMixerNet
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PYMX"
CHECKPOINT_VERSION = 1


@dataclass
class TrainSettings:
    """Optimizer and loop hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 256
    patience: int = 10
    max_epochs: int = 200
    valid_k: int = 10

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.valid_k < 1:
            raise ConfigError(f"valid_k must be >= 1, got {self.valid_k}")


def compute_loss(scores: Tensor, targets: np.ndarray, row_mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy of the target items over unmasked rows."""
    return T.softmax_cross_entropy(scores, targets, row_mask)


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_settings(cls, settings: TrainSettings) -> "AdamState":
        return cls(lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2,
                   eps=settings.eps, weight_decay=settings.weight_decay)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update over every parameter, in place.

    Gradients must be populated; a non-finite gradient aborts the step
    naming the offending parameter.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient; run backward first")
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint serialization


@dataclass
class Checkpoint:
    """Deserialized run state."""

    version: int
    config: ModelConfig
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_hyper: dict
    step: int
    rng_state: dict | None
    epoch: int
    best_metric: float | None
    best_epoch: int
    epochs_since_improvement: int


def config_to_dict(config: ModelConfig) -> dict:
    raw = asdict(config)
    raw["field_names"] = list(config.field_names)
    raw["vocab_sizes"] = list(config.vocab_sizes)
    return raw


def config_from_dict(raw: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
    data = dict(raw)
    data["field_names"] = tuple(data.get("field_names", ()))
    data["vocab_sizes"] = tuple(data.get("vocab_sizes", ()))
    return ModelConfig(**data)


def ensure_config_matches(saved: ModelConfig, wanted: ModelConfig) -> None:
    for name, value in asdict(wanted).items():
        other = getattr(saved, name)
        if other != value:
            raise ConfigError(f"checkpoint was built for {name}={other!r}, requested {name}={value!r}")


def _write_tensor_section(tensors: dict[str, np.ndarray]):
    manifest = BytesIO()
    manifest.write(struct.pack("<Q", len(tensors)))
    payload = BytesIO()
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise ContractError(f"checkpoint tensors must be float32, {name} is {arr.dtype}")
        encoded = name.encode("utf-8")
        manifest.write(struct.pack("<Q", len(encoded)))
        manifest.write(encoded)
        manifest.write(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            manifest.write(struct.pack("<Q", dim))
        payload.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return manifest.getvalue(), payload.getvalue()


def save_checkpoint(path: str, *, config: ModelConfig, params: dict[str, Tensor],
                    best_params: dict[str, np.ndarray], opt: AdamState,
                    rng_state: dict | None, epoch: int, best_metric: float | None,
                    best_epoch: int, epochs_since_improvement: int) -> None:
    """Serialize the full run state; the write is atomic (tmp + rename)."""
    meta = {
        "config": config_to_dict(config),
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                      "eps": opt.eps, "weight_decay": opt.weight_decay, "step": opt.step},
        "rng_state": rng_state,
        "epoch": epoch,
        "best_metric": best_metric,
        "best_epoch": best_epoch,
        "epochs_since_improvement": epochs_since_improvement,
    }
    tensors: dict[str, np.ndarray] = {}
    for name, p in params.items():
        tensors[f"param/{name}"] = p.data
    for name, arr in best_params.items():
        tensors[f"best/{name}"] = arr
    for name, arr in opt.m.items():
        tensors[f"opt.m/{name}"] = arr
    for name, arr in opt.v.items():
        tensors[f"opt.v/{name}"] = arr

    meta_bytes = json.dumps(meta).encode("utf-8")
    manifest_bytes, payload = _write_tensor_section(tensors)
    body = BytesIO()
    body.write(CHECKPOINT_MAGIC)
    body.write(struct.pack("<I", CHECKPOINT_VERSION))
    body.write(struct.pack("<Q", len(meta_bytes)))
    body.write(meta_bytes)
    body.write(struct.pack("<Q", len(manifest_bytes)))
    body.write(manifest_bytes)
    body.write(payload)
    blob = body.getvalue()
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"checkpoint {self.path} is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str) -> Checkpoint:
    """Parse and verify a checkpoint file; any corruption is a format
    error and nothing partial is returned."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 4:
        raise FormatError(f"checkpoint {path} is truncated")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint {path} has bad magic bytes")
    expected_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != expected_crc:
        raise FormatError(f"checkpoint {path} failed its checksum")

    reader = _Reader(blob[:-4], path)
    reader.take(len(CHECKPOINT_MAGIC))
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    meta_len = reader.u64()
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"checkpoint {path} has unreadable metadata: {exc}") from exc
    manifest_len = reader.u64()
    manifest = _Reader(reader.take(manifest_len), path)
    count = manifest.u64()
    entries = []
    for _ in range(count):
        name = manifest.take(manifest.u64()).decode("utf-8")
        rank = manifest.u64()
        dims = tuple(manifest.u64() for _ in range(rank))
        entries.append((name, dims))
    tensors: dict[str, np.ndarray] = {}
    for name, dims in entries:
        n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = reader.take(4 * n_values)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if reader.pos != len(reader.blob):
        raise FormatError(f"checkpoint {path} has {len(reader.blob) - reader.pos} unexpected trailing bytes")

    def bucket(prefix: str) -> dict[str, np.ndarray]:
        return {n[len(prefix):]: a for n, a in tensors.items() if n.startswith(prefix)}

    try:
        config = config_from_dict(meta["config"])
        opt_meta = meta["optimizer"]
        return Checkpoint(
            version=version,
            config=config,
            params=bucket("param/"),
            best_params=bucket("best/"),
            opt_m=bucket("opt.m/"),
            opt_v=bucket("opt.v/"),
            opt_hyper={k: opt_meta[k] for k in ("lr", "beta1", "beta2", "eps", "weight_decay")},
            step=opt_meta["step"],
            rng_state=meta.get("rng_state"),
            epoch=meta["epoch"],
            best_metric=meta.get("best_metric"),
            best_epoch=meta.get("best_epoch", 0),
            epochs_since_improvement=meta.get("epochs_since_improvement", 0),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint {path} metadata is missing {exc}") from exc


def net_from_checkpoint(ck: Checkpoint, use_best: bool = True) -> PyramidMixerNet:
    """Rebuild a scoring-ready network from saved tensors."""
    source = ck.best_params if use_best and ck.best_params else ck.params
    params = {name: Tensor(arr.copy(), requires_grad=True) for name, arr in source.items()}
    return PyramidMixerNet(ck.config, params=params)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    net: PyramidMixerNet
    best_params: dict[str, np.ndarray]
    history: list[dict]
    best_metric: float
    best_epoch: int
    epochs_run: int
    checkpoint_path: str | None
    log_path: str | None

    def best_net(self) -> PyramidMixerNet:
        """A network carrying the best-validation-epoch parameters."""
        if not self.best_params:
            return self.net
        params = {name: Tensor(arr.copy(), requires_grad=True) for name, arr in self.best_params.items()}
        return PyramidMixerNet(replace(self.net.config), params=params)


def _model_config_for(config: ModelConfig, dataset: Dataset) -> ModelConfig:
    names = dataset.vocab.fields
    sizes = dataset.vocab.sizes()
    if config.field_names and config.field_names != names:
        raise ConfigError(f"config field_names {config.field_names} do not match dataset fields {names}")
    if config.F != len(names):
        raise ConfigError(f"config F={config.F} but dataset has {len(names)} fields {names}")
    return replace(config, field_names=names, vocab_sizes=sizes)


def train(config: ModelConfig, dataset: Dataset, settings: TrainSettings, seed: int,
          out_dir: str | None = None, resume_from: str | None = None) -> TrainResult:
    """Run the epoch loop to early stopping or the epoch cap.

    With ``out_dir`` set, each epoch rewrites ``checkpoint.pymx`` (full
    resume state) and appends one JSON line to ``train.log.jsonl`` with
    keys epoch, train_loss, valid_hr10, valid_ndcg10, valid_mrr10,
    wall_seconds. On divergence the last completed epoch's checkpoint is
    left in place and ``DivergenceError`` is raised.
    """
    settings.validate()
    model_config = _model_config_for(config, dataset)
    model_config.validate()
    net = PyramidMixerNet(model_config, seed=seed)
    opt = AdamState.from_settings(settings)
    rng = np.random.default_rng(seed)
    history: list[dict] = []
    best_params: dict[str, np.ndarray] = {}
    best_metric: float | None = None
    best_epoch = 0
    since_improvement = 0
    start_epoch = 0

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        ensure_config_matches(ck.config, model_config)
        if set(ck.params) != set(net.params):
            raise FormatError("checkpoint parameter names do not match the model")
        for name, arr in ck.params.items():
            net.params[name].data = arr.copy()
        for hyper, value in ck.opt_hyper.items():
            if getattr(opt, hyper) != value:
                raise ConfigError(f"checkpoint optimizer {hyper}={value} differs from requested {getattr(opt, hyper)}")
        opt.m = {k: v.copy() for k, v in ck.opt_m.items()}
        opt.v = {k: v.copy() for k, v in ck.opt_v.items()}
        opt.step = ck.step
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
        best_params = {k: v.copy() for k, v in ck.best_params.items()}
        best_metric = ck.best_metric
        best_epoch = ck.best_epoch
        since_improvement = ck.epochs_since_improvement
        start_epoch = ck.epoch

    checkpoint_path = None
    log_path = None
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.pymx")
        log_path = os.path.join(out_dir, "train.log.jsonl")
        log_fh = open(log_path, "a", encoding="utf-8")

    epoch = start_epoch
    try:
        for epoch in range(start_epoch + 1, settings.max_epochs + 1):
            started = time.monotonic()
            loss_sum = 0.0
            row_count = 0
            for batch in batch_sequences(dataset.split, model_config.L, settings.batch_size, seed, rng=rng):
                scores = net.forward(batch.fields, batch.mask)
                loss = compute_loss(scores, batch.targets)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
                net.zero_grads()
                T.backward(loss)
                try:
                    adam_step(net.params, opt)
                except NumericError as exc:
                    raise DivergenceError(f"optimizer aborted at epoch {epoch}: {exc}") from exc
                loss_sum += loss_value * len(batch.targets)
                row_count += len(batch.targets)
            valid = evaluate_ranking(net, dataset.split, stage="valid", k=settings.valid_k,
                                     batch_size=settings.batch_size)
            entry = {
                "epoch": epoch,
                "train_loss": loss_sum / row_count,
                "valid_hr10": valid.hr,
                "valid_ndcg10": valid.ndcg,
                "valid_mrr10": valid.mrr,
                "wall_seconds": time.monotonic() - started,
            }
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if best_metric is None or valid.mrr > best_metric:
                best_metric = valid.mrr
                best_epoch = epoch
                since_improvement = 0
                best_params = {name: p.data.copy() for name, p in net.params.items()}
            else:
                since_improvement += 1
            if checkpoint_path is not None:
                save_checkpoint(
                    checkpoint_path, config=model_config, params=net.params,
                    best_params=best_params, opt=opt, rng_state=rng.bit_generator.state,
                    epoch=epoch, best_metric=best_metric, best_epoch=best_epoch,
                    epochs_since_improvement=since_improvement,
                )
            if since_improvement >= settings.patience:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(
        net=net, best_params=best_params, history=history,
        best_metric=best_metric if best_metric is not None else float("nan"),
        best_epoch=best_epoch, epochs_run=epoch, checkpoint_path=checkpoint_path,
        log_path=log_path,
    )
