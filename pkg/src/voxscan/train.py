"""Loss, optimizer, training loop, and checkpoint serialization.

Everything here is deterministic given (seed, data, config): batch order comes
from one seeded generator whose state rides along in the checkpoint, so a run
resumed from disk continues bit-identically to one that never stopped.

The checkpoint is a little-endian binary container: magic, format version,
then length-prefixed sections (model config JSON, state table of
name/shape/float64 values, optimizer state, meta JSON with epoch and RNG
state). Values are stored in double precision regardless of compute precision.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import (CheckpointError, DivergenceError, NumericsError,
                     ValidationError)
from .model import Model, ModelConfig
from .volumes import ClassLabel, DatasetManifest, load_dataset

CHECKPOINT_MAGIC = b"VXCK"
CHECKPOINT_VERSION = 1


# Cross-entropy as a single op: log-sum-exp keeps it stable for any finite
# logits, and the backward rule is softmax(logits) minus the one-hot target.

def _f_cross_entropy(logits, *, labels):
    if logits.ndim == 1:
        batch = logits[None, :]
    elif logits.ndim == 2:
        batch = logits
    else:
        raise ValueError(f"cross_entropy expects [K] or [B, K] logits, got shape {logits.shape}")
    b, k = batch.shape
    if len(labels) != b:
        raise ValueError(f"{b} logit rows but {len(labels)} labels")
    idx = np.asarray(labels, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError(f"label outside class range [0, {k})")
    m = batch.max(axis=1, keepdims=True)
    z = batch - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    losses = lse - batch[np.arange(b), idx]
    loss = np.asarray(losses.mean(), dtype=batch.dtype)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return loss, {"probs": probs, "idx": idx, "shape": logits.shape}


def _b_cross_entropy(cache, g):
    probs, idx = cache["probs"], cache["idx"]
    b = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(b), idx] -= 1.0
    grad *= np.asarray(g).reshape(()) / b
    return (grad.reshape(cache["shape"]),)


def _gc_cross_entropy(rng):
    logits = rng.standard_normal((4, 3)) * 2.0
    labels = tuple(int(v) for v in rng.integers(0, 3, size=4))
    return [logits], {"labels": labels}, (True,)


T.register("cross_entropy", _f_cross_entropy, _b_cross_entropy, _gc_cross_entropy)


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-likelihood. labels: one int/ClassLabel or a sequence."""
    if isinstance(labels, (int, np.integer, ClassLabel)):
        labels = (int(labels),)
    else:
        labels = tuple(int(v) for v in labels)
    k = logits.shape[-1]
    if any(v < 0 or v >= k for v in labels):
        raise ValidationError(f"label outside class range [0, {k})")
    expected = 1 if logits.ndim == 1 else logits.shape[0]
    if len(labels) != expected:
        raise ValidationError(f"{expected} logit rows but {len(labels)} labels")
    return T.apply("cross_entropy", logits, labels=labels)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    precision: str = "double"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValidationError("eps must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.precision not in T.PRECISIONS:
            raise ValidationError(f"precision must be one of {sorted(T.PRECISIONS)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        cfg = cls(**{f.name: doc[f.name] for f in dataclasses.fields(cls) if f.name in doc})
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        cfg.validate()
        return cfg


@dataclasses.dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[T.Parameter]) -> "OptimizerState":
        return cls(step=0,
                   m={p.name: np.zeros_like(p.data, dtype=np.float64) for p in params},
                   v={p.name: np.zeros_like(p.data, dtype=np.float64) for p in params})


def adam_step(params: Sequence[T.Parameter], state: OptimizerState,
              config: TrainConfig) -> None:
    """One bias-corrected adaptive update, in place. Gradients read from .grad."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad.astype(np.float64, copy=False)
        m = state.m[p.name]
        v = state.v[p.name]
        if m.shape != g.shape:
            raise ValidationError(f"optimizer state shape mismatch for {p.name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.value.data -= (config.learning_rate * update).astype(p.data.dtype)
    state.step = t


@dataclasses.dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    eval_loss: float
    eval_accuracy: float


@dataclasses.dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    state: dict[str, np.ndarray]
    opt: OptimizerState
    epoch: int
    rng_state: dict


def checkpoint_save(c: Checkpoint) -> bytes:
    if c.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"cannot write version {c.version}")
    sections = []

    config_doc = json.dumps(c.model_config.to_dict(), sort_keys=True,
                            separators=(",", ":")).encode()
    sections.append(config_doc)

    buf = bytearray(struct.pack("<I", len(c.state)))
    for name, arr in c.state.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        buf += arr.astype("<f8").tobytes()
    sections.append(bytes(buf))

    buf = bytearray(struct.pack("<QI", c.opt.step, len(c.opt.m)))
    for name in c.opt.m:
        m = np.asarray(c.opt.m[name], dtype=np.float64)
        v = np.asarray(c.opt.v[name], dtype=np.float64)
        if m.shape != v.shape:
            raise CheckpointError(f"optimizer moment shapes differ for {name}")
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", m.ndim)
        buf += struct.pack(f"<{m.ndim}I", *m.shape) if m.ndim else b""
        buf += m.astype("<f8").tobytes()
        buf += v.astype("<f8").tobytes()
    sections.append(bytes(buf))

    meta = json.dumps({"epoch": c.epoch, "rng_state": c.rng_state},
                      sort_keys=True, separators=(",", ":")).encode()
    sections.append(meta)

    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", c.version)
    for payload in sections:
        out += struct.pack("<Q", len(payload))
        out += payload
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint: corrupt length")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _read_array_table(r: "_Reader", moments: bool):
    count, = r.unpack("<I")
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen, = r.unpack("<H")
        name = r.read(nlen).decode()
        ndim, = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        first[name] = np.frombuffer(r.read(size * 8), dtype="<f8").reshape(shape).copy()
        if moments:
            second[name] = np.frombuffer(r.read(size * 8), dtype="<f8").reshape(shape).copy()
    return (first, second) if moments else first


def checkpoint_load(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    n, = r.unpack("<Q")
    config = ModelConfig.from_dict(json.loads(r.read(n).decode()))

    n, = r.unpack("<Q")
    section = _Reader(r.read(n))
    state = _read_array_table(section, moments=False)

    n, = r.unpack("<Q")
    section = _Reader(r.read(n))
    step, = section.unpack("<Q")
    m, v = _read_array_table(section, moments=True)

    n, = r.unpack("<Q")
    meta = json.loads(r.read(n).decode())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(version=version, model_config=config, state=state,
                      opt=OptimizerState(step=int(step), m=m, v=v),
                      epoch=int(meta["epoch"]), rng_state=meta["rng_state"])


def checkpoint_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:12]


def evaluate(model: Model, dataset: Sequence[tuple[np.ndarray, int]],
             scan_mode: str = "parallel") -> tuple[float, float]:
    """Mean loss and accuracy over (volume, label) pairs, no tape, BN in eval mode."""
    if not dataset:
        raise ValidationError("evaluation set is empty")
    total_loss = 0.0
    correct = 0
    with T.no_grad():
        for vol, label in dataset:
            logits = model.logits(vol, train=False, scan_mode=scan_mode)
            total_loss += cross_entropy(logits, int(label)).item()
            if int(np.argmax(logits.data)) == int(label):
                correct += 1
    n = len(dataset)
    return total_loss / n, correct / n


def _dataset_for(manifest: DatasetManifest, config: ModelConfig, base_dir: str,
                 dtype) -> list[tuple[np.ndarray, int]]:
    pairs = load_dataset(manifest, tuple(config.input_dims), base_dir=base_dir)
    return [(vol.astype(dtype), int(label)) for vol, label in pairs]


def train_loop(model_config: ModelConfig, train_manifest: DatasetManifest,
               eval_manifest: DatasetManifest, config: TrainConfig, *,
               base_dir: str = ".", resume: Checkpoint | None = None,
               scan_mode: str = "parallel",
               log: Callable[[EpochStats], None] | None = None,
               ) -> tuple[Checkpoint, list[EpochStats]]:
    """Seeded shuffle -> batched forward -> cross_entropy -> backward -> adam_step,
    evaluating after every epoch. Returns the final checkpoint and the history.

    With resume, continues from checkpoint.epoch + 1 up to config.epochs using
    the stored parameters, optimizer moments, and RNG state; the continuation
    is bit-identical to a run that never stopped.
    """
    config.validate()
    model_config.validate()
    if not train_manifest.entries or not eval_manifest.entries:
        raise ValidationError("manifests must be non-empty")
    dtype = T.PRECISIONS[config.precision]
    train_set = _dataset_for(train_manifest, model_config, base_dir, dtype)
    eval_set = _dataset_for(eval_manifest, model_config, base_dir, dtype)

    model = Model(model_config, dtype)
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.for_params(model.parameters())
    start_epoch = 1
    if resume is not None:
        if resume.model_config != model_config:
            raise ValidationError("checkpoint model config differs from requested config")
        model.load_state(resume.state)
        opt = OptimizerState(step=resume.opt.step,
                             m={k: a.copy() for k, a in resume.opt.m.items()},
                             v={k: a.copy() for k, a in resume.opt.v.items()})
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch + 1

    params = model.parameters()
    n = len(train_set)
    history: list[EpochStats] = []
    for epoch in range(start_epoch, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            model.zero_grads()
            try:
                vols = np.stack([train_set[int(i)][0] for i in batch])
                labels = [train_set[int(i)][1] for i in batch]
                logits = model.logits_batch(vols, train=True, scan_mode=scan_mode,
                                            update_stats=True)
                loss = cross_entropy(logits, labels)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericsError("non-finite loss")
                T.backward(loss)
            except NumericsError as err:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, step {opt.step + 1}: {err}"
                ) from err
            adam_step(params, opt, config)
            loss_sum += loss_value * len(batch)
        try:
            eval_loss, eval_acc = evaluate(model, eval_set, scan_mode)
        except NumericsError as err:
            # blowing up during the post-epoch evaluation is still divergence
            raise DivergenceError(
                f"training diverged at epoch {epoch}, step {opt.step}: {err}"
            ) from err
        stats = EpochStats(epoch, loss_sum / n, eval_loss, eval_acc)
        history.append(stats)
        if log is not None:
            log(stats)

    state = {k: np.asarray(a, dtype=np.float64) for k, a in model.state_arrays().items()}
    ckpt = Checkpoint(version=CHECKPOINT_VERSION, model_config=model_config,
                      state=state, opt=opt, epoch=config.epochs,
                      rng_state=rng.bit_generator.state)
    return ckpt, history


def history_csv(history: Sequence[EpochStats]) -> str:
    lines = ["epoch,train_loss,eval_loss,eval_accuracy"]
    for s in history:
        lines.append(f"{s.epoch},{s.train_loss!r},{s.eval_loss!r},{s.eval_accuracy!r}")
    return "\n".join(lines) + "\n"


@dataclasses.dataclass
class ModelGradCheckResult:
    param_errors: dict[str, float]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max(self.param_errors.values()) if self.param_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def model_grad_check(config: ModelConfig | None = None, *, seed: int = 0,
                     tol: float = 1e-3, h: float = 1e-5) -> ModelGradCheckResult:
    """End-to-end analytic-vs-finite-difference check over every parameter.

    The loss is cross-entropy of one training-mode forward (BN on batch
    statistics, running stats frozen), so each evaluation is a pure function
    of the parameters.
    """
    from .model import tiny_config
    if config is None:
        config = tiny_config(state_dim=4)
    model = Model(config, np.float64)
    rng = np.random.default_rng(seed)
    volume = rng.uniform(0.0, 1.0, size=tuple(config.input_dims))
    label = int(rng.integers(0, config.num_classes))

    def loss_value() -> float:
        logits = model.logits(volume, train=True, update_stats=False)
        return cross_entropy(logits, label).item()

    loss = cross_entropy(model.logits(volume, train=True, update_stats=False), label)
    model.zero_grads()
    T.backward(loss)
    analytic = {p.name: p.grad.copy() for p in model.parameters()}

    errors: dict[str, float] = {}
    with T.no_grad():
        for p in model.parameters():
            original = p.value.data

            def f(arr, _p=p):
                _p.value.data = arr
                return loss_value()

            fd = T._fd_array(f, original, h=h)
            p.value.data = original
            errors[p.name] = T._rel_err(analytic[p.name], fd)
    return ModelGradCheckResult(errors, tol)
