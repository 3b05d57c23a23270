"""Volumetric classifier: patch embedding, hybrid conv/scan blocks, merging, head.

The pipeline is patch_embed -> [stage: blocks, then patch_merging between
stages] -> classify. Each block splits its channels in half, runs a
convolutional branch (BN -> ReLU -> Conv3D, in that literal order) on one half
and a state-space branch (LN -> Linear -> SiLU -> SS3D -> Linear) on the
other, concatenates, interleaves the halves (channel shuffle), and adds the
block input back as a residual.

SS3D flattens the whole token grid into one sequence under several traversal
orders - forward and reverse of the three cyclic axis-major linearizations -
runs the selective scan per order, inverse-permutes each result back to grid
positions, and averages. The direction set is closed under full point
reflection (all three axes flipped at once): reflecting the grid swaps each
forward traversal with its reverse, so with shared parameters the output
reflects along with the input. Single-axis flips do not preserve the set; no
six-element set of whole-grid traversals can, since the flip group's orbits
have size eight.

Grids keep layout [B, D', H', W', C]: samples lead so batch statistics span
the whole batch, channels trail so norms and projections act per token
without transposes.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .ssm import SsmParams, selective_scan

CONFIG_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 48
    stage_dims: tuple[int, ...] = (48, 96)
    stage_depths: tuple[int, ...] = (2, 2)
    state_dim: int = 16
    num_classes: int = 3
    num_directions: int = 6
    input_dims: tuple[int, int, int] = (224, 224, 160)
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ValidationError("patch_size must be >= 1")
        if len(self.stage_dims) != len(self.stage_depths) or not self.stage_dims:
            raise ValidationError("stage_dims and stage_depths must be equal-length "
                                  "and non-empty")
        if self.embed_dim != self.stage_dims[0]:
            raise ValidationError("embed_dim must equal stage_dims[0]; the patch "
                                  "embedding feeds the first stage directly")
        for i, c in enumerate(self.stage_dims):
            if c < 2 or c % 2:
                raise ValidationError(f"stage_dims[{i}]={c} must be even and >= 2")
            if i and c != 2 * self.stage_dims[i - 1]:
                raise ValidationError("each stage must double the previous width "
                                      f"(stage_dims[{i}]={c})")
        if any(d < 1 for d in self.stage_depths):
            raise ValidationError("every stage needs at least one block")
        if self.state_dim < 1:
            raise ValidationError("state_dim must be >= 1")
        if self.num_classes != 3:
            raise ValidationError("the label set is fixed at 3 classes")
        if self.num_directions not in (2, 6):
            raise ValidationError("num_directions must be 2 or 6")
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise ValidationError("input_dims must be three positive extents")
        halvings = 2 ** (len(self.stage_dims) - 1)
        for d in self.input_dims:
            if d % self.patch_size:
                raise ValidationError(f"input extent {d} not divisible by patch "
                                      f"size {self.patch_size}; resize the volume")
            if (d // self.patch_size) % halvings:
                raise ValidationError(f"grid extent {d // self.patch_size} not "
                                      f"divisible by {halvings} for patch merging")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "stage_dims": list(self.stage_dims),
            "stage_depths": list(self.stage_depths),
            "state_dim": self.state_dim,
            "num_classes": self.num_classes,
            "num_directions": self.num_directions,
            "input_dims": list(self.input_dims),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        if doc.get("version") != CONFIG_VERSION:
            raise ValidationError(f"unsupported config version {doc.get('version')!r}")
        cfg = cls(
            patch_size=int(doc["patch_size"]),
            embed_dim=int(doc["embed_dim"]),
            stage_dims=tuple(int(c) for c in doc["stage_dims"]),
            stage_depths=tuple(int(d) for d in doc["stage_depths"]),
            state_dim=int(doc["state_dim"]),
            num_classes=int(doc["num_classes"]),
            num_directions=int(doc["num_directions"]),
            input_dims=tuple(int(d) for d in doc["input_dims"]),
            seed=int(doc["seed"]),
        )
        cfg.validate()
        return cfg


def tiny_config(**overrides) -> ModelConfig:
    """Small profile for 32x32x16 volumes; trains in minutes on a CPU."""
    base = dict(patch_size=4, embed_dim=8, stage_dims=(8, 16), stage_depths=(1, 1),
                state_dim=8, num_directions=6, input_dims=(32, 32, 16), seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def reference_config(**overrides) -> ModelConfig:
    base = dict(patch_size=16, embed_dim=48, stage_dims=(48, 96), stage_depths=(2, 2),
                state_dim=16, num_directions=6, input_dims=(224, 224, 160), seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclasses.dataclass
class PatchGrid:
    """Token grid [B, D', H', W', C]. Samples lead, channels trail."""

    tokens: T.Tensor

    def __post_init__(self):
        if self.tokens.ndim != 5:
            raise ShapeError(f"grid tokens must be [B, D', H', W', C], got "
                             f"{self.tokens.shape}")
        if any(d < 1 for d in self.tokens.shape):
            raise ShapeError(f"grid has an empty axis: {self.tokens.shape}")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return self.tokens.shape[1:4]

    @property
    def channels(self) -> int:
        return self.tokens.shape[4]

    @property
    def token_count(self) -> int:
        d, h, w = self.grid_dims
        return d * h * w


# Traversal orders for ss3d, cached per grid shape. Order d is index 2*k + r:
# cyclic rotation k of the axes (which axis runs slowest) with r=1 reversed.
_TRAVERSAL_CACHE: dict[tuple[int, int, int], list[tuple[np.ndarray, np.ndarray]]] = {}


def traversal_orders(dims: tuple[int, int, int]) -> list[tuple[np.ndarray, np.ndarray]]:
    cached = _TRAVERSAL_CACHE.get(dims)
    if cached is not None:
        return cached
    d, h, w = dims
    idx = np.arange(d * h * w, dtype=np.int64).reshape(d, h, w)
    orders = []
    for axes in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        perm = np.ascontiguousarray(idx.transpose(axes).ravel())
        for p in (perm, perm[::-1].copy()):
            orders.append((p, np.argsort(p)))
    _TRAVERSAL_CACHE[dims] = orders
    return orders


class BatchNormParams:
    def __init__(self, prefix: str, channels: int, dtype=np.float64,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = T.Parameter(prefix + "gamma", np.ones(channels, dtype=dtype))
        self.beta = T.Parameter(prefix + "beta", np.zeros(channels, dtype=dtype))
        # Fresh stats mean eval-mode normalization starts as the identity map,
        # so an untrained model can be evaluated before its first step.
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


class BlockParams:
    """All weights of one hybrid block over C channels (C/2 per branch)."""

    def __init__(self, prefix: str, channels: int, state_dim: int,
                 num_directions: int, rng: np.random.Generator, dtype=np.float64):
        if channels < 2 or channels % 2:
            raise ValidationError(f"block width must be even and >= 2, got {channels}")
        half = channels // 2
        self.channels = channels
        self.bn = BatchNormParams(prefix + "bn.", half, dtype)
        k_std = np.sqrt(2.0 / (27 * half))
        self.conv_kernel = T.Parameter(
            prefix + "conv.kernel",
            (rng.standard_normal((3, 3, 3, half, half)) * k_std).astype(dtype))
        self.conv_bias = T.Parameter(prefix + "conv.bias", np.zeros(half, dtype=dtype))
        self.ln_gamma = T.Parameter(prefix + "ln.gamma", np.ones(half, dtype=dtype))
        self.ln_beta = T.Parameter(prefix + "ln.beta", np.zeros(half, dtype=dtype))
        p_std = 1.0 / np.sqrt(half)
        self.w_in = T.Parameter(prefix + "ssm_in.weight",
                                (rng.standard_normal((half, half)) * p_std).astype(dtype))
        self.b_in = T.Parameter(prefix + "ssm_in.bias", np.zeros(half, dtype=dtype))
        self.directions = [
            SsmParams(half, state_dim, rng, prefix=f"{prefix}dir{d}.", dtype=dtype)
            for d in range(num_directions)
        ]
        self.w_out = T.Parameter(prefix + "ssm_out.weight",
                                 (rng.standard_normal((half, half)) * p_std).astype(dtype))
        self.b_out = T.Parameter(prefix + "ssm_out.bias", np.zeros(half, dtype=dtype))

    def parameters(self) -> list[T.Parameter]:
        out = [self.bn.gamma, self.bn.beta, self.conv_kernel, self.conv_bias,
               self.ln_gamma, self.ln_beta, self.w_in, self.b_in]
        for d in self.directions:
            out.extend(d.parameters())
        out.extend([self.w_out, self.b_out])
        return out


def patch_embed(volumes: T.Tensor, patch_size: int, w: T.Tensor, b: T.Tensor) -> PatchGrid:
    """Cut each volume into p^3 patches and project each to an embed_dim token."""
    if volumes.ndim != 4:
        raise ShapeError(f"expected volumes [B, D, H, W], got {volumes.shape}")
    p = patch_size
    bb, dd, hh, ww = volumes.shape
    if dd % p or hh % p or ww % p:
        raise ShapeError(f"volume dims {volumes.shape[1:]} not divisible by patch "
                         f"size {p}; resize the volume first")
    gd, gh, gw = dd // p, hh // p, ww // p
    x = T.reshape(volumes, (bb, gd, p, gh, p, gw, p))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    x = T.reshape(x, (bb, gd, gh, gw, p * p * p))
    return PatchGrid(T.linear(x, w, b))


def conv_branch(half: PatchGrid, block: BlockParams, *, train: bool,
                update_stats: bool = False) -> PatchGrid:
    """BN -> ReLU -> Conv3D, shape preserved.

    Train mode normalizes by statistics over the whole batch (all non-channel
    axes); running buffers track those batch statistics and serve eval mode.
    """
    bn = block.bn
    x = T.batch_norm(half.tokens, bn.gamma.value, bn.beta.value,
                     mode="train" if train else "eval", eps=bn.eps,
                     running_mean=None if train else bn.running_mean,
                     running_var=None if train else bn.running_var)
    if train and update_stats:
        data = half.tokens.data
        axes = tuple(range(data.ndim - 1))
        m = bn.momentum
        bn.running_mean = (1 - m) * bn.running_mean + m * data.mean(axis=axes)
        bn.running_var = (1 - m) * bn.running_var + m * data.var(axis=axes)
    x = T.relu(x)
    return PatchGrid(T.conv3d(x, block.conv_kernel.value, block.conv_bias.value))


def ss3d(grid: PatchGrid, dir_params: list[SsmParams],
         scan_mode: str = "parallel") -> PatchGrid:
    """Scan the whole grid under one traversal order per SsmParams, average."""
    n = len(dir_params)
    if n not in (2, 6):
        raise ValidationError(f"ss3d takes 2 or 6 directions, got {n}")
    dims = grid.grid_dims
    e = grid.channels
    flat = T.reshape(grid.tokens, (grid.batch, grid.token_count, e))
    seq0 = T.transpose(flat, (1, 0, 2))  # [L, B, E]: scans run along axis 0
    orders = traversal_orders(dims)
    acc = None
    for (perm, inv), params in zip(orders[:n], dir_params):
        seq = T.take(seq0, perm, axis=0)
        y = selective_scan(seq, params, mode=scan_mode)
        back = T.take(y, inv, axis=0)
        acc = back if acc is None else T.add(acc, back)
    mean = T.scale(acc, 1.0 / n)
    grid_back = T.transpose(mean, (1, 0, 2))
    return PatchGrid(T.reshape(grid_back, (grid.batch,) + dims + (e,)))


def ssm_branch(half: PatchGrid, block: BlockParams,
               scan_mode: str = "parallel") -> PatchGrid:
    """LN -> Linear -> SiLU per token, then ss3d, then the out-projection."""
    x = T.layer_norm(half.tokens, block.ln_gamma.value, block.ln_beta.value)
    x = T.silu(T.linear(x, block.w_in.value, block.b_in.value))
    scanned = ss3d(PatchGrid(x), block.directions, scan_mode)
    return PatchGrid(T.linear(scanned.tokens, block.w_out.value, block.b_out.value))


def _shuffle_indices(channels: int) -> np.ndarray:
    half = channels // 2
    return np.stack([np.arange(half), np.arange(half) + half], axis=1).ravel()


def block_forward(grid: PatchGrid, block: BlockParams, *, train: bool = False,
                  scan_mode: str = "parallel", update_stats: bool = False) -> PatchGrid:
    c = grid.channels
    if c % 2:
        raise ShapeError(f"block needs an even channel count, got {c}")
    if c != block.channels:
        raise ShapeError(f"grid has {c} channels, block expects {block.channels}")
    half = c // 2
    first = PatchGrid(T.take(grid.tokens, np.arange(half), axis=4))
    second = PatchGrid(T.take(grid.tokens, np.arange(half, c), axis=4))
    conv_out = conv_branch(first, block, train=train, update_stats=update_stats)
    ssm_out = ssm_branch(second, block, scan_mode)
    merged = T.concat([conv_out.tokens, ssm_out.tokens], axis=4)
    shuffled = T.take(merged, _shuffle_indices(c), axis=4)
    return PatchGrid(T.add(grid.tokens, shuffled))


def patch_merging(grid: PatchGrid, w: T.Tensor, b: T.Tensor) -> PatchGrid:
    """Fold each 2x2x2 neighborhood into one token: 8C features -> 2C."""
    d, h, wd = grid.grid_dims
    c = grid.channels
    bb = grid.batch
    if d % 2 or h % 2 or wd % 2:
        raise ShapeError(f"patch merging needs even grid dims, got {grid.grid_dims}")
    x = T.reshape(grid.tokens, (bb, d // 2, 2, h // 2, 2, wd // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = T.reshape(x, (bb, d // 2, h // 2, wd // 2, 8 * c))
    return PatchGrid(T.linear(x, w, b))


def classify(grid: PatchGrid, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Global mean pool over tokens -> FC -> softmax. Returns [B, K]."""
    pooled = T.mean(grid.tokens, axis=(1, 2, 3))
    return T.softmax(T.linear(pooled, w, b), axis=-1)


class Model:
    """Owns every parameter and runs the full pipeline."""

    def __init__(self, config: ModelConfig, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        p3 = config.patch_size ** 3
        self.embed_w = T.Parameter(
            "patch_embed.weight",
            (rng.standard_normal((p3, config.embed_dim)) / np.sqrt(p3)).astype(dtype))
        self.embed_b = T.Parameter("patch_embed.bias",
                                   np.zeros(config.embed_dim, dtype=dtype))
        self.stages: list[list[BlockParams]] = []
        self.merges: list[tuple[T.Parameter, T.Parameter]] = []
        for s, (dim, depth) in enumerate(zip(config.stage_dims, config.stage_depths)):
            self.stages.append([
                BlockParams(f"stage{s}.block{k}.", dim, config.state_dim,
                            config.num_directions, rng, dtype)
                for k in range(depth)
            ])
            if s + 1 < len(config.stage_dims):
                m_std = 1.0 / np.sqrt(8 * dim)
                self.merges.append((
                    T.Parameter(f"merge{s}.weight",
                                (rng.standard_normal((8 * dim, 2 * dim)) * m_std).astype(dtype)),
                    T.Parameter(f"merge{s}.bias", np.zeros(2 * dim, dtype=dtype)),
                ))
        # Small nonzero head: logits start near zero (chance-level probs) while
        # keeping the backward path to upstream parameters alive.
        self.head_w = T.Parameter(
            "head.weight",
            (rng.standard_normal((config.stage_dims[-1], config.num_classes)) * 0.01).astype(dtype))
        self.head_b = T.Parameter("head.bias", np.zeros(config.num_classes, dtype=dtype))
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValidationError("duplicate parameter names in model")

    def parameters(self) -> list[T.Parameter]:
        out = [self.embed_w, self.embed_b]
        for blocks in self.stages:
            for blk in blocks:
                out.extend(blk.parameters())
        for w, b in self.merges:
            out.extend([w, b])
        out.extend([self.head_w, self.head_b])
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus BN running buffers, in a stable order."""
        state = {p.name: p.data for p in self.parameters()}
        for s, blocks in enumerate(self.stages):
            for k, blk in enumerate(blocks):
                state[f"stage{s}.block{k}.bn.running_mean"] = blk.bn.running_mean
                state[f"stage{s}.block{k}.bn.running_var"] = blk.bn.running_var
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValidationError(f"state mismatch: missing {sorted(missing)}, "
                                  f"unexpected {sorted(extra)}")
        for p in self.parameters():
            arr = np.asarray(state[p.name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValidationError(f"shape mismatch for {p.name}: "
                                      f"{arr.shape} != {p.data.shape}")
            p.value.data = arr.copy()
            p.value.grad = np.zeros_like(p.value.data)
        for s, blocks in enumerate(self.stages):
            for k, blk in enumerate(blocks):
                blk.bn.running_mean = np.asarray(
                    state[f"stage{s}.block{k}.bn.running_mean"], dtype=self.dtype).copy()
                blk.bn.running_var = np.asarray(
                    state[f"stage{s}.block{k}.bn.running_var"], dtype=self.dtype).copy()

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def logits_batch(self, volumes, *, train: bool = False,
                     scan_mode: str = "parallel",
                     update_stats: bool = False) -> T.Tensor:
        """[B, D, H, W] -> [B, num_classes]."""
        x = volumes if isinstance(volumes, T.Tensor) else T.Tensor(
            np.asarray(volumes, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1:] != tuple(self.config.input_dims):
            raise ShapeError(f"expected volumes [B, {', '.join(map(str, self.config.input_dims))}], "
                             f"got {x.shape}")
        grid = patch_embed(x, self.config.patch_size, self.embed_w.value, self.embed_b.value)
        n_stages = len(self.stages)
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                grid = block_forward(grid, blk, train=train, scan_mode=scan_mode,
                                     update_stats=update_stats)
            if s + 1 < n_stages:
                try:
                    w, b = self.merges[s]
                    grid = patch_merging(grid, w.value, b.value)
                except ShapeError as err:
                    raise ShapeError(f"stage {s}: {err}") from err
        pooled = T.mean(grid.tokens, axis=(1, 2, 3))
        return T.linear(pooled, self.head_w.value, self.head_b.value)

    def logits(self, volume, *, train: bool = False, scan_mode: str = "parallel",
               update_stats: bool = False) -> T.Tensor:
        """Single volume [D, H, W] -> [num_classes]."""
        x = volume if isinstance(volume, T.Tensor) else T.Tensor(
            np.asarray(volume, dtype=self.dtype))
        if x.shape != tuple(self.config.input_dims):
            raise ShapeError(f"volume dims {x.shape} != configured input dims "
                             f"{tuple(self.config.input_dims)}")
        batched = T.reshape(x, (1,) + x.shape)
        out = self.logits_batch(batched, train=train, scan_mode=scan_mode,
                                update_stats=update_stats)
        return T.reshape(out, (self.config.num_classes,))

    def probs(self, volume, *, train: bool = False, scan_mode: str = "parallel",
              update_stats: bool = False) -> T.Tensor:
        return T.softmax(self.logits(volume, train=train, scan_mode=scan_mode,
                                     update_stats=update_stats), axis=-1)


def model_forward(volume, model: Model, *, train: bool = False,
                  scan_mode: str = "parallel") -> T.Tensor:
    """Probability vector over the three classes for one volume."""
    return model.probs(volume, train=train, scan_mode=scan_mode)
