"""Patch-prior completion networks built from :mod:`patchforge.diff` ops.

Shapes: inputs are (B, D, D, D) TSDF arrays; a resolution-R model encodes them into
N^3 = (D/R)^3 patch features of width ``d``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diff
from .diff import Tensor
from .priors import PriorPool, chunk_values


@dataclass
class ModelConfig:
    d: int = 128
    resolutions: list = field(default_factory=lambda: [32, 8, 4])
    channels: int = 16
    norm: str = "group"
    norm_groups: int = 8
    k_max_priors: int = 3
    decoder_channels: int = 8
    resolution: int = 32
    truncation: float = 2.5

    def __post_init__(self):
        if self.d <= 0 or self.channels <= 0:
            raise ValueError("d and channels must be positive")
        if self.norm not in ("group", "none"):
            raise ValueError(f"norm must be 'group' or 'none', got {self.norm!r}")
        for R in self.resolutions:
            if R < 2 or R & (R - 1) or self.resolution % R:
                raise ValueError(f"patch resolution {R} must be a power of two dividing {self.resolution}")

    def to_dict(self):
        return asdict(self)


class Module:
    """Named parameter container; subclasses register parameters via :meth:`param`."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params = {}

    def param(self, name, value) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=f"{self.prefix}/{name}")
        self.params[t.name] = t
        return t

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state, strict=True):
        for k, t in self.params.items():
            if k not in state:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {k}")
                continue
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.copy()

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag
            if not flag:
                t.grad = None


def _conv_init(rng, c_out, c_in, k):
    fan_in = c_in * k**3
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k, k))


def _groups(requested, channels):
    return math.gcd(requested, channels)


class Encoder(Module):
    """log2(R) stride-2 conv blocks (k=4, p=1) with group norm + relu, then a 1x1x1 projection to d."""

    def __init__(self, prefix, R, cfg: ModelConfig, rng):
        super().__init__(prefix)
        self.R = R
        self.cfg = cfg
        n_blocks = int(round(math.log2(R)))
        self.blocks = []
        c_in = 1
        for i in range(n_blocks):
            c_out = min(cfg.channels * 2**i, max(cfg.d, cfg.channels))
            w = self.param(f"conv{i}/w", _conv_init(rng, c_out, c_in, 4))
            b = self.param(f"conv{i}/b", np.zeros(c_out))
            if cfg.norm == "group":
                g = self.param(f"norm{i}/g", np.ones(c_out))
                be = self.param(f"norm{i}/b", np.zeros(c_out))
            else:
                g = be = None
            self.blocks.append((w, b, g, be, _groups(cfg.norm_groups, c_out)))
            c_in = c_out
        self.proj_w = self.param("proj/w", _conv_init(rng, cfg.d, c_in, 1) * math.sqrt(0.5))
        self.proj_b = self.param("proj/b", np.zeros(cfg.d))

    def __call__(self, x: Tensor) -> Tensor:
        h = diff.mul(x, 1.0 / self.cfg.truncation)
        for w, b, g, be, groups in self.blocks:
            h = diff.conv3d(h, w, b, stride=2, padding=1)
            if g is not None:
                h = diff.group_norm(h, g, be, groups)
            h = diff.relu(h)
        return diff.conv3d(h, self.proj_w, self.proj_b)


def _to_tokens(vol: Tensor) -> Tensor:
    """(B, d, N, N, N) -> (B, N^3, d)."""
    B, d = vol.shape[:2]
    return diff.transpose(diff.reshape(vol, (B, d, -1)), (0, 2, 1))


def _to_volume(tokens: Tensor, N: int) -> Tensor:
    """(B, N^3, c) -> (B, c, N, N, N)."""
    B, _, c = tokens.shape
    return diff.reshape(diff.transpose(tokens, (0, 2, 1)), (B, c, N, N, N))


def attention(q: Tensor, keys: Tensor) -> Tensor:
    """softmax(q . K^T / (d/2)) over the key axis. q: (..., d); keys: (M, d)."""
    if keys.shape[0] == 0:
        raise ValueError("attention needs at least one key")
    d = q.shape[-1]
    scores = diff.matmul(q, diff.transpose(keys, (1, 0)))
    return diff.softmax(diff.mul(scores, 1.0 / (d / 2.0)), axis=-1)


def reconstruct_patches(weights: Tensor, values: Tensor, D: int) -> Tensor:
    """Blend prior chunks with attention weights and reassemble the (B, D, D, D) volume."""
    B, n_patches, _ = weights.shape
    R = round(values.shape[1] ** (1 / 3))
    N = D // R
    if N**3 != n_patches:
        raise ValueError(f"{n_patches} patches do not tile a {D}^3 grid with side {R}")
    p = diff.matmul(weights, values)
    p = diff.reshape(p, (B, N, N, N, R, R, R))
    p = diff.transpose(p, (0, 1, 4, 2, 5, 3, 6))
    return diff.reshape(p, (B, D, D, D))


def _as_input(S) -> Tensor:
    if isinstance(S, Tensor):
        x = S
    else:
        x = Tensor(np.asarray(S, dtype=np.float32))
    if x.ndim == 3:
        x = diff.reshape(x, (1,) + x.shape)
    return diff.reshape(x, (x.shape[0], 1) + x.shape[1:])


class PatchPriorModel(Module):
    """Single-resolution model: input encoder queries prior-encoder keys, output blends prior chunks."""

    def __init__(self, R: int, cfg: ModelConfig, seed: int = 0):
        super().__init__(f"s1/{R}")
        rng = np.random.default_rng(seed)
        self.R = R
        self.cfg = cfg
        self.N = cfg.resolution // R
        self.input_encoder = Encoder(f"s1/{R}/in", R, cfg, rng)
        self.prior_encoder = Encoder(f"s1/{R}/pr", R, cfg, rng)
        self.params = {**self.input_encoder.params, **self.prior_encoder.params}

    def encode_input(self, S) -> Tensor:
        x = _as_input(S)
        if x.shape[2:] != (self.cfg.resolution,) * 3:
            raise ValueError(f"input has shape {x.shape[2:]}, model expects {self.cfg.resolution}^3")
        return _to_tokens(self.input_encoder(x))

    def encode_priors(self, pool: PriorPool) -> Tensor:
        if pool.resolution != self.cfg.resolution:
            raise ValueError("prior resolution does not match the model")
        # keys and values share the sorted category order, so the output ignores pool insertion order
        feats = _to_tokens(self.prior_encoder(pool.stacked(pool.canonical_order())))
        return diff.reshape(feats, (-1, self.cfg.d))

    def __call__(self, S, pool: PriorPool, return_weights=False):
        q = self.encode_input(S)
        keys = self.encode_priors(pool)
        w = attention(q, keys)
        out = reconstruct_patches(w, chunk_values(pool, self.R, pool.canonical_order()), self.cfg.resolution)
        return (out, w) if return_weights else out


stage1_forward = PatchPriorModel.__call__


class MultiResModel(Module):
    """Fuses frozen single-resolution models: per-resolution attention over keys, then a deconv decoder."""

    def __init__(self, models: dict, pools: dict, cfg: ModelConfig, seed: int = 0, mode: str = "attention"):
        super().__init__("s2")
        if mode not in ("attention", "mean"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.models = models
        self.pools = pools
        self.order = sorted(models, reverse=True)  # coarse (few patches) to fine
        rng = np.random.default_rng(seed + 7919)
        d, D = cfg.d, cfg.resolution
        self.post = {}
        for R in self.order:
            w = self.param(f"post{R}/w", rng.normal(0, math.sqrt(2.0 / (2 * d)), size=(2 * d, 2 * d)))
            b = self.param(f"post{R}/b", np.zeros(2 * d))
            self.post[R] = (w, b)
        self.ups = []
        c_in = 2 * d
        for i, (Ra, Rb) in enumerate(zip(self.order[:-1], self.order[1:])):
            f = Ra // Rb
            c_out = d
            self.ups.append(self._up_block(f"up{i}", c_in, c_out, f, rng))
            c_in = c_out + 2 * d
        cf = cfg.decoder_channels
        self.final_up = self._up_block("upf", c_in, cf, self.order[-1], rng)
        self.out_w = self.param("out/w", _conv_init(rng, 1, cf, 3) * 0.5)
        self.out_b = self.param("out/b", np.zeros(1))
        self._key_cache = {}

    def _up_block(self, name, c_in, c_out, factor, rng):
        w = self.param(f"{name}/w", rng.normal(0, math.sqrt(2.0 / c_in), size=(c_in, c_out, factor, factor, factor)))
        b = self.param(f"{name}/b", np.zeros(c_out))
        if self.cfg.norm == "group":
            g = self.param(f"{name}/norm/g", np.ones(c_out))
            be = self.param(f"{name}/norm/b", np.zeros(c_out))
        else:
            g = be = None
        return (w, b, g, be, factor, _groups(self.cfg.norm_groups, c_out))

    @staticmethod
    def _apply_up(block, h):
        w, b, g, be, factor, groups = block
        h = diff.conv3d_transpose(h, w, b, stride=factor)
        if g is not None:
            h = diff.group_norm(h, g, be, groups)
        return diff.relu(h)

    # parameter groups ----------------------------------------------------------

    def stage1_parameters(self):
        out = []
        for R in self.order:
            out += self.models[R].parameters() + self.pools[R].tensors()
        return out

    def input_encoder_parameters(self):
        return [p for R in self.order for p in self.models[R].input_encoder.parameters()]

    def frozen_snapshot(self):
        return {id(p): p.data.tobytes() for p in self.stage1_parameters()}

    def keys(self, R) -> Tensor:
        """Prior keys for resolution R; cached while the prior side is frozen."""
        model, pool = self.models[R], self.pools[R]
        fixed = pool.frozen and not any(p.requires_grad for p in model.prior_encoder.parameters())
        if fixed and R in self._key_cache:
            return self._key_cache[R]
        k = model.encode_priors(pool)
        if fixed:
            self._key_cache[R] = k
        return k

    def clear_cache(self):
        self._key_cache.clear()

    def features(self, S, R, force_zero_attention=False) -> Tensor:
        """O^R as tokens (B, N^3, 2d): concat of the input feature and its attention readout over keys."""
        model = self.models[R]
        q = model.encode_input(S)
        keys = self.keys(R)
        if force_zero_attention:
            read = Tensor(np.zeros(q.shape, dtype=q.dtype))
        elif self.mode == "mean":
            read = diff.add(diff.mul(q, 0.0), diff.mean(keys, axis=0))
        else:
            read = diff.matmul(attention(q, keys), keys)
        return diff.concat([q, read], axis=-1)

    def level(self, S, R) -> Tensor:
        tokens = self.features(S, R)
        w, b = self.post[R]
        h = diff.relu(diff.add(diff.matmul(tokens, w), b))
        return _to_volume(h, self.cfg.resolution // R)

    def __call__(self, S, return_levels=False) -> Tensor:
        levels = {R: self.level(S, R) for R in self.order}
        h = levels[self.order[0]]
        for block, R in zip(self.ups, self.order[1:]):
            h = diff.concat([self._apply_up(block, h), levels[R]], axis=1)
        h = self._apply_up(self.final_up, h)
        h = diff.conv3d(h, self.out_w, self.out_b, padding=1)
        t = self.cfg.truncation
        out = diff.mul(diff.tanh(h), t)
        B = out.shape[0]
        out = diff.reshape(out, (B,) + out.shape[2:])
        return (out, levels) if return_levels else out


stage2_forward = MultiResModel.__call__
