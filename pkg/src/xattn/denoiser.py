"""Spatio-temporal transformer noise predictor with recordable cross-attention.

The network patch-embeds every frame, then runs a U-shaped sequence of
attention stages. Each stage applies, with residual connections:

    spatial self-attention  (within a frame)
    cross-attention         (cells -> prompt tokens, single head, recorded)
    temporal attention      (across frames, fixed cell)
    pointwise feed-forward

Down stages push a skip connection, up stages pop one. Between stages the
feature grid is 2x2 average-pooled or nearest-upsampled as needed.

Latent layout is ``frames x channels x height x width``; a leading batch axis
is optional everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import toyworld
from .engine import (
    Tensor,
    expand,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    permute,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    take_rows,
)

Params = dict[str, Tensor]
GROUPS = ("down", "mid", "up")


@dataclass(frozen=True)
class Stage:
    group: str
    resolution: int


DEFAULT_LAYOUT = (
    Stage("down", 16),
    Stage("down", 8),
    Stage("mid", 8),
    Stage("mid", 8),
    Stage("up", 8),
    Stage("up", 16),
)


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    model_width: int = 64
    head_count: int = 2
    block_layout: tuple[Stage, ...] = DEFAULT_LAYOUT
    vocab_size: int = len(toyworld.VOCAB)
    token_capacity: int = 8
    time_steps: int = 1000
    ffn_mult: int = 2
    # 1: eps = g(t) * z_t + c(t) * head output, with learned time gates g, c in (0, 1)
    skip_gate: int = 0

    def __post_init__(self):
        layout = tuple(s if isinstance(s, Stage) else Stage(*s) for s in self.block_layout)
        object.__setattr__(self, "block_layout", layout)

    @property
    def patch(self) -> int:
        return self.height // self.block_layout[0].resolution

    def validate(self) -> None:
        layout = self.block_layout
        if not layout:
            raise ValueError("block_layout is empty")
        if self.height != self.width:
            raise ValueError("only square latents are supported")
        if self.model_width % self.head_count:
            raise ValueError("model_width must be divisible by head_count")
        if not any(s.group == "mid" for s in layout):
            raise ValueError("block_layout needs at least one mid stage")
        order = {"down": 0, "mid": 1, "up": 2}
        ranks = [order.get(s.group, -1) for s in layout]
        if -1 in ranks:
            bad = [s.group for s in layout if s.group not in order]
            raise ValueError(f"unknown block group(s) {bad}")
        if ranks != sorted(ranks):
            raise ValueError("block_layout must list down, then mid, then up stages")
        for s in layout:
            if self.height % s.resolution or self.width % s.resolution:
                raise ValueError(f"resolution {s.resolution} does not divide {self.height}x{self.width}")
        for a, b in zip(layout, layout[1:]):
            if b.resolution not in (a.resolution, a.resolution * 2, a.resolution // 2):
                raise ValueError(f"stage resolutions {a.resolution}->{b.resolution} differ by more than 2x")
        downs = [s.resolution for s in layout if s.group == "down"]
        ups = [s.resolution for s in layout if s.group == "up"]
        if list(reversed(downs)) != ups:
            raise ValueError(f"up stages {ups} must mirror down stages {downs} for skip connections")
        first = layout[0].resolution
        if layout[-1].resolution not in (first, first * 2, first // 2):
            raise ValueError("last stage must be within 2x of the patch grid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layout"] = [f"{s.group}:{s.resolution}" for s in self.block_layout]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DenoiserConfig":
        d = dict(d)
        layout = d.pop("block_layout", None)
        if layout is not None:
            stages = []
            for item in layout:
                if isinstance(item, str):
                    g, r = item.split(":")
                    stages.append(Stage(g, int(r)))
                else:
                    stages.append(Stage(*item))
            d["block_layout"] = tuple(stages)
        return cls(**{k: (int(v) if k != "block_layout" else v) for k, v in d.items()})


@dataclass(frozen=True)
class LayerKey:
    index: int
    group: str
    resolution: int


@dataclass
class AttentionRecordSet:
    """Softmax cross-attention probabilities per layer.

    ``maps[key]`` has shape ``[b,] f x H x W x L`` where ``L`` is the token
    capacity; values along the last axis sum to one.
    """

    t: int
    maps: dict[LayerKey, Tensor] = field(default_factory=dict)

    def keys(self) -> list[LayerKey]:
        return list(self.maps)

    def detached(self) -> "AttentionRecordSet":
        return AttentionRecordSet(self.t, {k: v.detach() for k, v in self.maps.items()})

    def __len__(self) -> int:
        return len(self.maps)


# ---------------------------------------------------------------- params
def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d), f"{prefix}.wv": (d, d),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


def param_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    d = config.model_width
    c, p = config.channels, config.patch
    r0 = config.block_layout[0].resolution
    hidden = d * config.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, d),
        "embed.patch_w": (p * p * c, d),
        "embed.patch_b": (d,),
        "embed.pos": (r0, r0, d),
        "embed.frame": (config.frames, d),
        "time.w1": (d, d),
        "time.b1": (d,),
    }
    for i, _ in enumerate(config.block_layout):
        s = f"stage{i}"
        shapes[f"{s}.time_w"] = (d, d)
        shapes[f"{s}.time_b"] = (d,)
        for ln in ("ln_s", "ln_x", "ln_t", "ln_f"):
            shapes[f"{s}.{ln}.g"] = (d,)
            shapes[f"{s}.{ln}.b"] = (d,)
        shapes.update(_attention_shapes(f"{s}.self", d))
        shapes.update(_attention_shapes(f"{s}.cross", d))
        shapes.update(_attention_shapes(f"{s}.temporal", d))
        shapes[f"{s}.ffn.w1"] = (d, hidden)
        shapes[f"{s}.ffn.b1"] = (hidden,)
        shapes[f"{s}.ffn.w2"] = (hidden, d)
        shapes[f"{s}.ffn.b2"] = (d,)
    shapes["out.ln.g"] = (d,)
    shapes["out.ln.b"] = (d,)
    shapes["out.w"] = (d, p * p * c)
    shapes["out.b"] = (p * p * c,)
    if config.skip_gate:
        shapes["out.gate_w"] = (d, 2)
        shapes["out.gate_b"] = (2,)
    return shapes


def init_params(config: DenoiserConfig, seed: int, dtype=np.float32) -> Params:
    config.validate()
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif name.startswith("embed.") and name != "embed.patch_w":
            arr = rng.normal(0.0, 0.5, size=shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if leaf in ("wo", "w2") or name == "out.w":
                std *= 0.5
            elif name == "out.gate_w":
                std = 0.0
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def param_count(params: Params) -> int:
    return sum(t.size for t in params.values())


def params_astype(params: Params, dtype, requires_grad: bool = True) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=requires_grad) for k, v in params.items()}


def frozen(params: Params) -> Params:
    """Same values, no gradient tracking (sampling and guidance)."""
    return {k: Tensor(v.data) for k, v in params.items()}


# ------------------------------------------------------------- conditioning
def pad_tokens(token_ids, capacity: int, vocab_size: int) -> np.ndarray:
    ids = [int(i) for i in token_ids]
    if len(ids) > capacity:
        raise ValueError(f"prompt has {len(ids)} tokens, capacity is {capacity}")
    for i in ids:
        if not 0 <= i < vocab_size:
            raise ValueError(f"token id {i} is outside the vocabulary (size {vocab_size})")
    return np.array(ids + [toyworld.PAD_ID] * (capacity - len(ids)), dtype=np.int64)


def embed_prompt(params: Params, token_ids, config: DenoiserConfig) -> Tensor:
    """Token embeddings ``[b,] L x d``; PAD positions use the learned PAD row."""
    arr = np.asarray(token_ids, dtype=object)
    if arr.ndim == 2 or (arr.ndim == 1 and arr.size and isinstance(arr[0], (list, tuple, np.ndarray))):
        ids = np.stack([pad_tokens(row, config.token_capacity, config.vocab_size) for row in token_ids])
    else:
        ids = pad_tokens(list(token_ids), config.token_capacity, config.vocab_size)
    return take_rows(params["embed.token"], ids)


def timestep_features(t: np.ndarray, d: int, dtype) -> np.ndarray:
    """Fixed sinusoidal features of the integer step index."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


# ------------------------------------------------------------------ layers
def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y + b if b is not None else y


def _heads_attention(h: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention over axis -2 of ``h`` (shape B x N x d)."""
    B, N, d = h.shape
    dh = d // heads

    def split(x):
        return permute(reshape(x, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(h, params[f"{prefix}.wq"]))
    k = split(matmul(h, params[f"{prefix}.wk"]))
    v = split(matmul(h, params[f"{prefix}.wv"]))
    scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = matmul(softmax_lastdim(scores), v)
    out = reshape(permute(out, (0, 2, 1, 3)), (B, N, d))
    return _linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ln(x: Tensor, params: Params, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _pool(x: Tensor) -> Tensor:
    b, f, H, W, d = x.shape
    return reshape(x, (b, f, H // 2, 2, W // 2, 2, d)).mean(axes=(3, 5))


def _upsample(x: Tensor) -> Tensor:
    b, f, H, W, d = x.shape
    y = expand(reshape(x, (b, f, H, 1, W, 1, d)), (b, f, H, 2, W, 2, d))
    return reshape(y, (b, f, 2 * H, 2 * W, d))


def _resample(x: Tensor, res: int) -> Tensor:
    cur = x.shape[2]
    if res == cur:
        return x
    if res == cur // 2:
        return _pool(x)
    if res == cur * 2:
        return _upsample(x)
    raise ValueError(f"cannot resample {cur} -> {res}")


class _Injection:
    """Per-layer attention overwrite used by forward guidance."""

    def __init__(self, maps: Mapping[LayerKey, Tensor], mapping: Mapping[int, int], capacity: int):
        self.maps = maps
        self.mapping = dict(mapping)
        for src, dst in self.mapping.items():
            if not (0 <= src < capacity and 0 <= dst < capacity):
                raise ValueError(f"token mapping {src}->{dst} outside capacity {capacity}")

    def apply(self, key: LayerKey, probs: Tensor) -> Tensor:
        inj = self.maps.get(key)
        if inj is None or not self.mapping:
            return probs
        values = np.array(probs.data, copy=True)
        src = list(self.mapping)
        dst = [self.mapping[s] for s in src]
        inj_arr = np.broadcast_to(inj.data, probs.shape[:-1] + (inj.shape[-1],))
        values[..., src] = inj_arr[..., dst]
        mask = np.zeros(probs.shape[-1], dtype=bool)
        mask[src] = True
        return masked_fill(probs, mask, values)


def _spatial(x: Tensor, params: Params, s: str, heads: int) -> Tensor:
    """Self-attention among the cells of each frame (residual branch only)."""
    b, f, H, W, d = x.shape
    h = reshape(_ln(x, params, f"{s}.ln_s"), (b * f, H * W, d))
    return reshape(_heads_attention(h, params, f"{s}.self", heads), (b, f, H, W, d))


def _temporal(x: Tensor, params: Params, s: str, heads: int) -> Tensor:
    """Self-attention across frames at each cell (residual branch only)."""
    b, f, H, W, d = x.shape
    h = _ln(x, params, f"{s}.ln_t")
    h = reshape(permute(h, (0, 2, 3, 1, 4)), (b * H * W, f, d))
    out = reshape(_heads_attention(h, params, f"{s}.temporal", heads), (b, H, W, f, d))
    return permute(out, (0, 3, 1, 2, 4))


def _cross(x: Tensor, ctx: Tensor, params: Params, s: str, key: LayerKey, records: dict,
           injection: _Injection | None) -> Tensor:
    """Every cell attends over the prompt tokens; the probabilities are recorded."""
    b, f, H, W, d = x.shape
    h = reshape(_ln(x, params, f"{s}.ln_x"), (b, f * H * W, d))
    q = matmul(h, params[f"{s}.cross.wq"])
    k = matmul(ctx, params[f"{s}.cross.wk"])
    v = matmul(ctx, params[f"{s}.cross.wv"])
    probs = softmax_lastdim(scale(matmul(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(d)))
    L = ctx.shape[1]
    records[key] = reshape(probs, (b, f, H, W, L))
    if injection is not None:
        probs = reshape(injection.apply(key, records[key]), (b, f * H * W, L))
    out = _linear(matmul(probs, v), params[f"{s}.cross.wo"], params[f"{s}.cross.bo"])
    return reshape(out, (b, f, H, W, d))


def _stage(x: Tensor, ctx: Tensor, temb: Tensor, params: Params, i: int, key: LayerKey,
           config: DenoiserConfig, records: dict, injection: _Injection | None) -> Tensor:
    s = f"stage{i}"
    d = x.shape[-1]
    heads = config.head_count
    step = _linear(temb, params[f"{s}.time_w"], params[f"{s}.time_b"])
    x = x + reshape(step, (x.shape[0], 1, 1, 1, d))
    x = x + _spatial(x, params, s, heads)
    x = x + _cross(x, ctx, params, s, key, records, injection)
    x = x + _temporal(x, params, s, heads)
    h = _ln(x, params, f"{s}.ln_f")
    h = gelu(_linear(h, params[f"{s}.ffn.w1"], params[f"{s}.ffn.b1"]))
    return x + _linear(h, params[f"{s}.ffn.w2"], params[f"{s}.ffn.b2"])


def layer_keys(config: DenoiserConfig) -> list[LayerKey]:
    return [LayerKey(i, s.group, s.resolution) for i, s in enumerate(config.block_layout)]


def _run(params: Params, z_t, t, condition: Tensor, config: DenoiserConfig,
         injection: _Injection | None):
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t))
    expected = (config.frames, config.channels, config.height, config.width)
    batched = z.ndim == 5
    if z.shape[-4:] != expected or z.ndim not in (4, 5):
        raise ValueError(f"latent shape {z.shape} does not match config {expected}")
    if not batched:
        z = reshape(z, (1,) + expected)
    b = z.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,))
    if np.any(t_arr < 0) or np.any(t_arr >= config.time_steps):
        raise ValueError(f"time step {t} outside [0, {config.time_steps})")
    ctx = condition
    if ctx.ndim == 2:
        ctx = expand(reshape(ctx, (1,) + ctx.shape), (b,) + ctx.shape)
    if ctx.shape[0] != b:
        raise ValueError(f"condition batch {ctx.shape[0]} does not match latent batch {b}")

    f, c, hgt, wid = expected
    p = config.patch
    r0 = config.block_layout[0].resolution
    d = config.model_width

    x = reshape(z, (b, f, c, r0, p, r0, p))
    x = reshape(permute(x, (0, 1, 3, 5, 4, 6, 2)), (b, f, r0, r0, p * p * c))
    x = _linear(x, params["embed.patch_w"], params["embed.patch_b"])
    x = x + params["embed.pos"]
    x = x + reshape(params["embed.frame"], (1, f, 1, 1, d))

    feats = Tensor(timestep_features(t_arr, d, z.dtype))
    temb = gelu(_linear(feats, params["time.w1"], params["time.b1"]))

    records: dict[LayerKey, Tensor] = {}
    skips: list[Tensor] = []
    for key in layer_keys(config):
        x = _resample(x, key.resolution)
        if key.group == "up":
            x = x + skips.pop()
        x = _stage(x, ctx, temb, params, key.index, key, config, records, injection)
        if key.group == "down":
            skips.append(x)
    x = _resample(x, r0)
    x = _linear(_ln(x, params, "out.ln"), params["out.w"], params["out.b"])
    x = permute(reshape(x, (b, f, r0, r0, p, p, c)), (0, 1, 6, 2, 4, 3, 5))
    eps = reshape(x, (b, f, c, hgt, wid))
    if config.skip_gate:
        # at high noise eps is close to z_t: g carries that part and c scales the
        # small residual, so the head sees a unit-scale target at every t
        gates = sigmoid(_linear(temb, params["out.gate_w"], params["out.gate_b"]))
        g = reshape(gates[:, 0], (b, 1, 1, 1, 1))
        c = reshape(gates[:, 1], (b, 1, 1, 1, 1))
        eps = c * eps + g * z
    if not batched:
        eps = reshape(eps, expected)
        records = {k: reshape(v, v.shape[1:]) for k, v in records.items()}
    t_rec = int(t_arr[0]) if b else 0
    return eps, AttentionRecordSet(t_rec, records)


def forward(params: Params, z_t, t, condition: Tensor, config: DenoiserConfig):
    """Predict the noise in ``z_t``; returns ``(epsilon_pred, records)``."""
    return _run(params, z_t, t, condition, config, None)


def forward_with_swap(params: Params, z_t, t, condition: Tensor, config: DenoiserConfig,
                      injected: AttentionRecordSet, token_mapping: Mapping[int, int]) -> Tensor:
    """Forward pass with selected attention columns overwritten.

    At every layer present in ``injected``, column ``src`` of the attention
    probabilities is replaced by column ``token_mapping[src]`` of the injected
    map before the values are aggregated.
    """
    known = {k: k for k in layer_keys(config)}
    f = config.frames
    for key, m in injected.maps.items():
        if key.index not in {k.index for k in known}:
            raise ValueError(f"injected layer {key.index} does not exist")
        mine = next(k for k in known if k.index == key.index)
        if key.resolution != mine.resolution or m.shape[-3:-1] != (mine.resolution, mine.resolution):
            raise ValueError(
                f"injected map for layer {key.index} has resolution {m.shape[-3:-1]}, "
                f"layer expects {mine.resolution}x{mine.resolution}"
            )
        if m.shape[-4] != f:
            raise ValueError(f"injected map for layer {key.index} has {m.shape[-4]} frames, expected {f}")
    injection = _Injection({k: v for k, v in injected.maps.items()}, token_mapping, config.token_capacity)
    eps, _ = _run(params, z_t, t, condition, config, injection)
    return eps
