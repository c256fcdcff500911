"""Cross-attention guidance: soft thresholding, energy, latent updates.

Backward guidance moves the sampler's latent down the gradient of an energy
comparing the soft-thresholded cross-attention of one token with target
masks::

    z_t <- z_t - delta_t**2 * eta * grad_z sum(E)

Forward guidance instead overwrites the token's attention column with the
maps produced under a second prompt.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import toyworld
from .engine import (
    Tensor,
    backward,
    mul,
    no_grad,
    reduce_max,
    reduce_min,
    reduce_sum,
    scale,
    sigmoid,
    square,
    sub,
)
from .targets import TargetTrack, resample_to_layer

ENERGY_FORMS = ("squared_difference", "signed_difference")
DEGENERATE_RANGE = 1e-8


class GuidanceScaleWarning(UserWarning):
    pass


@dataclass
class GuidanceConfig:
    eta: float = 20.0
    eta_range_hint: tuple[float, float] = (15.0, 25.0)
    selected_resolutions: frozenset[int] = frozenset({8, 16})
    selected_block_groups: frozenset[str] = frozenset({"down", "mid", "up"})
    token_index: int = 0
    sharpness: float = 10.0
    energy_form: str = "squared_difference"
    allow_no_mid: bool = False
    # 0: the sparse phase updates on the first step after the dense phase
    sparse_offset: int = 0
    cumulative_alpha: bool = True
    layer_weights: Mapping[int, float] | None = None

    def __post_init__(self):
        self.selected_resolutions = frozenset(int(r) for r in self.selected_resolutions)
        self.selected_block_groups = frozenset(self.selected_block_groups)
        self.validate()

    def validate(self) -> None:
        if self.eta < 0 or not math.isfinite(self.eta):
            raise ValueError(f"eta must be a non-negative finite number, got {self.eta}")
        if not self.selected_resolutions:
            raise ValueError("selected_resolutions is empty")
        if not self.selected_block_groups:
            raise ValueError("selected_block_groups is empty")
        unknown = self.selected_block_groups - set(dn.GROUPS)
        if unknown:
            raise ValueError(f"unknown block groups {sorted(unknown)}")
        if "mid" not in self.selected_block_groups and not self.allow_no_mid:
            raise ValueError("excluding the mid block needs allow_no_mid=True")
        if self.energy_form not in ENERGY_FORMS:
            raise ValueError(f"energy_form must be one of {ENERGY_FORMS}")
        if self.sparse_offset not in (0, 1):
            raise ValueError("sparse_offset must be 0 or 1")
        lo, hi = self.eta_range_hint
        if not lo < self.eta < hi:
            warnings.warn(f"eta={self.eta} is outside the recommended range ({lo}, {hi})",
                          GuidanceScaleWarning, stacklevel=4)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "selected_resolutions": sorted(self.selected_resolutions),
            "selected_block_groups": sorted(self.selected_block_groups),
            "token_index": self.token_index,
            "sharpness": self.sharpness,
            "energy_form": self.energy_form,
            "allow_no_mid": self.allow_no_mid,
            "sparse_offset": self.sparse_offset,
            "cumulative_alpha": self.cumulative_alpha,
        }


def quiet_config(**kwargs) -> GuidanceConfig:
    """Build a config without the out-of-range eta warning."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GuidanceScaleWarning)
        return GuidanceConfig(**kwargs)


# -------------------------------------------------------------- selection
def selected_keys(layer_keys, config: GuidanceConfig) -> list[dn.LayerKey]:
    return [k for k in layer_keys
            if k.resolution in config.selected_resolutions and k.group in config.selected_block_groups]


def select_attention(records: dn.AttentionRecordSet, config: GuidanceConfig) -> dict[dn.LayerKey, Tensor]:
    """Token column ``config.token_index`` of every selected layer (``[b,] f x H x W``)."""
    keys = selected_keys(records.keys(), config)
    if not keys:
        available = ", ".join(f"{k.group}@{k.resolution}" for k in records.keys())
        raise ValueError(f"no recorded layer matches the selection; available: {available}")
    out = {}
    for k in keys:
        m = records.maps[k]
        L = m.shape[-1]
        if not 0 <= config.token_index < L:
            raise ValueError(f"token index {config.token_index} outside [0, {L})")
        out[k] = m[..., config.token_index]
    return out


# ------------------------------------------------------------ shape / energy
def soft_threshold(attn: Tensor, sharpness: float = 10.0) -> Tensor:
    """``sigmoid(s * (norm(A) - 0.5))`` with per-map min-max normalisation.

    Normalisation runs over the last two (spatial) axes, independently for
    every leading index (frame, batch). The min/max statistics are constants
    under differentiation. Maps whose range is below 1e-8 map to all zeros.
    """
    if not isinstance(attn, Tensor):
        attn = Tensor(np.asarray(attn))
    lo = reduce_min(attn, axes=(-2, -1), keepdims=True)
    hi = reduce_max(attn, axes=(-2, -1), keepdims=True)
    rng = hi.data - lo.data
    live = rng >= DEGENERATE_RANGE
    inv = np.where(live, 1.0 / np.where(live, rng, 1.0), 0.0).astype(attn.dtype)
    norm = mul(sub(attn, lo), Tensor(inv))
    out = sigmoid(scale(sub(norm, 0.5), sharpness))
    return mul(out, Tensor(live.astype(attn.dtype)))


def shape_maps(maps: Mapping[dn.LayerKey, Tensor], sharpness: float) -> dict[dn.LayerKey, Tensor]:
    return {k: soft_threshold(v, sharpness) for k, v in maps.items()}


def energy(shape_tar: Mapping, shape_orig: Mapping, energy_form: str = "squared_difference",
           weights: Mapping[int, float] | None = None) -> Tensor:
    """Sum over layers, frames and cells of the target/current mismatch."""
    if energy_form not in ENERGY_FORMS:
        raise ValueError(f"unknown energy form {energy_form!r}")
    if set(shape_tar) != set(shape_orig):
        raise ValueError(f"layer sets differ: {sorted(map(str, shape_tar))} vs {sorted(map(str, shape_orig))}")
    total = None
    for key in shape_orig:
        cur = shape_orig[key]
        tar = shape_tar[key]
        tar_t = tar if isinstance(tar, Tensor) else Tensor(np.asarray(tar, dtype=cur.dtype))
        if tar_t.shape != cur.shape:
            raise ValueError(f"layer {key}: target shape {tar_t.shape} != current {cur.shape}")
        diff = sub(tar_t, cur)
        term = reduce_sum(square(diff) if energy_form == "squared_difference" else diff)
        if weights is not None:
            term = scale(term, weights.get(getattr(key, "index", key), 1.0))
        total = term if total is None else total + term
    if total is None:
        raise ValueError("energy over an empty layer set")
    return total


def target_shapes(track: TargetTrack | Mapping, keys, sharpness: float, dtype=np.float32) -> dict:
    """Thresholded target masks at each selected layer's resolution."""
    out = {}
    for k in keys:
        if isinstance(track, TargetTrack):
            masks = resample_to_layer(track, k.resolution, k.resolution)
        else:
            if k not in track:
                raise ValueError(f"no target masks for layer {k}")
            masks = np.asarray(track[k])
        out[k] = soft_threshold(Tensor(masks.astype(dtype)), sharpness).data
    return out


# --------------------------------------------------------------- update
@dataclass
class UpdateResult:
    z: np.ndarray
    energy: float
    grad: np.ndarray
    maps: dict


def guidance_energy(params, z: Tensor, t: int, condition: Tensor, config: GuidanceConfig,
                    model_config, shapes_tar: Mapping):
    """Forward pass with recording, then the energy of the selected maps."""
    _, records = dn.forward(params, z, t - 1, condition, model_config)
    maps = select_attention(records, config)
    missing = set(maps) - set(shapes_tar)
    if missing:
        raise ValueError(f"targets missing for layers {sorted(k.index for k in missing)}")
    cur = shape_maps(maps, config.sharpness)
    e = energy({k: shapes_tar[k] for k in cur}, cur, config.energy_form, config.layer_weights)
    return e, maps


def backward_update(z_t: np.ndarray, t: int, params, condition: Tensor, shapes_tar: Mapping,
                    schedule: df.NoiseSchedule, config: GuidanceConfig, model_config) -> UpdateResult:
    """One guidance step: ``z - delta_t^2 * eta * dE/dz`` (result detached)."""
    z = Tensor(np.array(z_t, copy=True), requires_grad=True)
    e, maps = guidance_energy(params, z, t, condition, config, model_config, shapes_tar)
    if e.requires_grad and config.eta != 0:
        backward(e)
    grad = z.grad if z.grad is not None else np.zeros_like(z.data)
    d = df.delta_t(schedule, t, cumulative=config.cumulative_alpha)
    step = (d * d * config.eta) * grad
    new = (z_t - step.astype(z_t.dtype, copy=False)).astype(z_t.dtype, copy=False)
    return UpdateResult(new, e.item(), grad, {k: v.data.copy() for k, v in maps.items()})


def update_steps(n: int, sparse_offset: int = 0) -> list[int]:
    """1-based sampler steps that receive a guidance update.

    Every one of the first ``n // 4`` steps, then every other step.
    """
    if n < 4:
        raise ValueError("need at least 4 sampler steps")
    dense = n // 4
    return list(range(1, dense + 1)) + list(range(dense + 1 + sparse_offset, n + 1, 2))


@dataclass
class EnergyTrace:
    entries: list[tuple[int, float, float]] = field(default_factory=list)

    def to_text(self) -> str:
        return "step,pre,post\n" + "".join(f"{s},{a!r},{b!r}\n" for s, a, b in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "EnergyTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if lines and lines[0].startswith("step"):
            lines = lines[1:]
        out = []
        for ln in lines:
            s, a, b = ln.split(",")
            out.append((int(s), float(a), float(b)))
        return cls(out)


@dataclass
class GuidedResult:
    latent: np.ndarray
    video: np.ndarray
    trace: EnergyTrace
    # per update step: selected-layer token maps before the update
    attention: dict[int, dict]
    steps: list[int]


def guided_sample(params, token_ids, track: TargetTrack | Mapping, n_steps: int,
                  config: GuidanceConfig, seed: int, schedule: df.NoiseSchedule, model_config,
                  z_T: np.ndarray | None = None) -> GuidedResult:
    """DDIM sampling with backward guidance on the scheduled steps."""
    params = dn.frozen(params)
    z = df.initial_latent(model_config, seed) if z_T is None else np.array(z_T, copy=True)
    cond = dn.embed_prompt(params, token_ids, model_config)
    keys = selected_keys(dn.layer_keys(model_config), config)
    if not keys:
        raise ValueError("guidance selection matches no layer of the model")
    shapes_tar = target_shapes(track, keys, config.sharpness, z.dtype)
    schedule_steps = set(update_steps(n_steps, config.sparse_offset))
    trace = EnergyTrace()
    attention: dict[int, dict] = {}
    for i, (t, t_prev) in enumerate(df.timestep_grid(schedule, n_steps), start=1):
        if i in schedule_steps:
            res = backward_update(z, t, params, cond, shapes_tar, schedule, config, model_config)
            z = res.z
            attention[i] = res.maps
            with no_grad():
                zt = Tensor(z)
                eps, records = dn.forward(params, zt, t - 1, cond, model_config)
                maps = select_attention(records, config)
                post = energy({k: shapes_tar[k] for k in maps}, shape_maps(maps, config.sharpness),
                              config.energy_form, config.layer_weights).item()
            trace.entries.append((i, res.energy, post))
            z = df.ddim_update(z, eps.data, t, t_prev, schedule)
        else:
            z = df.ddim_step(params, z, t, t_prev, cond, schedule, model_config)
    video = toyworld.from_latent(z, model_config.height, model_config.width)
    return GuidedResult(z, video, trace, attention, sorted(schedule_steps))


# ---------------------------------------------------------- forward guidance
def differing_positions(source_ids, target_ids) -> list[int]:
    if len(source_ids) != len(target_ids):
        raise ValueError(
            "forward guidance needs prompts of equal length that differ in exactly one token"
        )
    return [i for i, (a, b) in enumerate(zip(source_ids, target_ids)) if a != b]


@dataclass
class SwapResult:
    swapped: np.ndarray
    target: np.ndarray
    swapped_latent: np.ndarray
    target_latent: np.ndarray


def forward_guided_sample(params, source_ids, target_ids, n_steps: int, seed: int,
                          schedule: df.NoiseSchedule, model_config,
                          token_pair: tuple[int, int] | None = None,
                          z_T: np.ndarray | None = None) -> SwapResult:
    """Two DDIM chains from one initial latent; the target chain's attention
    for the paired token replaces the source chain's at every layer and step.

    The prompts must differ in exactly one position (identical prompts are
    accepted as the no-op case).
    """
    diff = differing_positions(list(source_ids), list(target_ids))
    if len(diff) > 1:
        raise ValueError(
            f"prompts differ in {len(diff)} tokens (positions {diff}); attention swapping "
            "only applies when source and target differ in exactly one token"
        )
    if token_pair is None:
        pos = diff[0] if diff else None
        token_pair = (pos, pos) if pos is not None else None
    mapping = {token_pair[0]: token_pair[1]} if token_pair is not None else {}
    params = dn.frozen(params)
    z0 = df.initial_latent(model_config, seed) if z_T is None else np.array(z_T, copy=True)
    z_src, z_tgt = z0.copy(), z0.copy()
    c_src = dn.embed_prompt(params, source_ids, model_config)
    c_tgt = dn.embed_prompt(params, target_ids, model_config)
    for t, t_prev in df.timestep_grid(schedule, n_steps):
        with no_grad():
            eps_t, records = dn.forward(params, Tensor(z_tgt), t - 1, c_tgt, model_config)
            eps_s = dn.forward_with_swap(params, Tensor(z_src), t - 1, c_src, model_config,
                                         records.detached(), mapping)
        z_tgt = df.ddim_update(z_tgt, eps_t.data, t, t_prev, schedule)
        z_src = df.ddim_update(z_src, eps_s.data, t, t_prev, schedule)
    h, w = model_config.height, model_config.width
    return SwapResult(toyworld.from_latent(z_src, h, w), toyworld.from_latent(z_tgt, h, w), z_src, z_tgt)
