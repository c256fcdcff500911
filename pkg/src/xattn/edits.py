"""Guided-versus-control edit runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import guidance as gd
from . import metrics as mt
from . import targets as tg


@dataclass
class EditOutcome:
    spec: tg.TrajectorySpec
    track: tg.TargetTrack
    guided: gd.GuidedResult
    control: gd.GuidedResult
    guided_report: mt.MetricsReport
    control_report: mt.MetricsReport

    @property
    def iou_gain(self) -> float:
        return self.guided_report.mean_iou - self.control_report.mean_iou


def target_masks_by_layer(track: tg.TargetTrack, keys) -> dict:
    return {k: tg.resample_to_layer(track, k.resolution, k.resolution) for k in keys}


def attention_masks(attention: dict, resolution: int) -> np.ndarray:
    """Consensus footprint (``f x R x R``) of recorded token maps.

    Each layer's maps are thresholded at the min/max midpoint, averaged over
    the recorded steps, upsampled to ``resolution`` and averaged over layers;
    cells at or above one half are kept.
    """
    per_layer = []
    for key in next(iter(attention.values())):
        votes = np.mean([mt.thresholded(np.asarray(maps[key])) for maps in attention.values()], axis=0)
        rep = resolution // key.resolution
        per_layer.append(np.repeat(np.repeat(votes, rep, axis=-2), rep, axis=-1))
    return (np.mean(per_layer, axis=0) >= 0.5).astype(np.float32)


def fit_boxes(video: np.ndarray | None = None, masks: np.ndarray | None = None) -> list[tg.Box]:
    """Per-frame bounding boxes of the object (from pixels) or of given masks.

    Frames without a detection take the nearest detected frame's box.
    """
    if masks is not None:
        found = [tg.mask_bbox(m) for m in masks]
    else:
        found = [fo.bbox for fo in mt.classify_video(video).frames]
    idx = [i for i, b in enumerate(found) if b is not None]
    if not idx:
        raise ValueError("nothing detected in any frame; cannot fit a track")
    return [found[min(idx, key=lambda j: abs(j - i))] if b is None else b for i, b in enumerate(found)]


def fitted_spec(spec: tg.TrajectorySpec, boxes: list[tg.Box]) -> tg.TrajectorySpec:
    """``spec`` with one keyframe per frame taken from ``boxes``."""
    keyframes = [tg.KeyframeBox(i + 1, b) for i, b in enumerate(boxes)]
    return replace(spec, keyframes=keyframes, frame_count=len(keyframes))


def run_edit(params, model_config: dn.DenoiserConfig, spec: tg.TrajectorySpec,
             config: gd.GuidanceConfig, seed: int, n_steps: int,
             schedule: df.NoiseSchedule, fit_source: str = "attention") -> EditOutcome:
    """Guided sample plus the eta = 0 control from the same seed.

    A spec without keyframes (resize only) is first fitted to the control
    run: to its thresholded token attention (``fit_source="attention"``) or
    to the object's pixels (``"pixels"``).
    """
    if fit_source not in ("attention", "pixels"):
        raise ValueError(f"fit_source must be 'attention' or 'pixels', got {fit_source!r}")
    if spec.frame_count != model_config.frames:
        raise ValueError(f"spec has {spec.frame_count} frames, model generates {model_config.frames}")
    if config.token_index != spec.token_index:
        config = gd.quiet_config(**{**config.__dict__, "token_index": spec.token_index})
    control_cfg = gd.quiet_config(**{**config.__dict__, "eta": 0.0})
    ids = spec.token_ids
    z_T = df.initial_latent(model_config, seed)
    keys = gd.selected_keys(dn.layer_keys(model_config), config)
    placeholder = {k: np.zeros((model_config.frames, k.resolution, k.resolution), np.float32) for k in keys}

    fitted = not spec.keyframes
    if not fitted:
        track = spec.build_track(model_config.height)
        control = gd.guided_sample(params, ids, track, n_steps, control_cfg, seed, schedule,
                                   model_config, z_T)
    else:
        control = gd.guided_sample(params, ids, placeholder, n_steps, control_cfg, seed, schedule,
                                   model_config, z_T)
        if fit_source == "attention":
            boxes = fit_boxes(masks=attention_masks(control.attention, model_config.height))
        else:
            boxes = fit_boxes(video=control.video)
        spec = fitted_spec(spec, boxes)
        track = spec.build_track(model_config.height)
    guided = gd.guided_sample(params, ids, track, n_steps, config, seed, schedule, model_config, z_T)

    masks = target_masks_by_layer(track, keys)
    reports = []
    for res in (guided, control):
        per_frame = mt.attention_iou(res.attention, masks)
        reports.append(mt.build_report(res.video, track.boxes, res.trace.entries, per_frame))
    if fitted:
        # the control energies were scored against a placeholder, not the track
        reports[1].energy_first = reports[1].energy_last = reports[1].energy_mean_drop = None
    return EditOutcome(spec, track, guided, control, reports[0], reports[1])
