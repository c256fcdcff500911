"""Target attention tracks: per-frame binary masks authored from boxes.

Boxes are normalized ``(x0, y0, x1, y1)`` with the origin at the top-left.
Frame indices in keyframes and spec files are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import toyworld

Box = tuple[float, float, float, float]

RESIZE_PRESETS = {"smaller": 0.5, "small": 0.7, "big": 1.4, "bigger": 1.8}


class TrajectorySpecError(ValueError):
    pass


def _check_box(box) -> Box:
    if len(box) != 4:
        raise ValueError(f"box needs 4 coordinates, got {len(box)}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ValueError(f"box {box} must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")
    return (x0, y0, x1, y1)


@dataclass(frozen=True)
class KeyframeBox:
    frame_index: int
    box: Box

    def __post_init__(self):
        if self.frame_index < 1:
            raise ValueError(f"frame index {self.frame_index} must be >= 1")
        object.__setattr__(self, "box", _check_box(self.box))


@dataclass
class TargetTrack:
    masks: np.ndarray                 # f x R x R, values in {0, 1}
    token_index: int
    boxes: list[Box | None]           # per frame; None where a raw mask was supplied
    keyframes: list[KeyframeBox] = field(default_factory=list)
    transform: str = "identity"

    @property
    def frames(self) -> int:
        return self.masks.shape[0]

    @property
    def resolution(self) -> int:
        return self.masks.shape[1]


def box_to_mask(box, H: int, W: int) -> np.ndarray:
    """Set every cell whose centre lies inside ``box`` (edges inclusive).

    A valid box never yields an empty mask: if it covers no cell centre, the
    cell containing the box centre is set.
    """
    x0, y0, x1, y1 = _check_box(box)
    cy = (np.arange(H) + 0.5) / H
    cx = (np.arange(W) + 0.5) / W
    mask = ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
    if not mask.any():
        i = min(int((y0 + y1) / 2 * H), H - 1)
        j = min(int((x0 + x1) / 2 * W), W - 1)
        mask[i, j] = True
    return mask.astype(np.float32)


def interpolate_boxes(keyframes: list[KeyframeBox], f: int) -> list[Box]:
    """Linearly interpolate box corners; frames outside the keyed range clamp."""
    if not keyframes:
        raise ValueError("at least one keyframe is required")
    idx = [k.frame_index for k in keyframes]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate keyframe indices in {idx}")
    if idx != sorted(idx):
        raise ValueError(f"keyframe indices must be strictly increasing, got {idx}")
    if idx[-1] > f:
        raise ValueError(f"keyframe index {idx[-1]} exceeds frame count {f}")
    corners = np.array([k.box for k in keyframes], dtype=np.float64)
    frames = np.arange(1, f + 1, dtype=np.float64)
    out = np.stack([np.interp(frames, idx, corners[:, c]) for c in range(4)], axis=1)
    return [tuple(float(v) for v in row) for row in out]


def interpolate_track(keyframes: list[KeyframeBox], f: int, resolution: int = 32,
                      token_index: int = 0) -> TargetTrack:
    boxes = interpolate_boxes(keyframes, f)
    masks = np.stack([box_to_mask(b, resolution, resolution) for b in boxes])
    return TargetTrack(masks, token_index, list(boxes), list(keyframes), "interpolate")


def scale_box(box: Box, factor: float) -> Box:
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) / 2 * factor, (y1 - y0) / 2 * factor
    nx0, ny0 = max(0.0, cx - hw), max(0.0, cy - hh)
    nx1, ny1 = min(1.0, cx + hw), min(1.0, cy + hh)
    return (nx0, ny0, nx1, ny1)


def mask_bbox(mask: np.ndarray) -> Box | None:
    """Tight normalized box around the set cells of a mask."""
    ys, xs = np.nonzero(mask > 0.5)
    if ys.size == 0:
        return None
    H, W = mask.shape
    return (xs.min() / W, ys.min() / H, (xs.max() + 1) / W, (ys.max() + 1) / H)


def resize_track(track: TargetTrack, factor: float) -> TargetTrack:
    if factor <= 0:
        raise ValueError("resize factor must be positive")
    if factor == 1.0:
        return replace(track, masks=track.masks.copy(), boxes=list(track.boxes))
    R = track.resolution
    boxes: list[Box | None] = []
    masks = []
    for i in range(track.frames):
        box = track.boxes[i] if track.boxes[i] is not None else mask_bbox(track.masks[i])
        if box is None:
            boxes.append(None)
            masks.append(np.zeros((R, R), dtype=np.float32))
            continue
        nb = scale_box(box, factor)
        boxes.append(nb)
        masks.append(box_to_mask(nb, R, R))
    return TargetTrack(np.stack(masks), track.token_index, boxes, list(track.keyframes),
                       f"{track.transform}+resize({factor:g})")


def track_from_masks(masks: np.ndarray, token_index: int, as_boxes: bool = True) -> TargetTrack:
    """Track fitted to given per-frame masks (e.g. a thresholded recorded map).

    With ``as_boxes`` each frame is replaced by its bounding box so that the
    track can be resized or relocated.
    """
    masks = (np.asarray(masks) > 0.5).astype(np.float32)
    R = masks.shape[1]
    if not as_boxes:
        return TargetTrack(masks, token_index, [None] * len(masks), [], "mask")
    boxes = [mask_bbox(m) for m in masks]
    out = np.stack([box_to_mask(b, R, R) if b is not None else np.zeros((R, R), np.float32)
                    for b in boxes])
    return TargetTrack(out, token_index, boxes, [], "fit")


def translate_track(track: TargetTrack, dx: float, dy: float) -> TargetTrack:
    R = track.resolution
    boxes, masks = [], []
    for i in range(track.frames):
        box = track.boxes[i] if track.boxes[i] is not None else mask_bbox(track.masks[i])
        if box is None:
            boxes.append(None)
            masks.append(np.zeros((R, R), np.float32))
            continue
        w, h = box[2] - box[0], box[3] - box[1]
        x0 = float(np.clip(box[0] + dx, 0.0, 1.0 - w))
        y0 = float(np.clip(box[1] + dy, 0.0, 1.0 - h))
        nb = (x0, y0, x0 + w, y0 + h)
        boxes.append(nb)
        masks.append(box_to_mask(nb, R, R))
    return TargetTrack(np.stack(masks), track.token_index, boxes, list(track.keyframes),
                       f"{track.transform}+translate({dx:g},{dy:g})")


def resample_mask(mask: np.ndarray, H: int, W: int) -> np.ndarray:
    """Area-resample a binary mask to ``H x W`` and re-binarize at 0.5."""
    if H < 2 or W < 2:
        raise ValueError("target resolution must be at least 2")
    R, C = mask.shape
    if (R, C) == (H, W):
        return mask.astype(np.float32).copy()
    if R % H == 0 and C % W == 0:
        area = mask.reshape(H, R // H, W, C // W).mean(axis=(1, 3))
    elif H % R == 0 and W % C == 0:
        area = np.repeat(np.repeat(mask, H // R, axis=0), W // C, axis=1).astype(np.float64)
    else:
        raise ValueError(f"cannot resample {R}x{C} to {H}x{W}: sizes must be integer multiples")
    out = (area >= 0.5).astype(np.float32)
    if not out.any() and mask.any():
        out[np.unravel_index(np.argmax(area), area.shape)] = 1.0
    return out


def resample_to_layer(track: TargetTrack, H: int, W: int) -> np.ndarray:
    """Per-frame masks at one layer's resolution (``f x H x W``)."""
    return np.stack([resample_mask(m, H, W) for m in track.masks])


# ------------------------------------------------------------ spec documents
@dataclass
class TrajectorySpec:
    prompt: str
    token: str
    keyframes: list[KeyframeBox]
    frame_count: int = 8
    resize_factor: float | None = None
    overrides: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def token_ids(self) -> list[int]:
        return toyworld.tokenize(self.prompt)

    @property
    def token_index(self) -> int:
        words = self.prompt.split()
        if self.token not in words:
            raise TrajectorySpecError(f"token {self.token!r} does not occur in prompt {self.prompt!r}")
        return words.index(self.token)

    def build_track(self, resolution: int = 32) -> TargetTrack:
        if not self.keyframes:
            raise TrajectorySpecError("spec has no keyframes; fit boxes from a generated clip first")
        track = interpolate_track(self.keyframes, self.frame_count, resolution, self.token_index)
        if self.resize_factor is not None:
            track = resize_track(track, self.resize_factor)
        for frame, mask in self.overrides.items():
            track.masks[frame - 1] = resample_mask(mask, resolution, resolution)
            track.boxes[frame - 1] = None
        return track

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectorySpec):
            return NotImplemented
        return (
            self.prompt == other.prompt and self.token == other.token
            and self.keyframes == other.keyframes and self.frame_count == other.frame_count
            and self.resize_factor == other.resize_factor
            and self.overrides.keys() == other.overrides.keys()
            and all(np.array_equal(self.overrides[k], other.overrides[k]) for k in self.overrides)
        )


SPEC_FORMAT = """\
# trajectory spec, one directive per line; '#' starts a comment
prompt <words of the prompt>
token <word of the prompt whose attention is edited>
frames <frame count>
<frame> <x0> <y0> <x1> <y1>          keyframe box, normalized, 1-based frame
resize <factor>                       optional
override <frame> <rows> <cols> <bits> optional per-frame mask, bits row-major
"""


def parse_spec(text: str) -> TrajectorySpec:
    prompt = token = None
    frames = 8
    resize = None
    keyframes: list[KeyframeBox] = []
    overrides: dict[int, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if head == "prompt":
                toyworld.tokenize(rest)
                prompt = rest
            elif head == "token":
                token = rest
            elif head == "frames":
                frames = int(rest)
                if frames < 1:
                    raise ValueError("frame count must be positive")
            elif head == "resize":
                resize = float(rest)
                if resize <= 0:
                    raise ValueError("resize factor must be positive")
            elif head == "override":
                parts = rest.split()
                fi, rows, cols = int(parts[0]), int(parts[1]), int(parts[2])
                bits = parts[3] if len(parts) > 3 else ""
                if len(bits) != rows * cols or set(bits) - {"0", "1"}:
                    raise ValueError(f"override needs {rows * cols} bits of 0/1")
                overrides[fi] = np.array([int(b) for b in bits], dtype=np.float32).reshape(rows, cols)
            elif head[0].isdigit():
                parts = line.split()
                if len(parts) != 5:
                    raise ValueError(f"keyframe line needs 5 fields, got {len(parts)}")
                keyframes.append(KeyframeBox(int(parts[0]), tuple(float(p) for p in parts[1:])))
            else:
                raise ValueError(f"unknown directive {head!r}")
        except (ValueError, IndexError) as exc:
            raise TrajectorySpecError(f"line {lineno}: {exc}") from None
    if prompt is None:
        raise TrajectorySpecError("missing 'prompt' line")
    if token is None:
        raise TrajectorySpecError("missing 'token' line")
    if not keyframes and resize is None:
        raise TrajectorySpecError("at least one keyframe line is required unless 'resize' is given")
    for k in keyframes:
        if k.frame_index > frames:
            raise TrajectorySpecError(f"keyframe frame {k.frame_index} exceeds frame count {frames}")
    for fi in overrides:
        if not 1 <= fi <= frames:
            raise TrajectorySpecError(f"override frame {fi} outside [1, {frames}]")
    idx = [k.frame_index for k in keyframes]
    if len(set(idx)) != len(idx):
        raise TrajectorySpecError(f"duplicate keyframe frames {idx}")
    keyframes.sort(key=lambda k: k.frame_index)
    spec = TrajectorySpec(prompt, token, keyframes, frames, resize, overrides)
    spec.token_index  # raises when the token is not in the prompt
    return spec


def serialize_spec(spec: TrajectorySpec) -> str:
    lines = [f"prompt {spec.prompt}", f"token {spec.token}", f"frames {spec.frame_count}"]
    for k in spec.keyframes:
        lines.append(f"{k.frame_index} " + " ".join(repr(float(v)) for v in k.box))
    if spec.resize_factor is not None:
        lines.append(f"resize {spec.resize_factor!r}")
    for fi in sorted(spec.overrides):
        m = spec.overrides[fi]
        bits = "".join(str(int(v > 0.5)) for v in m.reshape(-1))
        lines.append(f"override {fi} {m.shape[0]} {m.shape[1]} {bits}")
    return "\n".join(lines) + "\n"


def load_spec(path) -> TrajectorySpec:
    with open(path) as fh:
        return parse_spec(fh.read())
