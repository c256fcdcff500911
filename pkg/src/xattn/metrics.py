"""Deterministic measurements on generated clips and attention maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import toyworld

OBJECT_THRESHOLD = 0.5
# fill ratio (object area / bounding-box area) boundaries:
# triangle ~0.5, circle ~pi/4, square ~1
TRIANGLE_MAX_FILL = 0.64
CIRCLE_MAX_FILL = 0.89


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def background(frame: np.ndarray) -> np.ndarray:
    """Per-channel median colour of a ``c x h x w`` frame."""
    return np.median(frame.reshape(frame.shape[0], -1), axis=1)


def object_mask(frame: np.ndarray, bg: np.ndarray | None = None,
                threshold: float = OBJECT_THRESHOLD) -> np.ndarray:
    """Cells whose colour differs from the background by more than ``threshold``."""
    if bg is None:
        bg = background(frame)
    return np.abs(frame - bg[:, None, None]).max(axis=0) > threshold


@dataclass
class FrameObject:
    present: bool
    area: int = 0
    centroid: tuple[float, float] | None = None
    bbox: tuple[float, float, float, float] | None = None
    color: str | None = None
    shape: str | None = None
    fill: float = 0.0


def classify_frame(frame: np.ndarray) -> FrameObject:
    """Locate and label the single object of a ``c x h x w`` frame in [-1, 1]."""
    bg = background(frame)
    mask = object_mask(frame, bg)
    if not mask.any():
        return FrameObject(False)
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    area = int(mask.sum())
    centroid = ((xs.mean() + 0.5) / w, (ys.mean() + 0.5) / h)
    bbox = (xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)
    box_area = (xs.max() - xs.min() + 1) * (ys.max() - ys.min() + 1)
    fill = area / box_area
    mean_rgb = frame[:, mask].mean(axis=1)
    color = min(toyworld.COLORS, key=lambda c: float(np.sum((mean_rgb - np.array(toyworld.RGB[c])) ** 2)))
    if fill < TRIANGLE_MAX_FILL:
        shape = "triangle"
    elif fill < CIRCLE_MAX_FILL:
        shape = "circle"
    else:
        shape = "square"
    return FrameObject(True, area, centroid, bbox, color, shape, float(fill))


def _majority(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    uniq, counts = np.unique(vals, return_counts=True)
    return str(uniq[np.argmax(counts)])


@dataclass
class VideoObject:
    frames: list[FrameObject]
    color: str | None
    shape: str | None
    presence: float

    @property
    def centroids(self) -> list[tuple[float, float] | None]:
        return [f.centroid for f in self.frames]

    @property
    def areas(self) -> np.ndarray:
        return np.array([f.area for f in self.frames], dtype=np.float64)


def classify_video(video: np.ndarray) -> VideoObject:
    """Per-frame detection plus majority colour/shape labels (``f x c x h x w``)."""
    frames = [classify_frame(fr) for fr in video]
    return VideoObject(
        frames,
        _majority([f.color for f in frames]),
        _majority([f.shape for f in frames]),
        float(np.mean([f.present for f in frames])),
    )


def box_center(box) -> tuple[float, float]:
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def centroid_errors(obj: VideoObject, target_boxes) -> list[float]:
    """Distance per frame between the object centroid and the target box centre.

    Frames without a detected object count as the distance from the frame
    centre, the best guess available.
    """
    out = []
    for fo, box in zip(obj.frames, target_boxes):
        c = fo.centroid if fo.centroid is not None else (0.5, 0.5)
        tx, ty = box_center(box)
        out.append(float(np.hypot(c[0] - tx, c[1] - ty)))
    return out


def thresholded(attn: np.ndarray) -> np.ndarray:
    """Cells at or above the midpoint of each map's min and max (last two axes)."""
    lo = attn.min(axis=(-2, -1), keepdims=True)
    hi = attn.max(axis=(-2, -1), keepdims=True)
    live = (hi - lo) >= 1e-8
    return ((attn - lo) >= 0.5 * (hi - lo)) & live


def attention_iou(maps_by_step: dict, target_masks: dict) -> np.ndarray:
    """Per-frame IoU averaged over steps and layers.

    ``maps_by_step[step][layer]`` is an ``f x H x W`` token map and
    ``target_masks[layer]`` the matching binary masks.
    """
    per = []
    for maps in maps_by_step.values():
        for key, m in maps.items():
            tm = target_masks[key]
            th = thresholded(np.asarray(m))
            per.append([iou(th[i], tm[i]) for i in range(th.shape[0])])
    if not per:
        raise ValueError("no attention maps to score")
    return np.mean(np.array(per), axis=0)


@dataclass
class MetricsReport:
    per_frame_iou: list[float] = field(default_factory=list)
    mean_iou: float | None = None
    centroid_error: float | None = None
    per_frame_centroid_error: list[float] = field(default_factory=list)
    energy_first: float | None = None
    energy_last: float | None = None
    energy_mean_drop: float | None = None
    object_presence: float = 0.0
    area_trend: float | None = None
    terminal_shortfall: float | None = None
    object_areas: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, list):
                v = " ".join(f"{x:.6f}" for x in v)
            elif isinstance(v, float):
                v = f"{v:.6f}"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def build_report(video: np.ndarray, target_boxes, trace_entries=None, iou_per_frame=None) -> MetricsReport:
    obj = classify_video(video)
    rep = MetricsReport()
    rep.object_presence = obj.presence
    rep.object_areas = [float(a) for a in obj.areas]
    if target_boxes is not None:
        errs = centroid_errors(obj, target_boxes)
        rep.per_frame_centroid_error = errs
        rep.centroid_error = float(np.mean(errs))
        rep.terminal_shortfall = errs[-1]
    if len(obj.areas) > 1:
        rep.area_trend = float(np.polyfit(np.arange(len(obj.areas)), obj.areas, 1)[0])
    if trace_entries:
        rep.energy_first = float(trace_entries[0][1])
        rep.energy_last = float(trace_entries[-1][2])
        rep.energy_mean_drop = float(np.mean([a - b for _, a, b in trace_entries]))
    if iou_per_frame is not None:
        rep.per_frame_iou = [float(v) for v in iou_per_frame]
        rep.mean_iou = float(np.mean(iou_per_frame))
    return rep


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])
