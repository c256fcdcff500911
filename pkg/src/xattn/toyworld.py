"""Synthetic captioned videos: one coloured shape moving on a plain background."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "white")
MOTIONS = ("static", "left_to_right", "top_to_bottom", "diagonal")

MOTION_PHRASES = {
    "static": "stays still",
    "left_to_right": "moves left to right",
    "top_to_bottom": "moves top to bottom",
    "diagonal": "moves diagonally",
}

PAD, BOS = "<pad>", "<bos>"
# id table; order is part of the checkpoint format, append only
VOCAB: tuple[str, ...] = (
    PAD, BOS,
    "red", "green", "blue", "white",
    "circle", "square", "triangle",
    "moves", "stays", "still", "left", "right", "top", "bottom", "to", "diagonally",
    "a", "the", "on", "black", "background", "slowly",
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_TO_ID[PAD]
BOS_ID = WORD_TO_ID[BOS]

RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
    "gray": (-0.5, -0.5, -0.5),
}

# normalized distance travelled over the clip by every moving object
TRAVEL = 0.4
SIZE_RANGE = (0.12, 0.22)
SUPERSAMPLE = 4


class VocabularyError(ValueError):
    pass


def tokenize(caption: str) -> list[int]:
    ids = []
    for word in caption.split():
        if word not in WORD_TO_ID or word in (PAD, BOS):
            raise VocabularyError(f"word {word!r} is not in the vocabulary")
        ids.append(WORD_TO_ID[word])
    return ids


def detokenize(ids: Iterable[int]) -> str:
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(VOCAB):
            raise VocabularyError(f"token id {i} is out of range")
        if i in (PAD_ID, BOS_ID):
            continue
        words.append(VOCAB[i])
    return " ".join(words)


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str
    start_position: tuple[float, float]
    size: float
    background_color: str = "black"
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if not 0 < self.size < 0.5:
            raise ValueError(f"size must lie in (0, 0.5), got {self.size}")
        if self.background_color not in RGB:
            raise ValueError(f"unknown background {self.background_color!r}")
        object.__setattr__(self, "start_position", tuple(float(v) for v in self.start_position))

    @property
    def caption(self) -> str:
        return f"{self.color} {self.shape} {MOTION_PHRASES[self.motion]}"

    def centers(self, f: int) -> np.ndarray:
        """Per-frame (x, y) bounding-box centres, clipped so the shape stays in frame."""
        r = self.size
        lo, hi = r, 1.0 - r
        dx = TRAVEL if self.motion in ("left_to_right", "diagonal") else 0.0
        dy = TRAVEL if self.motion in ("top_to_bottom", "diagonal") else 0.0
        x0 = float(np.clip(self.start_position[0], lo, hi - dx))
        y0 = float(np.clip(self.start_position[1], lo, hi - dy))
        s = np.linspace(0.0, 1.0, f) if f > 1 else np.zeros(1)
        return np.stack([x0 + dx * s, y0 + dy * s], axis=1)

    def centroid_path(self, f: int) -> np.ndarray:
        """Analytic area centroid of the shape per frame."""
        c = self.centers(f).copy()
        if self.shape == "triangle":
            c[:, 1] += self.size / 3.0
        return c

    def to_record(self) -> dict:
        d = asdict(self)
        d["start_position"] = list(self.start_position)
        return d

    @classmethod
    def from_record(cls, rec: dict) -> "SceneSpec":
        rec = dict(rec)
        rec["start_position"] = tuple(rec["start_position"])
        return cls(**rec)


@dataclass
class CaptionedVideo:
    frames: np.ndarray  # f x c x h x w in [-1, 1]
    token_ids: list[int]
    scene_spec: SceneSpec = field(repr=False)


def _inside(shape: str, x: np.ndarray, y: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    if shape == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if shape == "square":
        return (np.abs(x - cx) <= r) & (np.abs(y - cy) <= r)
    # apex up, base at cy + r, base half-width r
    return (y <= cy + r) & (np.abs(x - cx) <= (y - (cy - r)) / 2.0)


def coverage(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape (supersampled)."""
    k = SUPERSAMPLE
    ys = (np.arange(h * k) + 0.5) / (h * k)
    xs = (np.arange(w * k) + 0.5) / (w * k)
    inside = _inside(shape, xs[None, :], ys[:, None], cx, cy, r)
    return inside.reshape(h, k, w, k).mean(axis=(1, 3))


def render(spec: SceneSpec, f: int, h: int, w: int) -> CaptionedVideo:
    color = np.array(RGB[spec.color], dtype=np.float32)[:, None, None]
    bg = np.array(RGB[spec.background_color], dtype=np.float32)[:, None, None]
    frames = np.empty((f, 3, h, w), dtype=np.float32)
    for i, (cx, cy) in enumerate(spec.centers(f)):
        cov = coverage(spec.shape, cx, cy, spec.size, h, w).astype(np.float32)
        frames[i] = bg * (1.0 - cov) + color * cov
    return CaptionedVideo(frames=frames, token_ids=tokenize(spec.caption), scene_spec=spec)


def sample_spec(rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    return SceneSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        motion=MOTIONS[rng.integers(len(MOTIONS))],
        start_position=(float(rng.uniform()), float(rng.uniform())),
        size=float(rng.uniform(*SIZE_RANGE)),
        seed=seed,
    )


def gen_specs(n: int, seed: int) -> list[SceneSpec]:
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    return [sample_spec(rng, seed=seed * 1_000_003 + i) for i in range(n)]


def gen_dataset(n: int, seed: int, f: int, h: int, w: int) -> list[CaptionedVideo]:
    return [render(s, f, h, w) for s in gen_specs(n, seed)]


def write_manifest(path: str | Path, specs: Sequence[SceneSpec]) -> None:
    with open(path, "w") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[SceneSpec]:
    with open(path) as fh:
        return [SceneSpec.from_record(json.loads(line)) for line in fh if line.strip()]


def to_latent(frames: np.ndarray, h_lat: int, w_lat: int) -> np.ndarray:
    """Area-average ``... x h x w`` frames down to ``h_lat x w_lat``."""
    h, w = frames.shape[-2:]
    if h % h_lat or w % w_lat:
        raise ValueError(f"latent size {h_lat}x{w_lat} must divide frame size {h}x{w}")
    fy, fx = h // h_lat, w // w_lat
    lead = frames.shape[:-2]
    return frames.reshape(*lead, h_lat, fy, w_lat, fx).mean(axis=(-3, -1))


def from_latent(latent: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-upsample a latent to ``h x w`` and clamp to [-1, 1]."""
    h_lat, w_lat = latent.shape[-2:]
    if h % h_lat or w % w_lat:
        raise ValueError(f"frame size {h}x{w} is not a multiple of latent {h_lat}x{w_lat}")
    out = np.repeat(np.repeat(latent, h // h_lat, axis=-2), w // w_lat, axis=-1)
    return np.clip(out, -1.0, 1.0)
