"""Synthetic occluded-object video generation with exact visibility ratios,
plus MOT-format ground-truth ingestion and the per-video 80/20 temporal split.

Objects and occluders are axis-aligned rectangles snapped to the pixel grid,
so the visibility ratio (visible area / total area) is analytic: occluder
overlap and image-border cropping both reduce it.  Occluders sit above all
objects in a fixed z-order.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .boxes import BBox


class MotParseError(ValueError):
    """Malformed MOT ground-truth row; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class GroundTruth:
    frame_index: int
    track_id: int
    box: BBox
    visibility: float
    class_id: int = 1


@dataclass
class Video:
    frames: list[np.ndarray]  # (3, H, W) float64 in [0, 1]
    gt: list[GroundTruth]
    name: str = "video"

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def gt_for_frame(self, frame_index: int) -> list[GroundTruth]:
        return [g for g in self.gt if g.frame_index == frame_index]


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: int = 64
    num_objects: tuple[int, int] = (1, 1)
    object_size: tuple[int, int] = (18, 22)
    velocity: tuple[float, float] = (0.5, 1.5)
    num_occluders: int = 1
    occluder_size: tuple[int, int] = (28, 36)
    num_frames: int = 60
    seed: int = 0
    jitter: float = 0.1
    border_slack: float = 0.0
    background: float = 0.05
    count_object_occlusion: bool = False

    def validate(self) -> None:
        for lo, hi, what in ((*self.num_objects, "num_objects"),
                             (*self.object_size, "object_size"),
                             (*self.velocity, "velocity"),
                             (*self.occluder_size, "occluder_size")):
            if lo > hi:
                raise ValueError(f"empty {what} range ({lo}, {hi})")
        if self.object_size[1] >= self.image_size:
            raise ValueError("objects must fit inside the image")
        if self.num_frames < 1:
            raise ValueError("num_frames must be positive")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "num_objects": list(self.num_objects),
            "object_size": list(self.object_size),
            "velocity": list(self.velocity),
            "num_occluders": self.num_occluders,
            "occluder_size": list(self.occluder_size),
            "num_frames": self.num_frames,
            "seed": self.seed,
            "jitter": self.jitter,
            "border_slack": self.border_slack,
            "background": self.background,
            "count_object_occlusion": self.count_object_occlusion,
        }

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSceneConfig":
        d = dict(d)
        for key in ("num_objects", "object_size", "velocity", "occluder_size"):
            if key in d:
                d[key] = tuple(d[key])
        return SyntheticSceneConfig(**d)


# integer rect: (left, top, w, h)
Rect = tuple[int, int, int, int]


def _clip_rect(a: Rect, b: Rect) -> Rect | None:
    left = max(a[0], b[0])
    top = max(a[1], b[1])
    right = min(a[0] + a[2], b[0] + b[2])
    bottom = min(a[1] + a[3], b[1] + b[3])
    if right <= left or bottom <= top:
        return None
    return (left, top, right - left, bottom - top)


def _union_area_within(rects: Sequence[Rect], region: Rect) -> int:
    """Area of (union of rects) intersected with region, by inclusion-exclusion."""
    clipped = [r for r in (_clip_rect(r, region) for r in rects) if r is not None]
    total = 0
    for size in range(1, len(clipped) + 1):
        sign = 1 if size % 2 == 1 else -1
        for subset in combinations(clipped, size):
            inter = subset[0]
            for r in subset[1:]:
                inter = _clip_rect(inter, r)
                if inter is None:
                    break
            if inter is not None:
                total += sign * inter[2] * inter[3]
    return total


def rect_visibility(box: Rect, occluders: Sequence[Rect], image_size: int) -> float:
    """Exact visible-area fraction of an integer rect: border cropping and
    occluder coverage both count against it."""
    image = (0, 0, image_size, image_size)
    inside = _clip_rect(box, image)
    inside_area = inside[2] * inside[3] if inside else 0
    covered = _union_area_within(occluders, inside) if inside else 0
    return (inside_area - covered) / (box[2] * box[3])


@dataclass
class _MovingObject:
    w: int
    h: int
    cx: float
    cy: float
    vx: float
    vy: float
    colors: tuple[np.ndarray, np.ndarray]

    def rect(self) -> Rect:
        return (int(round(self.cx - self.w / 2)), int(round(self.cy - self.h / 2)),
                self.w, self.h)


def _bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if pos < lo:
        return lo + (lo - pos), -vel
    if pos > hi:
        return hi - (pos - hi), -vel
    return pos, vel


def _draw_rect(img: np.ndarray, rect: Rect, color: np.ndarray) -> None:
    size = img.shape[1]
    c = _clip_rect(rect, (0, 0, size, size))
    if c is None:
        return
    img[:, c[1] : c[1] + c[3], c[0] : c[0] + c[2]] = color[:, None, None]


def _draw_checkered(img: np.ndarray, rect: Rect,
                    colors: tuple[np.ndarray, np.ndarray], tile: int = 4) -> None:
    size = img.shape[1]
    c = _clip_rect(rect, (0, 0, size, size))
    if c is None:
        return
    ys = np.arange(c[1], c[1] + c[3])
    xs = np.arange(c[0], c[0] + c[2])
    # tiles anchored at the object's own corner so the texture moves with it
    parity = (((ys - rect[1])[:, None] // tile) + ((xs - rect[0])[None, :] // tile)) % 2
    patch = np.where(parity[None] == 0, colors[0][:, None, None], colors[1][:, None, None])
    img[:, c[1] : c[1] + c[3], c[0] : c[0] + c[2]] = patch


def generate_video(cfg: SyntheticSceneConfig) -> Video:
    """Moving textured rectangles with constant velocity plus jitter, bouncing
    at borders, behind static opaque occluders.  Ground truth is emitted for
    every frame with exact visibility; fully covered objects keep their rows
    at visibility 0."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size

    occluders: list[Rect] = []
    for _ in range(cfg.num_occluders):
        ow = int(rng.integers(cfg.occluder_size[0], cfg.occluder_size[1] + 1))
        oh = int(rng.integers(cfg.occluder_size[0], cfg.occluder_size[1] + 1))
        ox = int(rng.integers(0, max(1, size - ow + 1)))
        oy = int(rng.integers(0, max(1, size - oh + 1)))
        occluders.append((ox, oy, ow, oh))
    occ_colors = [np.full(3, rng.uniform(0.35, 0.55)) for _ in occluders]

    n_obj = int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1))
    objects: list[_MovingObject] = []
    for _ in range(n_obj):
        w = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        h = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        lo_x, hi_x = w / 2 - cfg.border_slack, size - w / 2 + cfg.border_slack
        lo_y, hi_y = h / 2 - cfg.border_slack, size - h / 2 + cfg.border_slack
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
        speed = rng.uniform(cfg.velocity[0], cfg.velocity[1])
        angle = rng.uniform(0.0, 2.0 * math.pi)
        colors = (rng.uniform(0.6, 1.0, 3), rng.uniform(0.0, 0.35, 3))
        objects.append(_MovingObject(w, h, cx, cy,
                                     speed * math.cos(angle), speed * math.sin(angle),
                                     colors))

    frames: list[np.ndarray] = []
    gts: list[GroundTruth] = []
    for t in range(cfg.num_frames):
        img = np.full((3, size, size), cfg.background)
        for k, obj in enumerate(objects):
            _draw_checkered(img, obj.rect(), obj.colors)
        for occ, color in zip(occluders, occ_colors):
            _draw_rect(img, occ, color)
        for k, obj in enumerate(objects):
            rect = obj.rect()
            covering = list(occluders)
            if cfg.count_object_occlusion:
                covering += [o.rect() for o in objects[k + 1 :]]
            vis = rect_visibility(rect, covering, size)
            gts.append(GroundTruth(t, k + 1,
                                   BBox(rect[0], rect[1], rect[2], rect[3]), vis))
        frames.append(img)
        for obj in objects:
            obj.cx += obj.vx + rng.normal(0.0, cfg.jitter)
            obj.cy += obj.vy + rng.normal(0.0, cfg.jitter)
            lo_x, hi_x = obj.w / 2 - cfg.border_slack, size - obj.w / 2 + cfg.border_slack
            lo_y, hi_y = obj.h / 2 - cfg.border_slack, size - obj.h / 2 + cfg.border_slack
            obj.cx, obj.vx = _bounce(obj.cx, obj.vx, lo_x, hi_x)
            obj.cy, obj.vy = _bounce(obj.cy, obj.vy, lo_y, hi_y)
    return Video(frames, gts, name=f"synthetic-{cfg.seed}")


def generate_dataset(cfg: SyntheticSceneConfig, num_videos: int) -> list[Video]:
    """Independent videos with per-video seeds derived from cfg.seed."""
    return [generate_video(replace(cfg, seed=cfg.seed + i)) for i in range(num_videos)]


def hidden_fraction(gts: Iterable[GroundTruth], threshold: float = 0.5) -> float:
    gts = list(gts)
    if not gts:
        return 0.0
    return sum(1 for g in gts if g.visibility < threshold) / len(gts)


def calibrate_hidden_fraction(cfg: SyntheticSceneConfig, target: float,
                              num_videos: int = 8, tol: float = 0.02,
                              iters: int = 24) -> SyntheticSceneConfig:
    """Bisect a scale factor on the occluder size until the generated dataset's
    hidden-ground-truth fraction lands near the target."""

    def measure(scale: float) -> float:
        lo = max(2, int(round(cfg.occluder_size[0] * scale)))
        hi = max(lo, int(round(cfg.occluder_size[1] * scale)))
        trial = replace(cfg, occluder_size=(lo, hi))
        gts = [g for v in generate_dataset(trial, num_videos) for g in v.gt]
        return hidden_fraction(gts)

    lo_s, hi_s = 0.1, 2.5
    best_scale, best_err = 1.0, abs(measure(1.0) - target)
    for _ in range(iters):
        if best_err <= tol:
            break
        mid = (lo_s + hi_s) / 2
        frac = measure(mid)
        err = abs(frac - target)
        if err < best_err:
            best_scale, best_err = mid, err
        if frac < target:
            lo_s = mid
        else:
            hi_s = mid
    lo = max(2, int(round(cfg.occluder_size[0] * best_scale)))
    hi = max(lo, int(round(cfg.occluder_size[1] * best_scale)))
    return replace(cfg, occluder_size=(lo, hi))


# ---------------------------------------------------------------------------
# MOT ground-truth format


def parse_mot_gt(stream: TextIO | Iterable[str], classes: Sequence[int] = (1,),
                 stats: dict | None = None) -> list[GroundTruth]:
    """Rows `frame,id,bb_left,bb_top,bb_width,bb_height,conf,class,visibility`.
    conf==0 rows are dropped (MOT ignore convention); frame indices come in
    1-based and leave 0-based; out-of-range visibility is clamped and counted.
    """
    out: list[GroundTruth] = []
    clamped = 0
    allow = set(classes) if classes is not None else None
    for line_no, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 9:
            raise MotParseError(line_no, f"expected 9 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            track = int(parts[1])
            x, y, w, h = (float(p) for p in parts[2:6])
            conf = float(parts[6])
            cls = int(parts[7])
            vis = float(parts[8])
        except ValueError as exc:
            raise MotParseError(line_no, str(exc)) from exc
        if frame < 1:
            raise MotParseError(line_no, f"frame index must be >= 1, got {frame}")
        if w <= 0 or h <= 0:
            raise MotParseError(line_no, f"non-positive box size {w}x{h}")
        if conf == 0:
            continue
        if allow is not None and cls not in allow:
            continue
        if vis < 0.0 or vis > 1.0:
            vis = min(1.0, max(0.0, vis))
            clamped += 1
        out.append(GroundTruth(frame - 1, track, BBox(x, y, w, h), vis, cls))
    if stats is not None:
        stats["visibility_clamped"] = clamped
    return out


def _fmt(v: float) -> str:
    return f"{v:g}"


def emit_mot_gt(gts: Iterable[GroundTruth], stream: TextIO) -> None:
    for g in gts:
        stream.write(",".join([
            str(g.frame_index + 1), str(g.track_id),
            _fmt(g.box.x), _fmt(g.box.y), _fmt(g.box.w), _fmt(g.box.h),
            "1", str(g.class_id), _fmt(g.visibility),
        ]) + "\n")


# ---------------------------------------------------------------------------
# train/test split


def split_train_test(videos: Sequence[Video], train_fraction: float = 0.8
                     ) -> tuple[list[Video], list[Video]]:
    """Per-video temporal split: first floor(fraction*N) frames train, rest
    test.  Frame indices are re-based within each part."""
    train, test = [], []
    for v in videos:
        if v.num_frames < 5:
            raise ValueError(f"video {v.name!r} has {v.num_frames} frames, need >= 5")
        cut = int(math.floor(train_fraction * v.num_frames))
        train.append(Video(
            v.frames[:cut],
            [g for g in v.gt if g.frame_index < cut],
            name=f"{v.name}/train"))
        test.append(Video(
            v.frames[cut:],
            [replace_frame(g, g.frame_index - cut) for g in v.gt if g.frame_index >= cut],
            name=f"{v.name}/test"))
    return train, test


def replace_frame(g: GroundTruth, frame_index: int) -> GroundTruth:
    return GroundTruth(frame_index, g.track_id, g.box, g.visibility, g.class_id)


# ---------------------------------------------------------------------------
# on-disk dataset: PPM frames + MOT gt.txt + config.json


def write_ppm(path, frame: np.ndarray) -> None:
    _, h, w = frame.shape
    pixels = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if not m:
        raise ValueError(f"{path}: not a P6 PPM file")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(data[m.end() :], dtype=np.uint8, count=w * h * 3)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def save_video(video: Video, out_dir,
               config: SyntheticSceneConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames):
        write_ppm(out / f"frame_{i:05d}.ppm", frame)
    with open(out / "gt.txt", "w") as fh:
        emit_mot_gt(video.gt, fh)
    if config is not None:
        with open(out / "config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_video(in_dir, classes: Sequence[int] | None = None) -> Video:
    src = Path(in_dir)
    frame_paths = sorted(src.glob("frame_*.ppm"))
    if not frame_paths:
        raise FileNotFoundError(f"no frame_*.ppm files under {src}")
    frames = [read_ppm(p) for p in frame_paths]
    gt_path = src / "gt.txt"
    if not gt_path.exists():
        gt_path = src / "gt" / "gt.txt"
    gts: list[GroundTruth] = []
    if gt_path.exists():
        with open(gt_path) as fh:
            gts = parse_mot_gt(fh, classes=classes if classes is not None else (1,))
    return Video(frames, gts, name=src.name)


def save_dataset(videos: Sequence[Video], out_dir,
                 config: SyntheticSceneConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(videos):
        save_video(v, out / f"video_{i:03d}")
    if config is not None:
        with open(out / "config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_dataset(in_dir, classes: Sequence[int] | None = None) -> list[Video]:
    src = Path(in_dir)
    video_dirs = sorted(p for p in src.iterdir() if p.is_dir() and p.name.startswith("video_"))
    if not video_dirs:
        return [load_video(src, classes)]
    return [load_video(p, classes) for p in video_dirs]
