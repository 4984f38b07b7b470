"""Synthetic subject-over-scene clips and the mask/segmentation tensor ops.

Pixel conventions, used everywhere downstream:
  * video frames: uint8 (T, H, W, 3) at rest, [-1, 1] float in memory
    (p -> 2p/255 - 1)
  * segmentation: subject pixels keep their RGB, background is grey 127
  * mask: uint8 (T, H, W, 1), foreground = 0, background = 1

The synthetic generator renders a procedurally textured background that
scrolls with a camera pan while a sprite (disc, convex polygon or a
two-limb walker) drifts across it, so clips carry the two motion factors a
background model has to pick up: camera motion and subject motion. Masks
are exact by construction, not estimated.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import IntegrityError, ValidationError

GREY = 127
SPRITE_KINDS = ("disc", "polygon", "walker")

_MAGIC = b"VBGC"
_FORMAT_VERSION = 1
_REC_HEADER = struct.Struct("<HHHHQI")  # T, H, W, reserved, seed, crc32(body)


@dataclass(frozen=True)
class VideoClip:
    """Ground-truth or generated clip: uint8 frames (T, H, W, 3)."""

    frames: np.ndarray
    fps: float = 8.0

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.dtype != np.uint8:
            raise ValidationError(f"clip frames must be uint8 (T,H,W,3), got {f.dtype} {f.shape}")
        if f.shape[1] != f.shape[2]:
            raise ValidationError(f"frames must be square, got {f.shape[1]}x{f.shape[2]}")

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class SegmentationSequence:
    """Subject cutout: subject RGB on a grey-127 background, uint8 (T, H, W, 3)."""

    frames: np.ndarray

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.dtype != np.uint8:
            raise ValidationError(f"segmentation must be uint8 (T,H,W,3), got {f.dtype} {f.shape}")


@dataclass(frozen=True)
class MaskSequence:
    """Binary masks, uint8 (T, H, W, 1): foreground = 0, background = 1."""

    frames: np.ndarray

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 1 or f.dtype != np.uint8:
            raise ValidationError(f"mask must be uint8 (T,H,W,1), got {f.dtype} {f.shape}")
        bad = np.setdiff1d(np.unique(f), [0, 1])
        if bad.size:
            raise ValidationError(f"mask values must be 0 or 1, found {bad.tolist()}")


@dataclass(frozen=True)
class ConditionFrame:
    """Single uint8 (H, W, 3) frame describing the target scene.

    source_index is the clip frame it was sampled from, when known; metrics
    use it to pick the generated frame the condition should align with.
    """

    image: np.ndarray
    source_index: int | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValidationError(
                f"condition frame must be uint8 (H,W,3), got {self.image.dtype} {self.image.shape}"
            )


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_frames: int = 8
    size: int = 64
    sprite_kind: str = "disc"
    sprite_radius_frac: float = 0.2   # sprite bounding radius / frame size
    drift: tuple[float, float] | None = None  # sprite px/frame; None -> sampled
    limb_swing_amplitude: float = 0.7  # radians, walker limbs
    camera_pan: float = 2.0            # background scroll, px/frame
    parallax: float = 0.5              # far-layer speed as a fraction of pan
    fps: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 1 or self.size < 8:
            raise ValidationError("need num_frames >= 1 and size >= 8")
        if self.sprite_kind not in SPRITE_KINDS:
            raise ValidationError(f"unknown sprite kind {self.sprite_kind!r}")
        if self.sprite_radius_frac * self.size < 1.0:
            raise ValidationError("degenerate sprite: bounding radius under one pixel")


@dataclass(frozen=True)
class SceneParams:
    """Everything the renderer needs, drawn once from the config seed."""

    sprite_kind: str
    radius: float
    color: tuple[int, int, int]
    start: tuple[float, float]          # sprite centre at t=0 (x, y)
    drift: tuple[float, float]
    poly_angles: tuple[float, ...]      # polygon only
    poly_radii: tuple[float, ...]
    swing_phase: float                  # walker only
    background_seed: int


@dataclass(frozen=True)
class ClipRecord:
    """One packed dataset record: the clip, its exact mask, and the seed."""

    clip: VideoClip
    mask: MaskSequence
    seed: int


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------

def draw_scene_params(config: SyntheticSceneConfig) -> SceneParams:
    """Draw sprite geometry and motion deterministically from config.seed."""
    rng = np.random.default_rng(config.seed)
    size = config.size
    radius = config.sprite_radius_frac * size

    color = tuple(int(c) for c in rng.integers(40, 256, size=3))
    if all(abs(c - GREY) < 8 for c in color):
        color = (color[0], color[1], min(255, color[2] + 16))  # keep off pure grey

    if config.drift is None:
        drift = tuple(float(v) for v in rng.uniform(-2.0, 2.0, size=2))
    else:
        drift = (float(config.drift[0]), float(config.drift[1]))

    # Clamp drift so the sprite keeps a >=1 px margin for the whole clip,
    # then place the start uniformly inside the feasible box.
    lo, hi = radius + 1.0, size - radius - 2.0
    if hi <= lo:
        raise ValidationError("sprite too large for frame")
    span_t = config.num_frames - 1
    start = []
    clamped = []
    for v in drift:
        max_abs = (hi - lo) / span_t if span_t > 0 else float("inf")
        v = float(np.clip(v, -max_abs, max_abs))
        clamped.append(v)
        travel = v * span_t
        a = lo + max(0.0, -travel)
        b = hi - max(0.0, travel)
        start.append(float(rng.uniform(a, b)))

    k = int(rng.integers(5, 8))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
    radii = rng.uniform(0.6 * radius, radius, size=k)
    swing_phase = float(rng.uniform(0.0, 2.0 * math.pi))
    background_seed = int(rng.integers(0, 2**31))

    return SceneParams(
        sprite_kind=config.sprite_kind,
        radius=radius,
        color=color,
        start=(start[0], start[1]),
        drift=(clamped[0], clamped[1]),
        poly_angles=tuple(angles.tolist()),
        poly_radii=tuple(radii.tolist()),
        swing_phase=swing_phase,
        background_seed=background_seed,
    )


def sprite_center(params: SceneParams, t: int) -> tuple[float, float]:
    """Sprite centre at frame t: linear drift from the start position."""
    return (params.start[0] + params.drift[0] * t, params.start[1] + params.drift[1] * t)


def _segment_mask(xs, ys, x0, y0, x1, y1, thickness):
    """Pixels within `thickness`/2 of the segment (x0,y0)-(x1,y1)."""
    dx, dy = x1 - x0, y1 - y0
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        d2 = (xs - x0) ** 2 + (ys - y0) ** 2
    else:
        u = ((xs - x0) * dx + (ys - y0) * dy) / seg_len2
        u = np.clip(u, 0.0, 1.0)
        d2 = (xs - (x0 + u * dx)) ** 2 + (ys - (y0 + u * dy)) ** 2
    return d2 <= (thickness / 2.0) ** 2


def sprite_mask(params: SceneParams, t: int, size: int, num_frames: int,
                swing_amplitude: float = 0.7) -> np.ndarray:
    """Rasterize the sprite at frame t; True = foreground.

    Pixel (y, x) is tested at its integer centre. Disc membership is
    (x-cx)^2 + (y-cy)^2 <= r^2; the polygon is convex (sign of every edge
    cross product); the walker is a torso rectangle plus two swinging limb
    segments.
    """
    cx, cy = sprite_center(params, t)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    r = params.radius

    if params.sprite_kind == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r

    if params.sprite_kind == "polygon":
        vx = cx + np.array(params.poly_radii) * np.cos(params.poly_angles)
        vy = cy + np.array(params.poly_radii) * np.sin(params.poly_angles)
        inside = np.ones((size, size), dtype=bool)
        n = len(vx)
        for i in range(n):
            j = (i + 1) % n
            cross = (vx[j] - vx[i]) * (ys - vy[i]) - (vy[j] - vy[i]) * (xs - vx[i])
            inside &= cross >= 0.0
        return inside

    # walker: torso + two limbs swinging in antiphase
    half_w, torso_top, hip_y = 0.35 * r, cy - 0.55 * r, cy + 0.1 * r
    torso = (np.abs(xs - cx) <= half_w) & (ys >= torso_top) & (ys <= hip_y)
    phase = 2.0 * math.pi * t / max(num_frames, 2) + params.swing_phase
    limb_len, thick = 0.55 * r, 0.32 * r
    fg = torso
    for sgn in (1.0, -1.0):
        theta = sgn * swing_amplitude * math.sin(phase)
        ex = cx + limb_len * math.sin(theta)
        ey = hip_y + limb_len * math.cos(theta)
        fg = fg | _segment_mask(xs, ys, cx, hip_y, ex, ey, thick)
    return fg


def _value_noise(rng, h, w, cells, lo=0.0, hi=1.0):
    """Smooth random field: coarse grid, bilinear upsample via ndimage.zoom."""
    grid = rng.uniform(lo, hi, size=(cells, cells))
    field = ndimage.zoom(grid, (h / cells, w / cells), order=1, mode="nearest")
    return field[:h, :w]


def _background_layers(seed: int, size: int, canvas_w: int):
    """Far (smooth) and near (textured) layers, both (size, canvas_w, 3)."""
    rng = np.random.default_rng(seed)
    ys = np.linspace(0.0, 1.0, size)[:, None]
    xs = np.linspace(0.0, 1.0, canvas_w)[None, :]

    top = rng.uniform(0.15, 0.75, size=3)
    bottom = rng.uniform(0.15, 0.75, size=3)
    far = top[None, None, :] * (1 - ys[..., None]) + bottom[None, None, :] * ys[..., None]
    blob = _value_noise(rng, size, canvas_w, cells=4, lo=-0.12, hi=0.12)
    far = far + blob[..., None]

    near = np.zeros((size, canvas_w, 3))
    for c in range(3):
        near[..., c] = _value_noise(rng, size, canvas_w, cells=max(8, size // 4), lo=-0.5, hi=0.5)
    stripes = 0.22 * np.sin(2.0 * math.pi * (6.0 * xs + 2.0 * ys) + rng.uniform(0, 2 * math.pi))
    near += stripes[..., None]
    return far, near


def render_scene(params: SceneParams, config: SyntheticSceneConfig):
    """Render (clip, segmentation, mask) for the drawn scene parameters."""
    t_n, size = config.num_frames, config.size
    near_off = [int(round(config.camera_pan * t)) for t in range(t_n)]
    far_off = [int(round(config.camera_pan * config.parallax * t)) for t in range(t_n)]
    base_near = -min(near_off)
    base_far = -min(far_off)
    canvas_w = size + max(
        max(o + base_near for o in near_off), max(o + base_far for o in far_off)
    ) + 1
    far, near = _background_layers(params.background_seed, size, canvas_w)

    frames = np.empty((t_n, size, size, 3), dtype=np.uint8)
    masks = np.empty((t_n, size, size, 1), dtype=np.uint8)
    color = np.array(params.color, dtype=np.float64)

    for t in range(t_n):
        xf = base_far + far_off[t]
        xn = base_near + near_off[t]
        bg = 0.55 * far[:, xf:xf + size] + 0.45 * near[:, xn:xn + size]
        bg8 = np.clip(bg * 255.0, 0, 255).astype(np.uint8)

        fg = sprite_mask(params, t, size, t_n, config.limb_swing_amplitude)
        if not fg.any():
            raise ValidationError("degenerate sprite: rasterized to zero area")

        cx, cy = sprite_center(params, t)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) / max(params.radius, 1.0)
        shade = 1.0 - 0.35 * np.clip(d, 0.0, 1.0) ** 2
        sprite_rgb = np.clip(color[None, None, :] * shade[..., None], 0, 255).astype(np.uint8)
        # a foreground pixel must never be exactly grey-127 on all channels,
        # or the mask<->grey coupling invariant would break
        grey_hit = fg & (sprite_rgb == GREY).all(axis=2)
        if grey_hit.any():
            sprite_rgb[grey_hit, 0] = GREY + 1

        frame = np.where(fg[..., None], sprite_rgb, bg8)
        frames[t] = frame
        masks[t, ..., 0] = (~fg).astype(np.uint8)

    clip = VideoClip(frames=frames, fps=config.fps)
    mask = MaskSequence(frames=masks)
    seg = make_segmentation(clip, mask)
    return clip, seg, mask


def generate_synthetic_clip(config: SyntheticSceneConfig):
    """Deterministically generate (VideoClip, SegmentationSequence, MaskSequence)."""
    return render_scene(draw_scene_params(config), config)


# ---------------------------------------------------------------------------
# mask / segmentation operations
# ---------------------------------------------------------------------------

def make_segmentation(clip: VideoClip, mask: MaskSequence) -> SegmentationSequence:
    """Copy subject pixels where mask=0, write grey-127 where mask=1."""
    if clip.frames.shape[:3] != mask.frames.shape[:3]:
        raise ValidationError(
            f"clip {clip.frames.shape} and mask {mask.frames.shape} disagree"
        )
    bg = mask.frames[..., 0:1] == 1
    seg = np.where(bg, np.uint8(GREY), clip.frames)
    return SegmentationSequence(frames=seg)


def random_cutout(
    seg: SegmentationSequence,
    mask: MaskSequence,
    rng: np.random.Generator,
    max_frac: float = 0.25,
):
    """Knock one rectangle out of the subject, shared across all frames.

    Inside the rectangle the segmentation becomes grey and the mask becomes
    background, mimicking an incomplete segmentation. Side lengths are at
    most max_frac of the frame size; max_frac small enough to round to zero
    pixels is a no-op.
    """
    if not 0.0 < max_frac <= 0.5:
        raise ValidationError(f"max_frac must be in (0, 0.5], got {max_frac}")
    t_n, h, w = mask.frames.shape[:3]
    max_h, max_w = int(max_frac * h), int(max_frac * w)
    if max_h < 1 or max_w < 1:
        return SegmentationSequence(seg.frames.copy()), MaskSequence(mask.frames.copy())
    rh = int(rng.integers(1, max_h + 1))
    rw = int(rng.integers(1, max_w + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    seg_out = seg.frames.copy()
    mask_out = mask.frames.copy()
    seg_out[:, y0:y0 + rh, x0:x0 + rw, :] = GREY
    mask_out[:, y0:y0 + rh, x0:x0 + rw, :] = 1
    return SegmentationSequence(seg_out), MaskSequence(mask_out)


def erode_foreground(seg: SegmentationSequence, mask: MaskSequence, kernel: int = 5):
    """Morphologically erode the subject region with a uniform kernel.

    A pixel stays foreground only if its whole kernel x kernel neighbourhood
    is foreground; frame borders count as background. Pixels that leave the
    foreground turn grey in the segmentation and 1 in the mask. Trims
    leaked background pixels off the subject boundary.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValidationError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return SegmentationSequence(seg.frames.copy()), MaskSequence(mask.frames.copy())
    fg = mask.frames[..., 0] == 0
    footprint = np.ones((kernel, kernel), dtype=bool)
    eroded = np.stack(
        [ndimage.binary_erosion(f, structure=footprint, border_value=0) for f in fg]
    )
    mask_out = (~eroded).astype(np.uint8)[..., None]
    seg_out = np.where(eroded[..., None], seg.frames, np.uint8(GREY))
    return SegmentationSequence(seg_out), MaskSequence(mask_out)


def downsample_mask(mask: MaskSequence, factor: int = 8) -> torch.Tensor:
    """Block-average the mask to (T, 1, H/factor, W/factor) float in [0, 1].

    Fractional values encode partial background coverage of a block; 1 means
    the whole block is background.
    """
    t_n, h, w = mask.frames.shape[:3]
    if factor < 1 or h % factor or w % factor:
        raise ValidationError(f"dims {h}x{w} not divisible by factor {factor}")
    m = mask.frames[..., 0].astype(np.float32)
    m = m.reshape(t_n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return torch.from_numpy(m).unsqueeze(1)


def sample_condition_frame(clip: VideoClip, rng: np.random.Generator) -> ConditionFrame:
    """Uniformly sample one full frame of the clip as the condition."""
    idx = int(rng.integers(0, clip.frames.shape[0]))
    return ConditionFrame(image=clip.frames[idx].copy(), source_index=idx)


# ---------------------------------------------------------------------------
# pixel <-> model-space conversion
# ---------------------------------------------------------------------------

def frames_to_unit(frames: np.ndarray) -> torch.Tensor:
    """uint8 (T, H, W, 3) -> float32 (T, 3, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float()
    return (x * (2.0 / 255.0) - 1.0).permute(0, 3, 1, 2).contiguous()


def unit_to_frames(x: torch.Tensor) -> np.ndarray:
    """float (T, 3, H, W) in [-1, 1] -> uint8 (T, H, W, 3)."""
    x = x.detach().clamp(-1.0, 1.0).permute(0, 2, 3, 1)
    return ((x + 1.0) * (255.0 / 2.0)).round().to(torch.uint8).numpy()


def frame_to_unit(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (H, W, 3) in [-1, 1] (channels-last)."""
    return torch.from_numpy(np.ascontiguousarray(image)).float() * (2.0 / 255.0) - 1.0


# ---------------------------------------------------------------------------
# dataset records
# ---------------------------------------------------------------------------

def pack_dataset(records: Iterable[ClipRecord], path: str | Path) -> int:
    """Write clips+masks as length-prefixed binary records; returns the count."""
    path = Path(path)
    n = 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        for rec in records:
            t_n, h, w = rec.clip.frames.shape[:3]
            if rec.mask.frames.shape[:3] != (t_n, h, w):
                raise ValidationError(f"record {n}: clip/mask shape mismatch")
            body = rec.clip.frames.tobytes() + np.packbits(rec.mask.frames[..., 0]).tobytes()
            header = _REC_HEADER.pack(t_n, h, w, 0, rec.seed, zlib.crc32(body))
            payload = header + body
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            n += 1
    return n


def load_dataset(path: str | Path) -> Iterator[ClipRecord]:
    """Yield ClipRecords from a packed file; exact inverse of pack_dataset."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) != 8 or prefix[:4] != _MAGIC:
            raise IntegrityError(f"{path}: not a clip dataset (bad magic)")
        (version,) = struct.unpack("<I", prefix[4:])
        if version != _FORMAT_VERSION:
            raise IntegrityError(f"{path}: unsupported format version {version}")
        index = 0
        while True:
            raw_len = fh.read(8)
            if not raw_len:
                return
            if len(raw_len) != 8:
                raise IntegrityError(f"record {index}: truncated length prefix")
            (payload_len,) = struct.unpack("<Q", raw_len)
            payload = fh.read(payload_len)
            if len(payload) != payload_len:
                raise IntegrityError(f"record {index}: truncated payload")
            if payload_len < _REC_HEADER.size:
                raise IntegrityError(f"record {index}: header too short")
            t_n, h, w, _, seed, crc = _REC_HEADER.unpack(payload[:_REC_HEADER.size])
            n_px = t_n * h * w
            expect = _REC_HEADER.size + n_px * 3 + (n_px + 7) // 8
            if payload_len != expect:
                raise IntegrityError(
                    f"record {index}: payload length {payload_len} != expected {expect}"
                )
            body = payload[_REC_HEADER.size:]
            if zlib.crc32(body) != crc:
                raise IntegrityError(f"record {index}: checksum mismatch")
            frames = np.frombuffer(body[: n_px * 3], dtype=np.uint8).reshape(t_n, h, w, 3)
            bits = np.unpackbits(
                np.frombuffer(body[n_px * 3:], dtype=np.uint8), count=n_px
            ).reshape(t_n, h, w, 1)
            yield ClipRecord(
                clip=VideoClip(frames=frames.copy()),
                mask=MaskSequence(frames=bits.astype(np.uint8)),
                seed=seed,
            )
            index += 1


# ---------------------------------------------------------------------------
# frame directory I/O (numbered lossless images)
# ---------------------------------------------------------------------------

def save_frames(directory: str | Path, frames: np.ndarray) -> None:
    """Write uint8 (T, H, W, C) frames as 000000.png, 000001.png, ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        arr = frame[..., 0] if frame.shape[-1] == 1 else frame
        Image.fromarray(arr).save(directory / f"{i:06d}.png")


def load_frames(directory: str | Path) -> np.ndarray:
    """Read numbered PNG frames back into uint8 (T, H, W, 3)."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ValidationError(f"no .png frames found in {directory}")
    frames = [np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8) for p in paths]
    return np.stack(frames)


def save_mask_frames(directory: str | Path, mask: MaskSequence) -> None:
    """Masks are stored 0/255 for visibility (255 = background)."""
    save_frames(directory, (mask.frames * 255).astype(np.uint8))


def load_mask_frames(directory: str | Path) -> MaskSequence:
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ValidationError(f"no .png masks found in {directory}")
    frames = [np.asarray(Image.open(p).convert("L"), dtype=np.uint8) for p in paths]
    stacked = np.stack(frames)[..., None]
    return MaskSequence(frames=(stacked > 127).astype(np.uint8))


def save_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path)


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
