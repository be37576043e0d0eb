"""Image synthesis: remote text-to-image backend or the procedural renderer.

The procedural renderer draws solid shapes (circle / square / triangle /
cross in two colors) on a noisy gray canvas and records the tight bounding
rectangle of every drawn shape. Those rectangles are oracle boxes: they
exist for evaluation and tests only and are never training signal for
image-level supervision modes.

Images are dense float arrays with axes (channel, x, y), values in [0, 1].
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .boxes import BoxF
from .errors import ArgumentError, ConfigurationError, FormatError
from .imagination import Description
from .vocab import ClassVocab, default_vocab

SHAPE_KINDS = ("circle", "square", "triangle", "cross")

# Solid fill colors; high contrast against the 0.5-gray background keeps
# segmentation-based proposals reliable at desk scale.
_COLORS = {
    "red": (0.85, 0.12, 0.12),
    "blue": (0.12, 0.20, 0.85),
    "green": (0.10, 0.75, 0.15),
}


@dataclass
class ImageSample:
    pixels: np.ndarray                      # (3, W, H) float64 in [0, 1]
    provenance: str                         # "imaginary" | "real"
    class_labels: set[int] | None = None
    gt_boxes: list[tuple[BoxF, int]] | None = None
    description: str | None = None
    seed: int | None = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ArgumentError(f"pixels must be (3, W, H), got {p.shape}")
        if p.shape[1] < 8 or p.shape[2] < 8:
            raise ArgumentError(f"image too small: {p.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ArgumentError("pixel values outside [0, 1]")
        if self.provenance not in ("imaginary", "real"):
            raise ArgumentError(f"bad provenance {self.provenance!r}")
        if self.gt_boxes is not None:
            w, h = self.width, self.height
            for box, _cid in self.gt_boxes:
                if not box.within(w, h):
                    raise ArgumentError(f"gt box {box} outside {w}x{h} image")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class SynthRequest:
    prompt: str
    seed: int
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not self.prompt:
            raise ArgumentError("prompt must be non-empty")
        if self.width < 8 or self.height < 8:
            raise ArgumentError("requested size below 8x8")


@dataclass
class ProceduralSpec:
    canvas: tuple[int, int] = (64, 64)
    shapes_per_image: tuple[int, int] = (1, 3)
    shape_classes: dict = field(default_factory=dict)   # class_id -> (kind, color name)
    background_noise: float = 0.04
    min_object_px: int = 10
    max_object_px: int = 28
    color_jitter: float = 0.0      # per-object uniform RGB offset, +/- this

    def __post_init__(self):
        if not self.shape_classes:
            self.shape_classes = default_shape_classes(default_vocab())
        if self.min_object_px < 6:
            raise ConfigurationError("min_object_px must be >= 6")
        if not 0.0 <= self.color_jitter <= 0.35:
            # Above 0.35 the red and blue class colors start to meet.
            raise ConfigurationError("color_jitter must be in [0, 0.35]")
        w, h = self.canvas
        if self.min_object_px > min(w, h) - 2:
            raise ConfigurationError(
                f"canvas {w}x{h} too small for objects of {self.min_object_px}px")
        lo, hi = self.shapes_per_image
        if not (1 <= lo <= hi):
            raise ConfigurationError("shapes_per_image must be a range within [1, n]")
        for cid, (kind, color) in self.shape_classes.items():
            if kind not in SHAPE_KINDS:
                raise ConfigurationError(f"unknown shape kind {kind!r} for class {cid}")
            if color not in _COLORS:
                raise ConfigurationError(f"unknown color {color!r} for class {cid}")


def default_shape_classes(vocab: ClassVocab) -> dict:
    """Parse "color kind" vocab names into renderer assignments."""
    mapping = {}
    for cid in vocab.ids():
        color, kind = vocab.name_of(cid).split()
        mapping[cid] = (kind, color)
    return mapping


def _shape_mask(kind: str, cx: float, cy: float, half: float, w: int, h: int) -> np.ndarray:
    """Boolean (W, H) mask of a shape centered at (cx, cy) with half-extent."""
    xs = np.arange(w, dtype=np.float64)[:, None]
    ys = np.arange(h, dtype=np.float64)[None, :]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if kind == "triangle":
        # Upward triangle: apex at (cx, cy - half), base at cy + half.
        t = (ys - (cy - half)) / (2.0 * half)        # 0 at apex, 1 at base
        inside_y = (t >= 0.0) & (t <= 1.0)
        return inside_y & (np.abs(xs - cx) <= t * half)
    if kind == "cross":
        bar = max(half / 3.0, 1.5)
        horiz = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= bar)
        vert = (np.abs(xs - cx) <= bar) & (np.abs(ys - cy) <= half)
        return horiz | vert
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _mask_bbox(mask: np.ndarray) -> BoxF:
    xs = np.flatnonzero(mask.any(axis=1))
    ys = np.flatnonzero(mask.any(axis=0))
    return BoxF(float(xs[0]), float(ys[0]), float(xs[-1] + 1), float(ys[-1] + 1))


def procedural_scene(spec: ProceduralSpec, target_class: int,
                     rng: np.random.Generator) -> ImageSample:
    """Render one scene containing the target class plus optional distractors.

    Shapes never overlap, so each recorded box stays the tight bounding
    rectangle of that shape's rendered pixels.
    """
    if target_class not in spec.shape_classes:
        raise ArgumentError(f"target class {target_class} has no shape assignment")
    w, h = spec.canvas
    amp = spec.background_noise
    base = 0.5 + rng.uniform(-amp, amp, size=(3, w, h))
    pixels = np.clip(base, 0.0, 1.0)

    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    keys = sorted(spec.shape_classes)
    class_ids = [target_class] + [
        keys[i] for i in rng.integers(0, len(keys), size=n_shapes - 1)
    ]

    occupied = np.zeros((w, h), dtype=bool)
    gt: list[tuple[BoxF, int]] = []
    for k, cid in enumerate(class_ids):
        kind, color = spec.shape_classes[cid]
        placed = False
        for _attempt in range(40):
            half = rng.uniform(spec.min_object_px / 2.0, spec.max_object_px / 2.0)
            cx = rng.uniform(half + 1.0, w - half - 1.0)
            cy = rng.uniform(half + 1.0, h - half - 1.0)
            mask = _shape_mask(kind, cx, cy, half, w, h)
            if not mask.any():
                continue
            grown = np.zeros_like(mask)
            box = _mask_bbox(mask)
            gx1 = max(int(box.x1) - 2, 0)
            gy1 = max(int(box.y1) - 2, 0)
            gx2 = min(int(box.x2) + 2, w)
            gy2 = min(int(box.y2) + 2, h)
            grown[gx1:gx2, gy1:gy2] = True
            if (grown & occupied).any():
                continue
            col = np.asarray(_COLORS[color], dtype=np.float64)
            if spec.color_jitter > 0.0:
                col = np.clip(col + rng.uniform(-spec.color_jitter,
                                                spec.color_jitter, size=3),
                              0.0, 1.0)
            pixels[:, mask] = col[:, None]
            occupied |= grown
            gt.append((box, cid))
            placed = True
            break
        if not placed and k == 0:
            # The target must appear; shrink until it fits anywhere.
            half = spec.min_object_px / 2.0
            cx, cy = w / 2.0, h / 2.0
            mask = _shape_mask(kind, cx, cy, half, w, h)
            pixels[:, mask] = np.asarray(_COLORS[color], dtype=np.float64)[:, None]
            occupied |= mask
            gt.append((_mask_bbox(mask), cid))

    return ImageSample(
        pixels=pixels,
        provenance="imaginary",
        class_labels={cid for _box, cid in gt},
        gt_boxes=gt,
        seed=None,
    )


# --- PNG round trip -------------------------------------------------------

def pixels_to_png_bytes(pixels: np.ndarray) -> bytes:
    """Quantize to 8-bit PNG; deterministic for identical pixel data."""
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(np.transpose(arr, (2, 1, 0)), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_pixels(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img = img.convert("RGB")
    except Exception as exc:
        raise FormatError(f"undecodable image payload: {exc}") from exc
    arr = np.asarray(img, dtype=np.float64) / 255.0    # (H, W, 3)
    return np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))


# --- backends -------------------------------------------------------------

@dataclass
class SynthClient:
    """Text-to-image client: "procedural" or an http(s) endpoint."""
    endpoint: str = "procedural"
    request_timeout: float = 30.0
    retries: int = 3
    retry_backoff: float = 0.25
    procedural: ProceduralSpec = field(default_factory=ProceduralSpec)

    @property
    def is_procedural(self) -> bool:
        return self.endpoint == "procedural"


def synthesize(client: SynthClient, desc: Description, request: SynthRequest) -> ImageSample:
    """Produce one imaginary image for the description.

    Procedural backend: deterministic render keyed by the request seed, with
    oracle boxes. Remote backend: wire-protocol call, no boxes.
    """
    if client.is_procedural:
        spec = client.procedural
        if spec.canvas != (request.width, request.height):
            spec = ProceduralSpec(
                canvas=(request.width, request.height),
                shapes_per_image=spec.shapes_per_image,
                shape_classes=spec.shape_classes,
                background_noise=spec.background_noise,
                min_object_px=spec.min_object_px,
                max_object_px=spec.max_object_px,
                color_jitter=spec.color_jitter,
            )
        # Sub-stream 1 of the sample seed; stream 0 is the class draw upstream.
        rng = np.random.default_rng([int(request.seed), 1])
        sample = procedural_scene(spec, desc.class_id, rng)
        sample.description = desc.text
        sample.seed = int(request.seed)
        return sample

    from .imagination import _post_json  # shared retry/transport policy

    body = _post_json(
        client.endpoint.rstrip("/") + "/synthesize",
        {"prompt": desc.text, "seed": int(request.seed),
         "width": int(request.width), "height": int(request.height)},
        client.request_timeout, client.retries, client.retry_backoff,
    )
    b64 = body.get("image_png_b64")
    if not isinstance(b64, str):
        raise FormatError("/synthesize response missing string field 'image_png_b64'")
    try:
        raw = base64.b64decode(b64, validate=True)
    except Exception as exc:
        raise FormatError(f"invalid base64 image payload: {exc}") from exc
    pixels = png_bytes_to_pixels(raw)
    if pixels.shape[1] != request.width or pixels.shape[2] != request.height:
        raise FormatError(
            f"backend returned {pixels.shape[1]}x{pixels.shape[2]}, "
            f"requested {request.width}x{request.height}")
    return ImageSample(
        pixels=pixels,
        provenance="imaginary",
        class_labels={desc.class_id},
        gt_boxes=None,
        description=desc.text,
        seed=int(request.seed),
    )
