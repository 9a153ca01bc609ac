"""Seeded synthetic multi-object scenes with exact instance and class masks.

Shapes are rasterised hard-edged (a pixel belongs to a shape iff its centre
lies inside it) and painted back to front, so the visible instance mask of
every object is known exactly.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError, SpecError

SHAPES = ("circle", "square", "triangle")
CLASS_IDS = {name: k + 1 for k, name in enumerate(SHAPES)}
HEADER_PREFIX = "SCENES v1"

DEFAULT_PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.95, 0.95, 0.95),
)


@dataclass
class SceneSpec:
    canvas: tuple = (32, 32)
    n_objects: tuple = (3, 3)
    shapes: tuple = SHAPES
    palette: tuple = DEFAULT_PALETTE
    size: tuple = (8, 14)
    allow_occlusion: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    min_visible: int = 1
    max_tries: int = 200

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.n_objects = tuple(int(v) for v in self.n_objects)
        self.size = tuple(int(v) for v in self.size)
        self.shapes = tuple(self.shapes)
        self.palette = tuple(tuple(float(c) for c in col) for col in self.palette)
        self.background = tuple(float(c) for c in self.background)
        self.validate()

    def validate(self) -> None:
        H, W = self.canvas
        lo, hi = self.n_objects
        if H < 1 or W < 1:
            raise SpecError("canvas must be positive")
        if not 1 <= lo <= hi:
            raise SpecError(f"object count range {self.n_objects} is invalid")
        if not 1 <= self.size[0] <= self.size[1]:
            raise SpecError(f"size range {self.size} is invalid")
        if self.size[1] > min(H, W):
            raise SpecError(f"objects of size {self.size[1]} do not fit a {H}x{W} canvas")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise SpecError(f"unknown shapes {sorted(unknown)}")
        if not self.palette:
            raise SpecError("palette is empty")
        for col in self.palette + (self.background,):
            if len(col) != 3 or not all(0.0 <= c <= 1.0 for c in col):
                raise SpecError(f"bad colour {col}")
        if self.min_visible < 1:
            raise SpecError("min_visible must be at least 1")
        if self.background in self.palette:
            raise SpecError("background colour must not appear in the palette")

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"scene spec is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise SpecError("scene spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise SpecError(f"unknown scene spec keys {sorted(extra)}")
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float32
    instance_masks: np.ndarray  # (H, W) uint16
    class_masks: np.ndarray  # (H, W) uint16

    @property
    def n_objects(self) -> int:
        return int(self.instance_masks.max())


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3) float32
    instances: np.ndarray  # (n, H, W) uint16
    classes: np.ndarray  # (n, H, W) uint16

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def canvas(self) -> tuple:
        return self.images.shape[1], self.images.shape[2]

    def __getitem__(self, k: int) -> SceneSample:
        return SceneSample(self.images[k], self.instances[k], self.classes[k])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.instances[index], self.classes[index])


def rasterize(shape: str, cy: float, cx: float, size: float, canvas: tuple) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside the shape."""
    H, W = canvas
    yy, xx = np.mgrid[0:H, 0:W]
    py, px = yy + 0.5, xx + 0.5
    half = size / 2.0
    if shape == "circle":
        return (py - cy) ** 2 + (px - cx) ** 2 <= half * half
    if shape == "square":
        return (np.abs(py - cy) <= half) & (np.abs(px - cx) <= half)
    if shape == "triangle":
        # upright isosceles triangle inscribed in the size x size box
        top, bottom = cy - half, cy + half
        frac = (py - top) / size
        return (py >= top) & (py <= bottom) & (np.abs(px - cx) <= frac * half)
    raise SpecError(f"unknown shape {shape!r}")


def _sample_one(spec: SceneSpec, rng: np.random.Generator):
    H, W = spec.canvas
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    replace = len(spec.palette) < n
    colours = rng.choice(len(spec.palette), size=n, replace=replace)
    placed = []
    owner = np.zeros((H, W), dtype=np.int64)
    for k in range(1, n + 1):
        for _ in range(spec.max_tries):
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            size = float(rng.integers(spec.size[0], spec.size[1] + 1))
            cy = float(rng.uniform(size / 2.0, H - size / 2.0))
            cx = float(rng.uniform(size / 2.0, W - size / 2.0))
            mask = rasterize(shape, cy, cx, size, spec.canvas)
            if mask.sum() < spec.min_visible:
                continue
            if not spec.allow_occlusion and (mask & (owner > 0)).any():
                continue
            trial = np.where(mask, k, owner)
            visible = np.bincount(trial.ravel(), minlength=k + 1)[1:k]
            if np.any(visible < spec.min_visible):
                continue
            break
        else:
            raise SpecError("could not place all objects within max_tries; relax the spec")
        owner = trial
        placed.append((shape, mask, spec.palette[int(colours[k - 1])]))
    return placed


def render(spec: SceneSpec, placed) -> SceneSample:
    H, W = spec.canvas
    image = np.empty((H, W, 3), dtype=np.float32)
    image[:] = np.asarray(spec.background, dtype=np.float32)
    owner = np.zeros((H, W), dtype=np.int64)
    for k, (_, mask, colour) in enumerate(placed, start=1):
        image[mask] = np.asarray(colour, dtype=np.float32)
        owner[mask] = k
    instances = np.zeros((H, W), dtype=np.uint16)
    classes = np.zeros((H, W), dtype=np.uint16)
    label = 0
    for k, (shape, _, _) in enumerate(placed, start=1):
        visible = owner == k
        if not visible.any():
            continue
        label += 1
        instances[visible] = label
        classes[visible] = CLASS_IDS[shape]
    return SceneSample(image, instances, classes)


def generate(spec: SceneSpec, count: int) -> Dataset:
    """Render ``count`` scenes; sample ``k`` uses the stream ``(seed, k)``."""
    if count < 0:
        raise SpecError("count must be non-negative")
    spec.validate()
    H, W = spec.canvas
    images = np.empty((count, H, W, 3), dtype=np.float32)
    instances = np.empty((count, H, W), dtype=np.uint16)
    classes = np.empty((count, H, W), dtype=np.uint16)
    for k in range(count):
        rng = np.random.default_rng([spec.seed, k])
        sample = render(spec, _sample_one(spec, rng))
        images[k], instances[k], classes[k] = sample.image, sample.instance_masks, sample.class_masks
    return Dataset(images, instances, classes)


# ---------------------------------------------------------------------------
# binary format


def dumps(data: Dataset) -> bytes:
    n, (H, W) = len(data), data.canvas
    out = io.BytesIO()
    out.write(f"{HEADER_PREFIX} {n} {H} {W}\n".encode("ascii"))
    for k in range(n):
        planes = np.ascontiguousarray(np.moveaxis(data.images[k], -1, 0), dtype="<f4")
        out.write(planes.tobytes())
        out.write(np.ascontiguousarray(data.instances[k], dtype="<u2").tobytes())
        out.write(np.ascontiguousarray(data.classes[k], dtype="<u2").tobytes())
    return out.getvalue()


def loads(blob: bytes) -> Dataset:
    nl = blob.find(b"\n")
    if nl < 0 or nl > 64:
        raise FormatError("missing SCENES header")
    parts = blob[:nl].decode("ascii", errors="replace").split(" ")
    if len(parts) != 5 or " ".join(parts[:2]) != HEADER_PREFIX:
        raise FormatError(f"unsupported dataset header {blob[:nl]!r}")
    try:
        n, H, W = (int(v) for v in parts[2:])
    except ValueError:
        raise FormatError("non-integer dataset header fields") from None
    per = H * W * (3 * 4 + 2 + 2)
    body = memoryview(blob)[nl + 1:]
    if n < 0 or H < 1 or W < 1 or len(body) != n * per:
        raise FormatError(f"dataset body has {len(body)} bytes, expected {n * per}")
    images = np.empty((n, H, W, 3), dtype=np.float32)
    instances = np.empty((n, H, W), dtype=np.uint16)
    classes = np.empty((n, H, W), dtype=np.uint16)
    img_bytes, grid_bytes = H * W * 12, H * W * 2
    for k in range(n):
        base = k * per
        planes = np.frombuffer(body[base:base + img_bytes], dtype="<f4").reshape(3, H, W)
        images[k] = np.moveaxis(planes, 0, -1)
        base += img_bytes
        instances[k] = np.frombuffer(body[base:base + grid_bytes], dtype="<u2").reshape(H, W)
        base += grid_bytes
        classes[k] = np.frombuffer(body[base:base + grid_bytes], dtype="<u2").reshape(H, W)
    return Dataset(images, instances, classes)


def save(data: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(data))


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads(fh.read())
