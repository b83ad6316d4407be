"""Contour datasets: container, on-disk layout and a synthetic generator.

On disk a dataset is a directory holding ``manifest.json`` plus, per item,
``img_<id>.pgm`` (8-bit binary PGM) and ``contour_<id>.csv`` (one ``x,y``
line per vertex, 17 significant digits).
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import fmt_float, read_json, write_json
from ._validation import standardize_images

__all__ = [
    "DatasetFormatError",
    "ShapeDataset",
    "SynthConfig",
    "generate",
    "load",
    "save",
    "read_pgm",
    "write_pgm",
]

_ID = re.compile(r"^[a-z0-9]+$")


class DatasetFormatError(ValueError):
    def __init__(self, path, message: str, line: int | None = None, offset: int | None = None):
        self.path, self.line, self.offset = str(path), line, offset
        where = f":{line}" if line is not None else f" @ byte {offset}" if offset is not None else ""
        super().__init__(f"{path}{where}: {message}")


@dataclass
class ShapeDataset:
    """Images paired with corresponding-vertex contours.

    ``images`` maps id -> (H, W) uint8 array; ``contours`` maps id -> (2V,)
    float array in pixels. ``splits`` maps split name -> list of ids.
    """

    images: dict[str, np.ndarray]
    contours: dict[str, np.ndarray]
    spacing: float = 1.8
    splits: dict[str, list[str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def ids(self) -> list[str]:
        return list(self.images)

    @property
    def vertex_count(self) -> int:
        return len(next(iter(self.contours.values()))) // 2

    @property
    def image_shape(self) -> tuple[int, int]:
        return next(iter(self.images.values())).shape

    def validate(self) -> None:
        if set(self.images) != set(self.contours):
            raise ValueError("images and contours must share the same ids")
        if not self.images:
            raise ValueError("dataset is empty")
        lengths = {}
        for i, c in self.contours.items():
            if not _ID.match(i):
                raise ValueError(f"id {i!r} is not lowercase alphanumeric")
            lengths.setdefault(len(c), i)
        if len(lengths) > 1 or next(iter(lengths)) % 2:
            first = next(iter(self.contours))
            expected = len(self.contours[first])
            bad = next(i for i, c in self.contours.items() if len(c) != expected) if len(lengths) > 1 else first
            raise ValueError(f"item {bad!r} has a different vertex count")
        shapes = {im.shape for im in self.images.values()}
        if len(shapes) > 1:
            raise ValueError(f"images have mixed shapes: {sorted(shapes)}")
        seen: set[str] = set()
        for name, members in self.splits.items():
            unknown = set(members) - set(self.images)
            if unknown:
                raise ValueError(f"split {name!r} references unknown ids {sorted(unknown)[:3]}")
            if seen & set(members):
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= set(members)

    def split(self, name: str | None = None) -> tuple[list[str], np.ndarray, np.ndarray]:
        """(ids, standardized float images (N, H, W), contours (N, 2V))."""
        ids = self.ids if name is None else list(self.splits[name])
        if not ids:
            raise ValueError(f"split {name!r} is empty")
        images = standardize_images(np.stack([self.images[i] for i in ids]).astype(np.float64))
        contours = np.stack([self.contours[i] for i in ids])
        return ids, images, contours

    def split_hash(self, name: str) -> str:
        """Content hash of a split's ids and contour coordinates."""
        h = hashlib.sha256()
        for i in self.splits[name]:
            h.update(i.encode())
            h.update(np.ascontiguousarray(self.contours[i], dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ShapeDataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.spacing == other.spacing
            and self.splits == other.splits
            and all(np.array_equal(self.images[i], other.images[i]) for i in self.ids)
            and all(np.array_equal(self.contours[i], other.contours[i]) for i in self.ids)
        )


# -- PGM ----------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("PGM output needs a 2-D uint8 array")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(path, "truncated PGM header", offset=pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise DatasetFormatError(path, f"not a binary PGM (magic {fields[0]!r})", offset=0)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetFormatError(path, "non-integer PGM header field", offset=pos) from None
    if maxval != 255:
        raise DatasetFormatError(path, f"only 8-bit PGM is supported (maxval {maxval})", offset=pos)
    pos += 1  # single whitespace byte after maxval
    data = raw[pos:]
    if len(data) != w * h:
        raise DatasetFormatError(path, f"expected {w * h} pixel bytes, found {len(data)}", offset=pos + len(data))
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# -- contours CSV ---------------------------------------------------------------


def _write_contour(path, contour: np.ndarray) -> None:
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    Path(path).write_text("".join(f"{fmt_float(x)},{fmt_float(y)}\n" for x, y in pts))


def _read_contour(path) -> np.ndarray:
    values = []
    text = Path(path).read_text()
    for n, line in enumerate(text.splitlines(), start=1):
        parts = line.split(",")
        if len(parts) != 2:
            raise DatasetFormatError(path, f"expected 'x,y', got {line!r}", line=n)
        try:
            values.extend(float(p) for p in parts)
        except ValueError:
            raise DatasetFormatError(path, f"not a number in {line!r}", line=n) from None
    if text and not text.endswith("\n"):
        raise DatasetFormatError(path, "truncated file (missing final newline)", line=len(text.splitlines()))
    if not values:
        raise DatasetFormatError(path, "no vertices", line=1)
    return np.array(values, dtype=np.float64)


# -- directory I/O ----------------------------------------------------------------


def save(dataset: ShapeDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in dataset.ids:
        write_pgm(directory / f"img_{i}.pgm", dataset.images[i])
        _write_contour(directory / f"contour_{i}.csv", dataset.contours[i])
    h, w = dataset.image_shape
    write_json(
        directory / "manifest.json",
        {
            "format": "probcontour-dataset/1",
            "spacing": dataset.spacing,
            "vertex_count": dataset.vertex_count,
            "image_shape": [h, w],
            "ids": dataset.ids,
            "splits": dataset.splits,
            "meta": dataset.meta,
        },
    )
    return directory


def load(directory) -> ShapeDataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = read_json(mpath)
    except FileNotFoundError:
        raise DatasetFormatError(mpath, "missing manifest") from None
    except ValueError as exc:
        raise DatasetFormatError(mpath, f"invalid JSON: {exc}", line=getattr(exc, "lineno", None)) from None
    for key in ("spacing", "vertex_count", "ids", "splits"):
        if key not in manifest:
            raise DatasetFormatError(mpath, f"manifest lacks {key!r}")
    v = int(manifest["vertex_count"])
    images, contours = {}, {}
    for i in manifest["ids"]:
        images[i] = read_pgm(directory / f"img_{i}.pgm")
        c = _read_contour(directory / f"contour_{i}.csv")
        if len(c) != 2 * v:
            short = len(c) < 2 * v
            raise DatasetFormatError(
                directory / f"contour_{i}.csv",
                f"item {i!r} has {len(c) // 2} vertices, expected {v}" + (" (truncated?)" if short else ""),
                line=len(c) // 2 + 1 if short else v + 1,
            )
        contours[i] = c
    return ShapeDataset(
        images, contours, float(manifest["spacing"]), {k: list(m) for k, m in manifest["splits"].items()},
        manifest.get("meta", {}),
    )


# -- synthetic generator -----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic ring-shaped "myocardium" generator.

    Radii, thickness and amplitudes are in pixels. ``harmonic_amplitudes[k-1]``
    bounds the amplitude of the k-th radial harmonic; each subject draws its
    own amplitude uniformly in ``[0, bound]`` and a uniform phase.
    """

    count: int = 600
    seed: int = 0
    image_size: tuple[int, int] = (60, 60)
    vertex_count: int = 50
    radius_range: tuple[float, float] = (12.0, 18.0)
    thickness_range: tuple[float, float] = (3.0, 6.0)
    harmonic_amplitudes: tuple[float, ...] = (1.0, 1.5, 1.0, 0.5)
    center_shift: float = 0.15
    background: float = 0.2
    contrast: float = 0.6
    noise_std: float = 0.05
    supersample: int = 4
    spacing: float = 1.8
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    max_retries: int = 100

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.vertex_count < 3:
            raise ValueError("vertex_count must be >= 3")
        if min(self.radius_range) <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ValueError("radius_range must be positive and ordered")
        if min(self.thickness_range) <= 0 or self.thickness_range[0] > self.thickness_range[1]:
            raise ValueError("thickness_range must be positive and ordered")
        if self.radius_range[0] <= sum(self.harmonic_amplitudes):
            raise ValueError("harmonic amplitudes could make the radius non-positive")
        if len(self.harmonic_amplitudes) > 4:
            raise ValueError("at most 4 harmonics are supported")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be non-negative and sum to 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _radius(theta, r0, amps, phases):
    k = np.arange(1, len(amps) + 1)
    return r0 + (np.asarray(amps) * np.cos(np.multiply.outer(theta, k) + phases)).sum(axis=-1)


def _render(cfg: SynthConfig, center, r0, amps, phases, thickness, rng) -> np.ndarray:
    h, w = cfg.image_size
    s = cfg.supersample
    off = (np.arange(s) + 0.5) / s
    yy = (np.arange(h)[:, None] + off[None, :]).ravel()
    xx = (np.arange(w)[:, None] + off[None, :]).ravel()
    dx = xx[None, :] - center[0]
    dy = yy[:, None] - center[1]
    rho = np.hypot(dx, dy)
    outer = _radius(np.arctan2(dy, dx), r0, amps, phases)
    ring = (rho <= outer) & (rho >= outer - thickness)
    cover = ring.reshape(h, s, w, s).mean(axis=(1, 3))
    img = cfg.background + cfg.contrast * cover
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=(h, w))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate(cfg: SynthConfig) -> ShapeDataset:
    """Draw ``cfg.count`` subjects; every subject has its own seeded substream.

    Vertex ``i`` sits on the ray at angle ``2*pi*i/V`` from the subject's
    centre, so vertices correspond across subjects.
    """
    h, w = cfg.image_size
    theta = 2.0 * np.pi * np.arange(cfg.vertex_count) / cfg.vertex_count
    nh = len(cfg.harmonic_amplitudes)
    images, contours = {}, {}
    width = max(4, len(str(cfg.count - 1)))
    for n in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, n])
        for _ in range(cfg.max_retries):
            shift = rng.uniform(-cfg.center_shift, cfg.center_shift, size=2) * np.array([w, h])
            center = np.array([w / 2.0, h / 2.0]) + shift
            r0 = rng.uniform(*cfg.radius_range)
            amps = rng.uniform(0.0, 1.0, size=nh) * np.asarray(cfg.harmonic_amplitudes)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=nh)
            thickness = rng.uniform(*cfg.thickness_range)
            r = _radius(theta, r0, amps, phases)
            pts = np.column_stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)])
            if pts.min() >= 0.0 and pts[:, 0].max() <= w and pts[:, 1].max() <= h:
                break
        else:
            raise RuntimeError(f"subject {n}: contour left the image after {cfg.max_retries} retries")
        sid = f"s{n:0{width}d}"
        contours[sid] = pts.ravel()
        images[sid] = _render(cfg, center, r0, amps, phases, min(thickness, r0 - 1.0), rng)

    ids = list(images)
    order = np.random.default_rng([cfg.seed, cfg.count, 7]).permutation(len(ids))
    n_train = int(round(cfg.split_fractions[0] * len(ids)))
    n_val = int(round(cfg.split_fractions[1] * len(ids)))
    picked = [ids[i] for i in order]
    splits = {
        "train": sorted(picked[:n_train]),
        "val": sorted(picked[n_train : n_train + n_val]),
        "test": sorted(picked[n_train + n_val :]),
    }
    return ShapeDataset(images, contours, cfg.spacing, splits, {"synth": _jsonable(cfg.to_dict())})


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d
