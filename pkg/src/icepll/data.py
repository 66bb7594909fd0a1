"""Patch datasets: synthetic generation, scene ingestion, filtering, splitting.

On-disk formats
---------------
Raster: a JSON header ``{width, height, channels, pixel_spacing_m, data}``
where ``data`` names a sidecar of little-endian float32 values stored
channel-major (all of channel 0, then channel 1, ...).

Annotations: a JSON header ``{width, height, polygon_ids, border, polygons}``.
``polygon_ids`` is a sidecar of little-endian int32 per pixel (negative =
no polygon), ``border`` a float32 sidecar of distance-to-border in meters,
``polygons`` a polygon label file (see :mod:`icepll.labels`). If ``border``
is omitted it is computed from the id grid.

Datasets: ``manifest.json`` listing the sample archive(s) and the split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .labels import (
    CLASS_TO_SOD,
    N_CLASSES,
    EggCode,
    IceClass,
    LabelKind,
    encode_all,
    midpoint,
    parse_concentration_code,
    read_polygon_file,
    sod_code_to_class,
    write_polygon_file,
)


class DataError(ValueError):
    pass


class InvalidSpec(DataError):
    pass


class FormatError(DataError):
    pass


class ChannelCountError(DataError):
    pass


class InvalidRatios(DataError):
    pass


class EmptyDataset(DataError):
    pass


@dataclass(frozen=True)
class PatchSample:
    pixels: np.ndarray = field(repr=False)  # (3, H, W) float32
    labels: dict = field(repr=False)  # LabelKind -> LabelVector
    polygon_id: int
    ca_fraction: float
    border_distance: float
    egg: Optional[EggCode] = None


def make_sample(pixels, egg: EggCode, polygon_id: int, border_distance: float) -> PatchSample:
    if egg.ice_free:
        ca = 1.0
    else:
        ca = midpoint(parse_concentration_code(egg.ca)) if egg.ca is not None else 0.0
    return PatchSample(np.asarray(pixels, dtype=np.float32), encode_all(egg), int(polygon_id),
                       float(ca), float(border_distance), egg)


# -- synthetic ------------------------------------------------------------------

# (HH, HV, incidence-angle) analogs per class in [NI, N, YI, FYI, OI, W] order
DEFAULT_MEANS = (
    (-1.0, -1.0, 0.5),
    (-0.6, -0.7, 0.2),
    (0.5, -0.5, 0.0),
    (0.0, 0.5, -0.5),
    (1.0, 1.0, 0.5),
    (-0.5, -1.5, -1.0),
)
DEFAULT_STDS = (
    (3.6, 3.6, 3.0),
    (4.8, 3.0, 3.0),
    (4.2, 4.2, 3.0),
    (3.6, 4.8, 3.0),
    (5.4, 3.6, 3.0),
    (2.4, 2.4, 3.0),
)
DESK_FREQUENCIES = (0.40, 0.05, 0.10, 0.08, 0.25, 0.12)


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian textures on randomly labeled polygons.

    ``primary_codes``/``secondary_codes`` map concentration codes to
    probabilities for the oldest and second-oldest type. A secondary type is
    always younger than the primary one and never water.
    """

    channel_means: tuple = DEFAULT_MEANS
    channel_stds: tuple = DEFAULT_STDS
    class_frequencies: tuple = DESK_FREQUENCIES
    two_type_fraction: float = 0.5
    primary_codes: dict = field(default_factory=lambda: {79: 0.4, 89: 0.3, 99: 0.3})
    secondary_codes: dict = field(default_factory=lambda: {12: 0.3, 13: 0.3, 24: 0.4})
    patch_size: int = 16
    n_samples: int = 6000
    border_range_m: tuple = (2000.0, 20000.0)

    def validate(self) -> None:
        means = np.asarray(self.channel_means, dtype=float)
        stds = np.asarray(self.channel_stds, dtype=float)
        freq = np.asarray(self.class_frequencies, dtype=float)
        if means.shape != (N_CLASSES, 3) or stds.shape != (N_CLASSES, 3):
            raise InvalidSpec("channel means/stds must be 6x3")
        if np.any(stds <= 0):
            raise InvalidSpec("channel std devs must be positive")
        if freq.shape != (N_CLASSES,) or np.any(freq < 0) or abs(freq.sum() - 1.0) > 1e-9:
            raise InvalidSpec("class frequencies must be 6 nonnegative values summing to 1")
        if not 0.0 <= self.two_type_fraction <= 1.0:
            raise InvalidSpec("two_type_fraction must be in [0, 1]")
        for name in ("primary_codes", "secondary_codes"):
            codes = getattr(self, name)
            if not codes or abs(sum(codes.values()) - 1.0) > 1e-9 or min(codes.values()) < 0:
                raise InvalidSpec(f"{name} probabilities must be nonnegative and sum to 1")
            for c in codes:
                try:
                    parse_concentration_code(int(c))
                except ValueError as exc:
                    raise InvalidSpec(str(exc)) from None
        if self.patch_size < 1 or self.n_samples < 0:
            raise InvalidSpec("patch_size must be >= 1 and n_samples >= 0")
        lo, hi = self.border_range_m
        if not 0 <= lo <= hi:
            raise InvalidSpec("border_range_m must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primary_codes"] = {str(k): v for k, v in self.primary_codes.items()}
        d["secondary_codes"] = {str(k): v for k, v in self.secondary_codes.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("primary_codes", "secondary_codes"):
            if key in d:
                d[key] = {int(k): float(v) for k, v in d[key].items()}
        for key in ("channel_means", "channel_stds"):
            if key in d:
                d[key] = tuple(tuple(float(x) for x in row) for row in d[key])
        for key in ("class_frequencies", "border_range_m"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


def _draw_code(rng, codes: dict) -> int:
    keys = sorted(codes)
    probs = np.array([codes[k] for k in keys], dtype=float)
    return int(keys[rng.choice(len(keys), p=probs / probs.sum())])


def _draw_polygon(rng, spec: SyntheticSpec) -> EggCode:
    freq = np.asarray(spec.class_frequencies, dtype=float)
    primary = IceClass(int(rng.choice(N_CLASSES, p=freq / freq.sum())))
    if primary == IceClass.Water:
        return EggCode(ice_free=True)
    ca = _draw_code(rng, spec.primary_codes)
    younger = np.arange(int(primary))
    if younger.size and rng.random() < spec.two_type_fraction:
        w = freq[younger]
        w = np.full(younger.size, 1.0) if w.sum() == 0 else w
        secondary = IceClass(int(rng.choice(younger, p=w / w.sum())))
        cb = _draw_code(rng, spec.secondary_codes)
        return EggCode(sa=CLASS_TO_SOD[primary], ca=ca, sb=CLASS_TO_SOD[secondary], cb=cb)
    return EggCode(sa=CLASS_TO_SOD[primary], ca=ca)


def render_patch(rng, egg: EggCode, spec: SyntheticSpec) -> np.ndarray:
    """Gaussian texture of the primary class; the secondary class fills the
    top rows in proportion to its midpoint concentration."""
    size = spec.patch_size
    means = np.asarray(spec.channel_means, dtype=float)
    stds = np.asarray(spec.channel_stds, dtype=float)
    rows = np.full(size, IceClass.Water if egg.ice_free else int(sod_code_to_class(egg.sa)))
    if egg.sb is not None:
        n_sec = int(round(midpoint(parse_concentration_code(egg.cb)) * size))
        rows[:n_sec] = int(sod_code_to_class(egg.sb))
    noise = rng.standard_normal((3, size, size))
    mu = means[rows].T[:, :, None]  # (3, size, 1)
    sd = stds[rows].T[:, :, None]
    return (mu + sd * noise).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[PatchSample]:
    """One independent RNG stream per sample index, so the output does not
    depend on generation order."""
    spec.validate()
    streams = np.random.SeedSequence(seed).spawn(spec.n_samples)
    lo, hi = spec.border_range_m
    out = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        egg = _draw_polygon(rng, spec)
        pixels = render_patch(rng, egg, spec)
        border = float(rng.uniform(lo, hi))
        out.append(make_sample(pixels, egg, i, border))
    return out


# -- scene files -----------------------------------------------------------------


def write_scene(prefix, raster, polygon_ids, polygons: dict, border=None, pixel_spacing: float = 40.0):
    """Write a raster + annotation pair; returns ``(raster_header, annotation_header)`` paths."""
    prefix = Path(prefix)
    raster = np.asarray(raster, dtype="<f4")
    if raster.ndim != 3:
        raise FormatError("raster must be (channels, height, width)")
    c, h, w = raster.shape
    ids = np.asarray(polygon_ids, dtype="<i4")
    if ids.shape != (h, w):
        raise FormatError("polygon id grid must match raster height/width")
    base = prefix.name
    (prefix.parent / f"{base}.raster.f32").write_bytes(raster.tobytes())
    rheader = {"width": w, "height": h, "channels": c, "pixel_spacing_m": pixel_spacing,
               "data": f"{base}.raster.f32"}
    rpath = prefix.parent / f"{base}.raster.json"
    rpath.write_text(json.dumps(rheader, indent=1))

    (prefix.parent / f"{base}.ids.i32").write_bytes(ids.tobytes())
    write_polygon_file(prefix.parent / f"{base}.polygons.json", polygons)
    aheader = {"width": w, "height": h, "polygon_ids": f"{base}.ids.i32",
               "polygons": f"{base}.polygons.json"}
    if border is not None:
        b = np.asarray(border, dtype="<f4")
        if b.shape != (h, w):
            raise FormatError("border grid must match raster height/width")
        (prefix.parent / f"{base}.border.f32").write_bytes(b.tobytes())
        aheader["border"] = f"{base}.border.f32"
    apath = prefix.parent / f"{base}.annotations.json"
    apath.write_text(json.dumps(aheader, indent=1))
    return rpath, apath


def _read_header(path, required):
    try:
        header = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read header {path}: {exc}") from None
    missing = [k for k in required if k not in header]
    if missing:
        raise FormatError(f"{path}: missing header fields {missing}")
    return header


def _read_grid(path, dtype, count):
    try:
        arr = np.fromfile(path, dtype=dtype)
    except OSError as exc:
        raise FormatError(str(exc)) from None
    if arr.size != count:
        raise FormatError(f"{path}: expected {count} values, found {arr.size}")
    return arr


def read_raster(path) -> tuple[np.ndarray, dict]:
    header = _read_header(path, ("width", "height", "channels", "data"))
    w, h, c = int(header["width"]), int(header["height"]), int(header["channels"])
    if c != 3:
        raise ChannelCountError(f"raster has {c} channels, expected 3")
    data = _read_grid(Path(path).parent / header["data"], "<f4", c * h * w)
    return data.reshape(c, h, w), header


def border_distance_grid(ids: np.ndarray, pixel_spacing: float) -> np.ndarray:
    """Distance in meters from each pixel to the nearest pixel of a different polygon.

    Pixels of a scene containing a single polygon get ``inf``.
    """
    from scipy import ndimage

    out = np.full(ids.shape, np.inf)
    for pid in np.unique(ids):
        inside = ids == pid
        if inside.all():
            continue
        # distance to nearest outside pixel, minus half a pixel to land on the boundary
        d = ndimage.distance_transform_edt(inside) - 0.5
        out[inside] = d[inside] * pixel_spacing
    return out


def ingest_scene(raster, annotations, patch: int = 50, pixel_spacing: Optional[float] = None) -> list[PatchSample]:
    """Tile a raster into non-overlapping ``patch x patch`` tiles (edge
    remainders dropped) and label each by the polygon under its center pixel.

    Tiles whose center pixel carries no polygon (negative id) are skipped.
    """
    pixels, rheader = read_raster(raster)
    c, h, w = pixels.shape
    aheader = _read_header(annotations, ("width", "height", "polygon_ids", "polygons"))
    if (int(aheader["width"]), int(aheader["height"])) != (w, h):
        raise FormatError("annotation grid size differs from raster")
    if pixel_spacing is None:
        pixel_spacing = float(rheader.get("pixel_spacing_m", 40.0))
    elif "pixel_spacing_m" in rheader and not math.isclose(float(rheader["pixel_spacing_m"]), pixel_spacing):
        raise FormatError(f"pixel spacing {pixel_spacing} m disagrees with raster header "
                          f"{rheader['pixel_spacing_m']} m")
    base = Path(annotations).parent
    ids = _read_grid(base / aheader["polygon_ids"], "<i4", h * w).reshape(h, w)
    if "border" in aheader:
        border = _read_grid(base / aheader["border"], "<f4", h * w).reshape(h, w).astype(np.float64)
    else:
        border = border_distance_grid(ids, pixel_spacing)
    polygons = read_polygon_file(base / aheader["polygons"])
    if patch < 1:
        raise FormatError("patch size must be positive")

    out = []
    half = patch // 2
    for r in range(h // patch):
        for col in range(w // patch):
            cy, cx = r * patch + half, col * patch + half
            pid = int(ids[cy, cx])
            if pid < 0:
                continue
            if pid not in polygons:
                raise FormatError(f"polygon id {pid} missing from polygon table")
            tile = pixels[:, r * patch:(r + 1) * patch, col * patch:(col + 1) * patch]
            out.append(make_sample(tile, polygons[pid], pid, float(border[cy, cx])))
    return out


# -- filtering / splitting ------------------------------------------------------------


def filter_samples(samples, min_ca: float = 0.5, min_border: float = 2000.0) -> list[PatchSample]:
    """Keep samples whose oldest type covers more than ``min_ca`` and whose
    center is at least ``min_border`` meters from a polygon edge."""
    return [s for s in samples if s.ca_fraction > min_ca and s.border_distance >= min_border]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    ratios: tuple
    seed: int

    def sizes(self) -> tuple:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        return {"train": list(map(int, self.train)), "val": list(map(int, self.val)),
                "test": list(map(int, self.test)), "ratios": list(self.ratios), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), tuple(d["ratios"]), int(d["seed"]))


SPLIT_RATIOS = (0.81, 0.09, 0.10)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier part."""
    exact = [n * r for r in ratios]
    base = [math.floor(x + 1e-9) for x in exact]
    rest = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def split(samples, ratios=SPLIT_RATIOS, seed: int = 0) -> DatasetSplit:
    n = samples if isinstance(samples, int) else len(samples)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must be three positive values summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_sizes(n, ratios)
    return DatasetSplit(perm[:a].tolist(), perm[a:a + b].tolist(), perm[a + b:].tolist(), ratios, seed)


def class_counts(samples, encoding: LabelKind = LabelKind.OneHot) -> np.ndarray:
    if len(samples) == 0:
        raise EmptyDataset("no samples to count")
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for s in samples:
        counts[s.labels[encoding].argmax] += 1
    return counts


# -- stacked arrays and manifests ----------------------------------------------------------


@dataclass
class SampleArrays:
    """Column-oriented view of a sample list, as consumed by the trainer."""

    pixels: np.ndarray  # (N, 3, H, W) float32
    labels: dict  # LabelKind -> (N, 6)
    polygon_id: np.ndarray
    ca_fraction: np.ndarray
    border_distance: np.ndarray

    def __len__(self):
        return len(self.pixels)

    @property
    def truth(self) -> np.ndarray:
        return np.argmax(self.labels[LabelKind.OneHot], axis=1)

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleArrays(self.pixels[idx], {k: v[idx] for k, v in self.labels.items()},
                            self.polygon_id[idx], self.ca_fraction[idx], self.border_distance[idx])


def stack_samples(samples) -> SampleArrays:
    if len(samples) == 0:
        raise EmptyDataset("no samples to stack")
    return SampleArrays(
        pixels=np.stack([s.pixels for s in samples]).astype(np.float32),
        labels={k: np.stack([s.labels[k].values for s in samples]) for k in LabelKind},
        polygon_id=np.array([s.polygon_id for s in samples], dtype=np.int64),
        ca_fraction=np.array([s.ca_fraction for s in samples]),
        border_distance=np.array([s.border_distance for s in samples]),
    )


@dataclass
class Dataset:
    arrays: SampleArrays
    split: DatasetSplit
    meta: dict = field(default_factory=dict)

    def part(self, name: str) -> SampleArrays:
        return self.arrays.subset(getattr(self.split, name))


def save_dataset(out_dir, arrays: SampleArrays, split_: DatasetSplit, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out / "samples.npz",
        pixels=arrays.pixels,
        polygon_id=arrays.polygon_id,
        ca_fraction=arrays.ca_fraction,
        border_distance=arrays.border_distance,
        **{f"labels_{k.value}": v for k, v in arrays.labels.items()},
    )
    manifest = {"sample_files": ["samples.npz"], "n_samples": len(arrays),
                "split": split_.to_dict(), "meta": meta or {}}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = _read_header(manifest_path, ("sample_files", "split"))
    parts = []
    for name in manifest["sample_files"]:
        with np.load(manifest_path.parent / name) as z:
            parts.append(SampleArrays(
                pixels=z["pixels"],
                labels={k: z[f"labels_{k.value}"] for k in LabelKind},
                polygon_id=z["polygon_id"],
                ca_fraction=z["ca_fraction"],
                border_distance=z["border_distance"],
            ))
    arrays = parts[0] if len(parts) == 1 else SampleArrays(
        np.concatenate([p.pixels for p in parts]),
        {k: np.concatenate([p.labels[k] for p in parts]) for k in LabelKind},
        np.concatenate([p.polygon_id for p in parts]),
        np.concatenate([p.ca_fraction for p in parts]),
        np.concatenate([p.border_distance for p in parts]),
    )
    return Dataset(arrays, DatasetSplit.from_dict(manifest["split"]), manifest.get("meta", {}))
