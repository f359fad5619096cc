"""Gallery ingestion, identity-disjoint splits, pair sampling, synthesis.

Images are single-channel binary PGM (P5) files listed by an index CSV with
header ``path,identity[,lx1,ly1,...]``; relative paths resolve against the
index file's directory.  Identity labels are re-numbered densely in order of
first appearance.  The synthetic generator renders one base pattern per
identity (oriented gratings plus blobs on a padded canvas) and perturbs it
with identity-preserving nuisances — brightness, translation, pixel noise —
so that raw pixel distance is a poor verifier while identity stays learnable.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .loss import PairLabel
from .seeding import derive_seed
from .tensor import Tensor, TensorError


class DataError(ValueError):
    """Malformed index, image file, or sampling precondition."""


# ---------------------------------------------------------------------------
# core records


@dataclass
class LabeledImage:
    """A loaded grayscale image with its identity and optional landmarks."""

    pixels: Tensor
    identity: int
    landmarks: list[tuple[float, float]] | None = None
    source: str | None = None

    def __post_init__(self):
        shape = self.pixels.shape
        if len(shape) != 3 or shape[2] != 1:
            raise DataError(f"image pixels must be h x w x 1, got {shape}")
        arr = self.pixels.array
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        if self.landmarks is not None:
            h, w = shape[0], shape[1]
            for i, (lx, ly) in enumerate(self.landmarks):
                if not (0 <= lx <= w - 1 and 0 <= ly <= h - 1):
                    raise DataError(
                        f"landmark {i} at ({lx}, {ly}) outside {w}x{h} image"
                    )


@dataclass(frozen=True)
class FacePair:
    """Two image references (positions in the owning collection) + label."""

    first: int
    second: int
    label: PairLabel


@dataclass(frozen=True)
class IndexRecord:
    path: Path
    identity: int
    landmarks: tuple[tuple[float, float], ...] | None = None


@dataclass
class DatasetIndex:
    records: list[IndexRecord]
    identity_names: list[str]  # dense id -> original label

    @property
    def n_identities(self) -> int:
        return len(self.identity_names)

    def by_identity(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, rec in enumerate(self.records):
            groups.setdefault(rec.identity, []).append(i)
        return groups


# ---------------------------------------------------------------------------
# PGM files


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into an h x w array of floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: expected binary PGM magic 'P5'")
    pos, fields = 2, []
    while len(fields) < 3:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated PGM header")
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise DataError(f"{path}: bad PGM header byte {c!r}")
    width, height, maxval = fields
    if maxval > 255 or maxval < 1:
        raise DataError(f"{path}: PGM maxval {maxval} unsupported (need <=255)")
    pos += 1  # exactly one whitespace byte separates header and raster
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise DataError(
            f"{path}: raster has {len(data)} bytes, needs {width * height}"
        )
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Write floats in [0, 1] as an 8-bit binary PGM (maxval 255)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DataError(f"PGM image must be 2-d, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("PGM pixel values must lie in [0, 1]")
    h, w = arr.shape
    quantized = np.rint(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# index CSV


def load_index(path) -> DatasetIndex:
    """Parse the index CSV; identities become dense first-appearance ints."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"index file not found: {path}")
    base = path.parent
    records: list[IndexRecord] = []
    names: list[str] = []
    ids: dict[str, int] = {}
    seen_paths: set[Path] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        for lineno, row in enumerate(rows, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1:
                if len(row) < 2 or row[0] != "path" or row[1] != "identity":
                    raise DataError(
                        f"{path}:1: header must start with 'path,identity'"
                    )
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: need path and identity")
            extra = row[2:]
            if len(extra) % 2:
                raise DataError(
                    f"{path}:{lineno}: odd number of landmark fields "
                    f"({len(extra)})"
                )
            try:
                coords = [float(v) for v in extra]
            except ValueError as exc:
                raise DataError(
                    f"{path}:{lineno}: bad landmark value ({exc})"
                ) from None
            landmarks = tuple(
                (coords[i], coords[i + 1]) for i in range(0, len(coords), 2)
            ) or None
            label = row[1]
            if label not in ids:
                ids[label] = len(names)
                names.append(label)
            rec_path = (base / row[0]).resolve()
            if rec_path in seen_paths:
                raise DataError(f"{path}:{lineno}: duplicate path {row[0]}")
            seen_paths.add(rec_path)
            records.append(IndexRecord(rec_path, ids[label], landmarks))
    if not records:
        raise DataError(f"{path}: index contains no records")
    return DatasetIndex(records, names)


def write_index(path, rows: Sequence[tuple]) -> None:
    """Write (relative_path, identity_label[, landmarks]) rows as index CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "identity"])
        for row in rows:
            rel, label = row[0], row[1]
            flat = []
            if len(row) > 2 and row[2]:
                for lx, ly in row[2]:
                    flat += [repr(float(lx)), repr(float(ly))]
            writer.writerow([rel, label] + flat)


def load_image(record: IndexRecord) -> LabeledImage:
    """Load one index record's PGM into a LabeledImage."""
    arr = read_pgm(record.path)
    landmarks = list(record.landmarks) if record.landmarks else None
    return LabeledImage(
        pixels=Tensor.from_array(arr[:, :, None]),
        identity=record.identity,
        landmarks=landmarks,
        source=str(record.path),
    )


# ---------------------------------------------------------------------------
# splitting and pair sampling


def split_identity_ids(identities: Sequence[int], holdout_fraction: float,
                       seed: int) -> tuple[set[int], set[int]]:
    """Partition distinct identity ids into (kept, held-out) sets."""
    distinct = sorted(set(identities))
    if len(distinct) < 2:
        raise DataError("need at least 2 identities to split")
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError(
            f"holdout fraction must be in (0,1), got {holdout_fraction}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(distinct))
    n_eval = int(np.ceil(holdout_fraction * len(distinct)))
    held = {distinct[i] for i in order[:n_eval]}
    return set(distinct) - held, held


def _subindex(index: DatasetIndex, keep: set[int]) -> DatasetIndex:
    remap: dict[int, int] = {}
    names: list[str] = []
    records: list[IndexRecord] = []
    for rec in index.records:
        if rec.identity not in keep:
            continue
        if rec.identity not in remap:
            remap[rec.identity] = len(names)
            names.append(index.identity_names[rec.identity])
        records.append(IndexRecord(rec.path, remap[rec.identity],
                                   rec.landmarks))
    return DatasetIndex(records, names)


def split_by_identity(index: DatasetIndex, holdout_fraction: float,
                      seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Identity-disjoint split; the eval side gets ceil(fraction * n) ids."""
    ids = [rec.identity for rec in index.records]
    kept, held = split_identity_ids(ids, holdout_fraction, seed)
    return _subindex(index, kept), _subindex(index, held)


class PairSampler:
    """Draws balanced matched/unmatched pairs over an identity list.

    Matched pairs are uniform with replacement over all same-identity
    combinations; unmatched pairs are uniform over cross-identity pairs
    (rejection sampling).  Pair members are positions into the identity
    list handed to the constructor.
    """

    def __init__(self, identities: Sequence[int], rng: np.random.Generator):
        self.identities = list(identities)
        self.rng = rng
        groups: dict[int, list[int]] = {}
        for i, ident in enumerate(self.identities):
            groups.setdefault(ident, []).append(i)
        if len(groups) < 2:
            raise DataError(
                f"pair sampling needs >= 2 identities, got {len(groups)}"
            )
        self.matched_combos = [
            pair
            for members in groups.values()
            for pair in itertools.combinations(members, 2)
        ]
        if not self.matched_combos:
            raise DataError(
                "pair sampling needs at least one identity with >= 2 images"
            )

    def batch(self, n: int) -> list[FacePair]:
        n_matched = (n + 1) // 2
        pairs: list[FacePair] = []
        picks = self.rng.integers(0, len(self.matched_combos), size=n_matched)
        for p in picks:
            i, j = self.matched_combos[p]
            pairs.append(FacePair(i, j, PairLabel.MATCHED))
        n_total = len(self.identities)
        while len(pairs) < n:
            i, j = self.rng.integers(0, n_total, size=2)
            if self.identities[i] != self.identities[j]:
                pairs.append(FacePair(int(i), int(j), PairLabel.UNMATCHED))
        return pairs


def sample_pairs(index: DatasetIndex, n: int, seed: int) -> list[FacePair]:
    """n balanced pairs of record positions, ceil(n/2) matched."""
    sampler = PairSampler([rec.identity for rec in index.records],
                          np.random.default_rng(seed))
    return sampler.batch(n)


def crop_patch(image: LabeledImage, origin: tuple[int, int],
               edge: int) -> Tensor:
    """Square sub-image at (x, y); out of bounds is an error, never clamped."""
    x, y = int(origin[0]), int(origin[1])
    h, w = image.pixels.shape[0], image.pixels.shape[1]
    if edge < 1:
        raise DataError(f"patch edge must be >= 1, got {edge}")
    if x < 0 or y < 0 or x + edge > w or y + edge > h:
        raise DataError(
            f"patch origin ({x}, {y}) edge {edge} outside {w}x{h} image"
        )
    return Tensor.from_array(image.pixels.array[y:y + edge, x:x + edge, :])


def center_crop(image: LabeledImage, edge: int) -> Tensor:
    if edge > min(image.pixels.shape[0], image.pixels.shape[1]):
        raise TensorError(
            f"image {image.pixels.shape[1]}x{image.pixels.shape[0]} smaller "
            f"than required crop edge {edge}"
        )
    x = (image.pixels.shape[1] - edge) // 2
    y = (image.pixels.shape[0] - edge) // 2
    return crop_patch(image, (x, y), edge)


# ---------------------------------------------------------------------------
# synthetic identity gallery


@dataclass
class NuisanceConfig:
    """Identity-preserving perturbations applied per rendered image."""

    brightness_delta: float = 0.3   # scale drawn from [1-d, 1+d]
    max_translation: int | None = None  # pixels; None -> edge // 8
    noise_sigma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.brightness_delta < 1.0:
            raise DataError(
                f"brightness_delta must be in [0,1), got {self.brightness_delta}"
            )
        if self.max_translation is not None and self.max_translation < 0:
            raise DataError("max_translation must be >= 0")
        if self.noise_sigma < 0.0:
            raise DataError("noise_sigma must be >= 0")


def _identity_pattern(canvas: int, edge: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One person's base texture: 3 oriented gratings + 3 signed blobs."""
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    img = np.zeros((canvas, canvas))
    for _ in range(3):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(5.0, 12.0)  # cycles per edge
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        wave = (xs * np.cos(theta) + ys * np.sin(theta)) / edge
        img += amp * np.sin(2.0 * np.pi * freq * wave + phase)
    for _ in range(3):
        cx = rng.uniform(0.0, canvas)
        cy = rng.uniform(0.0, canvas)
        sigma = rng.uniform(edge / 12.0, edge / 6.0)
        amp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2)
                            / (2.0 * sigma * sigma))
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full_like(img, 0.5)
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def synth_generate(n_identities: int, images_per_identity: int, edge: int,
                   nuisance: NuisanceConfig, seed: int,
                   out_dir) -> DatasetIndex:
    """Render the gallery to out_dir as PGMs plus index.csv; returns the index."""
    if edge < 16:
        raise DataError(f"edge must be >= 16, got {edge}")
    if n_identities < 1 or images_per_identity < 1:
        raise DataError("need at least one identity and one image each")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shift = nuisance.max_translation
    if shift is None:
        shift = edge // 8
    canvas = edge + 2 * shift
    rows = []
    for i in range(n_identities):
        pattern = _identity_pattern(
            canvas, edge, np.random.default_rng(derive_seed(seed, f"id{i}")))
        label = f"person{i:04d}"
        for j in range(images_per_identity):
            rng = np.random.default_rng(derive_seed(seed, f"img{i}-{j}"))
            dx = int(rng.integers(-shift, shift + 1)) if shift else 0
            dy = int(rng.integers(-shift, shift + 1)) if shift else 0
            window = pattern[shift + dy:shift + dy + edge,
                             shift + dx:shift + dx + edge]
            scale = 1.0 + rng.uniform(-nuisance.brightness_delta,
                                      nuisance.brightness_delta)
            img = window * scale
            if nuisance.noise_sigma > 0.0:
                img = img + rng.normal(0.0, nuisance.noise_sigma,
                                       size=img.shape)
            name = f"id{i:04d}_{j:03d}.pgm"
            write_pgm(out_dir / name, np.clip(img, 0.0, 1.0))
            rows.append((name, label))
    write_index(out_dir / "index.csv", rows)
    return load_index(out_dir / "index.csv")
