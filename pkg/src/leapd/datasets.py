"""VisDrone-format ingestion and a synthetic shooting-condition scene generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .config import ALTITUDES, VIEWS, WEATHERS, DomainLabel, ImageSample, index_domains

log = logging.getLogger(__name__)

VISDRONE_CATEGORIES = ("pedestrian", "people", "bicycle", "car", "van", "truck",
                       "tricycle", "awning-tricycle", "bus", "motor")
# VisDrone ids: 0 ignored region, 1..10 the classes above, 11 others
IGNORED_IDS = (0, 11)
SYNTHETIC_CATEGORIES = ("car", "truck")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

ALTITUDE_SCALE = {"low": 1.0, "medium": 0.6, "high": 0.35}
VIEW_SHEAR = {"front": 0.0, "side": 0.25, "bird": 0.5}
BIRD_FLATTEN = 0.75
WEATHER_BRIGHTNESS = {"day": 1.0, "night": 0.35, "foggy": 0.7}
WEATHER_NOISE = {"day": 0.01, "night": 0.03, "foggy": 0.02}
# length, width in pixels at low altitude
VEHICLE_SIZE = {"car": (22.0, 11.0), "truck": (30.0, 13.0)}
VEHICLE_COLOR = {"car": (0.85, 0.22, 0.18), "truck": (0.2, 0.35, 0.85)}
MAX_PLACEMENT_TRIES = 100


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class VisDroneRecord:
    box: tuple[int, int, int, int]
    score: int
    category: int
    truncation: int
    occlusion: int

    @property
    def ignored(self) -> bool:
        return self.category in IGNORED_IDS or self.score == 0


def parse_visdrone_line(line: str, lineno: int | None = None) -> VisDroneRecord:
    """Parse ``left,top,width,height,score,category,truncation,occlusion``.

    A single trailing comma, as found in some official annotation files, is accepted.
    """
    where = f"line {lineno}: " if lineno is not None else ""
    text = line.strip()
    if text.endswith(","):
        text = text[:-1]
    parts = text.split(",") if text else []
    if len(parts) != 8:
        raise DatasetError(f"{where}expected 8 fields, got {len(parts)}")
    try:
        vals = [int(p.strip()) for p in parts]
    except ValueError:
        raise DatasetError(f"{where}non-integer field in {line.strip()!r}") from None
    x, y, w, h, score, cat, trunc, occ = vals
    return VisDroneRecord((x, y, w, h), score, cat, trunc, occ)


def format_visdrone_line(rec: VisDroneRecord) -> str:
    return ",".join(str(v) for v in (*rec.box, rec.score, rec.category, rec.truncation, rec.occlusion))


def read_annotation_file(path: Path) -> list[VisDroneRecord]:
    records = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                records.append(parse_visdrone_line(line, i))
            except DatasetError as e:
                raise DatasetError(f"{path}: {e}") from None
    return records


def read_metadata(path: Path) -> dict[str, tuple[str, str, str]]:
    """Sidecar lines ``image_stem,altitude,view,weather``."""
    out = {}
    warned = False
    for i, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 4:
            raise DatasetError(f"{path}:{i}: expected image_stem,altitude,view,weather")
        if len(parts) > 4 and not warned:
            log.warning("%s: ignoring extra metadata columns", path)
            warned = True
        stem, alt, view, weather = parts[:4]
        for word, vocab in ((alt, ALTITUDES), (view, VIEWS), (weather, WEATHERS)):
            if word not in vocab:
                raise DatasetError(f"{path}:{i}: unknown domain word {word!r}")
        out[stem] = (alt, view, weather)
    return out


@dataclass(frozen=True)
class SceneSpec:
    domain: DomainLabel
    object_count: int
    canvas: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.object_count < 0:
            raise ValueError("object_count must be non-negative")
        if self.canvas[0] < 64 or self.canvas[1] < 64:
            raise ValueError("canvas must be at least 64x64")


@dataclass
class SampleRecord:
    id: str
    domain: DomainLabel
    image_path: Path | None = None
    annotation_path: Path | None = None
    scene: SceneSpec | None = None


@dataclass
class DatasetIndex(Sequence):
    """Ordered sample records; items are materialised (and cached) on access."""

    records: list[SampleRecord]
    categories: tuple[str, ...]
    split: str = "train"
    category_ids: tuple[int, ...] | None = None  # on-disk id for each category
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i not in self._cache:
            self._cache[i] = self._load(self.records[i])
        return self._cache[i]

    def _load(self, rec: SampleRecord) -> ImageSample:
        if rec.scene is not None:
            sample = generate_scene(rec.scene)
            sample.id = rec.id
            return sample
        return load_visdrone_sample(rec, self.categories, self.category_ids)

    @property
    def domains(self) -> list[DomainLabel]:
        """One label per class index, in index order."""
        seen = {r.domain.class_index: r.domain for r in self.records}
        return [seen[k] for k in sorted(seen)]

    @property
    def n_sc(self) -> int:
        return len({r.domain.class_index for r in self.records})


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_visdrone_sample(rec: SampleRecord, categories, category_ids=None) -> ImageSample:
    image = read_image(rec.image_path)
    _, h, w = image.shape
    ids = category_ids or tuple(VISDRONE_CATEGORIES.index(c) + 1 for c in categories)
    id_to_index = {cid: k for k, cid in enumerate(ids)}
    boxes, ignored = [], []
    for r in read_annotation_file(rec.annotation_path):
        x0, y0 = max(r.box[0], 0), max(r.box[1], 0)
        x1, y1 = min(r.box[0] + r.box[2], w), min(r.box[1] + r.box[3], h)
        if x1 <= x0 or y1 <= y0:
            continue
        box = (float(x0), float(y0), float(x1 - x0), float(y1 - y0))
        if r.ignored:
            ignored.append(box)
        elif r.category in id_to_index:
            boxes.append((*box, id_to_index[r.category]))
    return ImageSample(image, boxes, rec.domain, rec.id, ignored)


def load_visdrone(root: str | Path, metadata: str | Path | None = None,
                  categories: Sequence[str] = VISDRONE_CATEGORIES,
                  fallback_domain: tuple[str, str, str] = ("medium", "front", "day"),
                  split: str = "train") -> DatasetIndex:
    """Index ``root/images`` + ``root/annotations`` with per-image domain labels.

    ``metadata`` defaults to ``root/metadata.txt``; images without a metadata
    line get ``fallback_domain``.
    """
    root = Path(root)
    images = sorted(p for p in (root / "images").iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    ann_dir = root / "annotations"
    missing = [p.stem for p in images if not (ann_dir / f"{p.stem}.txt").exists()]
    if missing:
        raise DatasetError(f"missing annotations for: {', '.join(missing)}")
    meta_path = Path(metadata) if metadata is not None else root / "metadata.txt"
    meta = read_metadata(meta_path) if meta_path.exists() else {}
    triples = {}
    for p in images:
        if p.stem not in meta:
            log.warning("%s has no domain metadata; using %s", p.stem, fallback_domain)
        triples[p.stem] = tuple(meta.get(p.stem, fallback_domain))
    classes = index_domains(triples.values())
    records = [SampleRecord(p.stem, DomainLabel(*triples[p.stem], classes[triples[p.stem]]),
                            image_path=p, annotation_path=ann_dir / f"{p.stem}.txt") for p in images]
    return DatasetIndex(records, tuple(categories), split)


# -- synthetic scenes --------------------------------------------------------


def _lowfreq(rng: np.random.Generator, h: int, w: int, cells: int = 6) -> np.ndarray:
    """Smooth random field in [0, 1] by bilinear upsampling of a coarse grid."""
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx


def _coverage(x0, y0, bw, bh, body_w, body_h, shear, h, w, sub=4) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Anti-aliased coverage of a sheared rectangle whose bounding box is (x0, y0, bw, bh)."""
    ys = slice(max(int(np.floor(y0)), 0), min(int(np.ceil(y0 + bh)), h))
    xs = slice(max(int(np.floor(x0)), 0), min(int(np.ceil(x0 + bw)), w))
    off = (np.arange(sub) + 0.5) / sub
    py = (np.arange(ys.start, ys.stop)[:, None] + off[None, :]).reshape(-1)
    px = (np.arange(xs.start, xs.stop)[:, None] + off[None, :]).reshape(-1)
    cy = y0 + bh / 2
    cx = x0 + bw / 2
    dy = py[:, None] - cy
    dx = px[None, :] - cx - shear * dy
    inside = (np.abs(dy) <= body_h / 2) & (np.abs(dx) <= body_w / 2)
    cov = inside.reshape(len(py) // sub, sub, len(px) // sub, sub).mean(axis=(1, 3))
    return cov, (ys, xs)


def generate_scene(spec: SceneSpec, categories: Sequence[str] = SYNTHETIC_CATEGORIES) -> ImageSample:
    """Render solid vehicles on a textured ground under the scene's shooting condition.

    Altitude scales object size, view shears (and for ``bird`` flattens) the
    body, weather sets brightness, noise and haze. Boxes are integer-aligned and
    enclose the rendered shape exactly; objects never overlap.
    """
    h, w = spec.canvas
    d = spec.domain
    rng_obj = np.random.default_rng([spec.seed, 1])
    rng_pos = np.random.default_rng([spec.seed, 2])
    rng_bg = np.random.default_rng([spec.seed, 3])

    tint = np.array([0.42, 0.45, 0.38])
    texture = _lowfreq(rng_bg, h, w, 6) * 0.15 + _lowfreq(rng_bg, h, w, 16) * 0.08
    img = tint[:, None, None] + texture[None] - 0.11

    scale = ALTITUDE_SCALE[d.altitude]
    shear = VIEW_SHEAR[d.view]
    flatten = BIRD_FLATTEN if d.view == "bird" else 1.0
    boxes, occupied = [], []
    for _ in range(spec.object_count):
        cat = int(rng_obj.integers(len(categories)))
        length, width = VEHICLE_SIZE[categories[cat]]
        jitter = rng_obj.uniform(0.85, 1.15, size=2)
        vertical = bool(rng_obj.random() < 0.3)
        color = np.array(VEHICLE_COLOR[categories[cat]]) + rng_obj.uniform(-0.08, 0.08, size=3)
        body_w, body_h = length * jitter[0] * scale, width * jitter[1] * scale
        if vertical:
            body_w, body_h = body_h, body_w
        body_h *= flatten
        bh = max(2, int(round(body_h)))
        bw = max(2, int(round(body_w + shear * bh)))
        body_w = bw - shear * bh
        placed = None
        for _try in range(MAX_PLACEMENT_TRIES):
            x0 = int(rng_pos.integers(0, w - bw + 1)) if bw <= w else None
            y0 = int(rng_pos.integers(0, h - bh + 1)) if bh <= h else None
            if x0 is None or y0 is None:
                break
            cand = (x0, y0, bw, bh)
            if all(x0 + bw + 1 <= ox or ox + obw + 1 <= x0 or y0 + bh + 1 <= oy or oy + obh + 1 <= y0
                   for ox, oy, obw, obh in occupied):
                placed = cand
                break
        if placed is None:
            continue
        occupied.append(placed)
        cov, (ys, xs) = _coverage(*placed, body_w, bh, shear, h, w)
        img[:, ys, xs] = img[:, ys, xs] * (1 - cov) + color[:, None, None] * cov
        boxes.append((float(placed[0]), float(placed[1]), float(bw), float(bh), cat))

    img = img * WEATHER_BRIGHTNESS[d.weather]
    if d.weather == "foggy":
        haze = 0.6 + 0.4 * _lowfreq(rng_bg, h, w, 3)
        img = img + 0.3 * haze[None]
    img = img + rng_bg.normal(0, WEATHER_NOISE[d.weather], size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return ImageSample(img, boxes, d, f"scene_{spec.seed}")


def make_domain_split(domains_train: Iterable[tuple[str, str, str]],
                      domains_heldout: Iterable[tuple[str, str, str]],
                      per_domain: int, seed: int, heldout_per_domain: int | None = None,
                      canvas: tuple[int, int] = (64, 64),
                      object_range: tuple[int, int] = (2, 5)) -> tuple[DatasetIndex, DatasetIndex]:
    """Synthetic train and held-out indices over disjoint sets of shooting conditions."""
    train = sorted({tuple(t) for t in domains_train})
    held = sorted({tuple(t) for t in domains_heldout})
    if not train or not held:
        raise DatasetError("both domain sets must be non-empty")
    overlap = set(train) & set(held)
    if overlap:
        raise DatasetError(f"train and held-out domains overlap: {sorted(overlap)}")
    rng = np.random.default_rng(seed)

    def build(triples, count, split):
        classes = index_domains(triples)
        records = []
        for triple in sorted(classes, key=classes.get):
            label = DomainLabel(*triple, classes[triple])
            for i in range(count):
                scene_seed = int(rng.integers(2**31))
                n_obj = int(rng.integers(object_range[0], object_range[1] + 1))
                sid = f"{split}_{'-'.join(triple)}_{i:04d}"
                records.append(SampleRecord(sid, label, scene=SceneSpec(label, n_obj, canvas, scene_seed)))
        return DatasetIndex(records, SYNTHETIC_CATEGORIES, split)

    return build(train, per_domain, "train"), build(held, heldout_per_domain or per_domain, "heldout")


def write_dataset(index: DatasetIndex, root: str | Path) -> Path:
    """Write ``index`` in the VisDrone layout (PNG images, 8-field annotations, metadata sidecar)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    ids = index.category_ids or tuple(VISDRONE_CATEGORIES.index(c) + 1 for c in index.categories)
    meta = []
    for i, rec in enumerate(index.records):
        s = index[i]
        pixels = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(root / "images" / f"{rec.id}.png")
        lines = [format_visdrone_line(VisDroneRecord(tuple(int(v) for v in b[:4]), 1, ids[b[4]], 0, 0))
                 for b in s.boxes]
        lines += [format_visdrone_line(VisDroneRecord(tuple(int(v) for v in b[:4]), 0, 0, 0, 0))
                  for b in s.ignored]
        (root / "annotations" / f"{rec.id}.txt").write_text("".join(l + "\n" for l in lines))
        meta.append(f"{rec.id},{rec.domain.altitude},{rec.domain.view},{rec.domain.weather}\n")
    (root / "metadata.txt").write_text("".join(meta))
    return root
