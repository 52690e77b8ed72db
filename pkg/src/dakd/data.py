"""ShapeScenes: a procedural two-domain segmentation dataset, its on-disk
format and deterministic loaders.

Scenes are a sky band, a road band, and randomly placed building
rectangles, tree triangles and car ellipses over a background. The label
map is the exact generative mask; the domain shift (hue rotation,
brightness scaling, pixel noise, optional speckle texture) touches pixels
only, never labels. Generation is embarrassingly parallel: each sample's
randomness derives only from its sample seed.

Directory layout: ``<root>/<domain>/<split>/{images,labels}/NNNNNN.png``
plus ``<root>/<domain>/<split>/manifest.json``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Domain, DomainBatch, ImageTensor, LabelMap

DEFAULT_CLASSES = ("background", "sky", "road", "car", "building", "tree")

# Flat per-class paint colors (RGB in [0, 1]); distinct so the identity
# shift keeps a pixel-perfect color <-> label correspondence.
CLASS_COLORS = np.array([
    [0.45, 0.50, 0.40],  # background
    [0.50, 0.70, 0.95],  # sky
    [0.35, 0.35, 0.38],  # road
    [0.80, 0.20, 0.20],  # car
    [0.60, 0.45, 0.30],  # building
    [0.10, 0.55, 0.15],  # tree
])

# Display palette for prediction PNGs.
PALETTE = (np.clip(CLASS_COLORS, 0, 1) * 255).astype(np.uint8)


class TextureMode(enum.Enum):
    FLAT = "flat"
    SPECKLED = "speckled"


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (64, 64)
    classes: tuple = DEFAULT_CLASSES
    objects_min: int = 4
    objects_max: int = 8
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError("image_size must be at least 8x8")
        if len(self.classes) != len(DEFAULT_CLASSES):
            raise ValueError("ShapeScenes defines exactly 6 classes")
        if not (1 <= self.objects_min <= self.objects_max):
            raise ValueError("invalid objects_per_scene range")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class DomainShiftSpec:
    hue_shift: tuple = (0.0, 0.0)        # radians, sampled per image
    brightness_scale: tuple = (1.0, 1.0)
    noise_sigma: float = 0.0
    texture_mode: TextureMode = TextureMode.FLAT


IDENTITY_SHIFT = DomainShiftSpec()

# Default target-domain shift: big enough that a source-only model
# measurably degrades, small enough that adaptation recovers most of it.
DEFAULT_TARGET_SHIFT = DomainShiftSpec(
    hue_shift=(0.5, 0.9),
    brightness_scale=(0.6, 0.8),
    noise_sigma=0.03,
    texture_mode=TextureMode.FLAT,
)


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    """Rotation of RGB space around the gray axis by `theta` radians."""
    c, s = np.cos(theta), np.sin(theta)
    one3 = 1.0 / 3.0
    sq3 = np.sqrt(1.0 / 3.0)
    m = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m[i, j] = one3 * (1.0 - c) + (c if i == j else 0.0)
            if i != j:
                sign = 1.0 if (j - i) % 3 == 1 else -1.0
                m[i, j] += sign * sq3 * s
    return m


def _paint_scene(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one label map; returns (H, W) int64 class indices."""
    h, w = spec.image_size
    label = np.zeros((h, w), dtype=np.int64)
    sky_h = int(h * rng.uniform(0.18, 0.35))
    road_h = int(h * rng.uniform(0.2, 0.3))
    label[:sky_h] = 1
    label[h - road_h:] = 2

    n_extra = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    kinds = ["building", "tree", "car"]
    # First one of each kind is mandatory so every class appears.
    order = kinds + [kinds[int(rng.integers(0, 3))] for _ in range(max(0, n_extra - 3))]

    mid_top, mid_bot = sky_h, h - road_h
    for kind in order:
        if kind == "building":
            bw = int(rng.integers(max(3, w // 10), max(4, w // 4)))
            bh = int(rng.integers(max(3, h // 8), max(4, (mid_bot - mid_top))))
            x0 = int(rng.integers(0, max(1, w - bw)))
            y1 = mid_bot
            y0 = max(0, y1 - bh)
            label[y0:y1, x0:x0 + bw] = 4
        elif kind == "tree":
            base = int(rng.integers(max(3, w // 12), max(4, w // 5)))
            th = int(rng.integers(max(3, h // 8), max(4, (mid_bot - mid_top))))
            cx = int(rng.integers(base // 2, max(base // 2 + 1, w - base // 2)))
            y1 = mid_bot
            y0 = max(0, y1 - th)
            for y in range(y0, y1):
                frac = (y - y0) / max(1, y1 - 1 - y0)
                half = max(1, int(round(frac * base / 2)))
                label[y, max(0, cx - half):min(w, cx + half)] = 5
        else:  # car
            ax = int(rng.integers(max(2, w // 14), max(3, w // 7)))
            ay = max(1, min(road_h // 2, ax // 2 + 1))
            cx = int(rng.integers(ax, max(ax + 1, w - ax)))
            cy = int(h - road_h + rng.integers(ay, max(ay + 1, road_h)))
            cy = min(cy, h - 1)
            yy, xx = np.ogrid[:h, :w]
            mask = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
            label[mask] = 3
    return label


def generate_scene(spec: SceneSpec, shift: DomainShiftSpec,
                   sample_seed: int):
    """Render one (ImageTensor, LabelMap) pair, deterministic in
    sample_seed. Re-draws until every class is present in the label."""
    label = None
    for attempt in range(100):
        geo_rng = np.random.default_rng(
            np.random.SeedSequence([sample_seed, 0, attempt]))
        candidate = _paint_scene(spec, geo_rng)
        if len(np.unique(candidate)) == spec.num_classes:
            label = candidate
            break
    if label is None:
        raise RuntimeError(f"class coverage not reached for seed {sample_seed}")

    img = CLASS_COLORS[label]

    shift_rng = np.random.default_rng(np.random.SeedSequence([sample_seed, 1]))
    if shift.texture_mode is TextureMode.SPECKLED:
        img = img * shift_rng.uniform(0.9, 1.1, size=label.shape)[..., None]
    theta = shift_rng.uniform(*shift.hue_shift)
    if theta != 0.0:
        img = img @ _hue_rotation_matrix(theta).T
    scale = shift_rng.uniform(*shift.brightness_scale)
    if scale != 1.0:
        img = img * scale
    if shift.noise_sigma > 0.0:
        img = img + shift_rng.normal(0.0, shift.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return ImageTensor(img), LabelMap(label, num_classes=spec.num_classes)


@dataclass
class DatasetManifest:
    version: int
    domain: Domain
    split: Split
    entries: list                  # [{"image_path", "label_path", "seed"}]
    scene_spec: dict
    shift_spec: dict
    labels_eval_only: bool = False
    root: Path | None = None

    def save(self, path: Path) -> None:
        d = {
            "version": self.version,
            "domain": self.domain.value,
            "split": self.split.value,
            "entries": self.entries,
            "scene_spec": self.scene_spec,
            "shift_spec": self.shift_spec,
            "labels_eval_only": self.labels_eval_only,
        }
        Path(path).write_text(json.dumps(d, indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        m = cls(
            version=d["version"],
            domain=Domain(d["domain"]),
            split=Split(d["split"]),
            entries=d["entries"],
            scene_spec=d["scene_spec"],
            shift_spec=d["shift_spec"],
            labels_eval_only=d["labels_eval_only"],
            root=path.parent,
        )
        return m

    @property
    def num_classes(self) -> int:
        return len(self.scene_spec["classes"])


def _sample_seed(base_seed: int, domain: Domain, split: Split, index: int) -> int:
    tag = {Domain.SOURCE: 1, Domain.TARGET: 2}[domain] * 10 + \
        {Split.TRAIN: 1, Split.VAL: 2}[split]
    ss = np.random.SeedSequence([base_seed, tag, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 62))


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_split(spec: SceneSpec, shift: DomainShiftSpec, domain: Domain,
                split: Split, count: int, root: Path) -> DatasetManifest:
    root = Path(root)
    base = root / domain.value / split.value
    entries = []
    for i in range(count):
        seed = _sample_seed(spec.seed, domain, split, i)
        img, label = generate_scene(spec, shift, seed)
        img_u8 = np.round(img.data * 255.0).astype(np.uint8)
        label_u8 = label.data.astype(np.uint8)
        image_rel = f"images/{i:06d}.png"
        label_rel = f"labels/{i:06d}.png"
        _save_png(base / image_rel, img_u8)
        _save_png(base / label_rel, label_u8)
        entries.append({"image_path": image_rel, "label_path": label_rel,
                        "seed": seed})
    manifest = DatasetManifest(
        version=1,
        domain=domain,
        split=split,
        entries=entries,
        scene_spec=asdict(spec),
        shift_spec={**asdict(shift),
                    "texture_mode": shift.texture_mode.value},
        labels_eval_only=(domain is Domain.TARGET and split is Split.TRAIN),
        root=base,
    )
    manifest.save(base / "manifest.json")
    return manifest


def write_dataset(spec: SceneSpec, shift_src: DomainShiftSpec,
                  shift_tgt: DomainShiftSpec, counts: dict, out_dir) -> dict:
    """Emit source/target train+val splits under `out_dir`.

    `counts` maps split name ("train"/"val") to image count. Returns
    {(domain, split): DatasetManifest}. Target train labels are written
    for audit but flagged eval-only in the manifest.
    """
    out = {}
    for domain, shift in ((Domain.SOURCE, shift_src), (Domain.TARGET, shift_tgt)):
        for split in (Split.TRAIN, Split.VAL):
            n = int(counts[split.value])
            out[(domain, split)] = write_split(spec, shift, domain, split,
                                               n, out_dir)
    return out


def load_entry(manifest: DatasetManifest, index: int):
    """Read one (ImageTensor, LabelMap) pair from disk."""
    entry = manifest.entries[index]
    base = manifest.root
    img = np.asarray(Image.open(base / entry["image_path"]), dtype=np.float64) / 255.0
    label = np.asarray(Image.open(base / entry["label_path"]), dtype=np.int64)
    try:
        return (ImageTensor(img),
                LabelMap(label, num_classes=manifest.num_classes))
    except ValueError as e:
        raise ValueError(f"corrupt dataset entry {index}: {e}") from e


def load_batches(manifest: DatasetManifest, batch_size: int, seed: int,
                 honor_unsupervised: bool = True):
    """Infinite shuffled DomainBatch stream; order is a pure function of
    `seed`, and each epoch visits every entry exactly once. Target train
    batches lose their labels when `honor_unsupervised` is set."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(manifest.entries)
    strip = (honor_unsupervised and manifest.domain is Domain.TARGET
             and manifest.split is Split.TRAIN)
    rng = np.random.default_rng(seed)
    cache = {}

    def entry(i: int):
        if i not in cache:
            cache[i] = load_entry(manifest, i)
        return cache[i]

    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            pairs = [entry(int(i)) for i in idx]
            images = tuple(p[0] for p in pairs)
            labels = None if strip else tuple(p[1] for p in pairs)
            yield DomainBatch(domain=manifest.domain, images=images,
                              labels=labels)
