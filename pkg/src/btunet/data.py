"""Dataset ingestion, splitting, limited-annotation simulation, synthesis.

Expected directory layout:

    root/
      images/<name>.png        8-bit grayscale or RGB
      masks/<name>.png         single-channel, {0, 255}; optional per image

Records are paired by basename. Images are loaded as float32 in [0, 1]
and resized bilinearly; masks are resized nearest-neighbor and
re-binarized at 0.5. Mask-less records can still feed pre-training.

All split / label-fraction / fold assignments are pure functions of the
record names and a seed, and labeled subsets are nested across fractions
for a comparable annotation-scarcity sweep.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class Record:
    name: str
    image_path: str
    mask_path: str | None
    split: str | None = None
    labeled: bool = False
    fold: int | None = None


@dataclass
class DatasetManifest:
    root: str
    records: list[Record] = field(default_factory=list)
    seed: int | None = None
    train_frac: float | None = None
    labeled_fraction: float | None = None
    folds_k: int | None = None

    def train_records(self) -> list[Record]:
        return [r for r in self.records if r.split == TRAIN]

    def test_records(self) -> list[Record]:
        return [r for r in self.records if r.split == TEST]

    def labeled_records(self) -> list[Record]:
        return [r for r in self.records if r.split == TRAIN and r.labeled]

    def pretrain_records(self) -> list[Record]:
        """Images for unsupervised pre-training: the full train split."""
        return self.train_records()

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "seed": self.seed,
            "train_frac": self.train_frac,
            "labeled_fraction": self.labeled_fraction,
            "folds_k": self.folds_k,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            root=d["root"],
            seed=d.get("seed"),
            train_frac=d.get("train_frac"),
            labeled_fraction=d.get("labeled_fraction"),
            folds_k=d.get("folds_k"),
            records=[Record(**r) for r in d.get("records", [])],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_dataset(root) -> DatasetManifest:
    """Scan `root` and pair images with masks by basename."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"no images/ directory under {root}")
    mask_dir = root / "masks"
    masks = (
        {p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS}
        if mask_dir.is_dir()
        else {}
    )
    records = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTS:
            continue
        mask = masks.get(p.stem)
        records.append(
            Record(name=p.stem, image_path=str(p), mask_path=str(mask) if mask else None)
        )
    if not records:
        raise DataError(f"no images found under {img_dir}")
    return DatasetManifest(root=str(root), records=records)


def split(manifest: DatasetManifest, train_frac: float = 0.70, seed: int = 0) -> DatasetManifest:
    """Deterministic shuffled train/test split."""
    if len(manifest.records) < 2:
        raise DataError("need at least 2 records to split")
    if not 0.0 < train_frac < 1.0:
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    ordered = sorted(manifest.records, key=lambda r: r.name)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = min(max(int(round(train_frac * len(ordered))), 1), len(ordered) - 1)
    train_idx = set(perm[:n_train].tolist())
    records = [
        replace(r, split=TRAIN if i in train_idx else TEST, labeled=False, fold=None)
        for i, r in enumerate(ordered)
    ]
    return replace(manifest, records=records, seed=seed, train_frac=train_frac)


def limit_labels(manifest: DatasetManifest, fraction: float, seed: int = 0) -> DatasetManifest:
    """Mark ceil(fraction * train) records as labeled; nested across fractions."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"label fraction must be in (0, 1], got {fraction}")
    train = [r for r in manifest.records if r.split == TRAIN]
    if not train:
        raise DataError("manifest has no train split; call split() first")
    want = math.ceil(fraction * len(train))
    with_masks = sorted((r.name for r in train if r.mask_path), key=str)
    if want == 0:
        raise DataError("label fraction selects zero records")
    if want > len(with_masks):
        raise DataError(
            f"label fraction {fraction} needs {want} masked records, "
            f"only {len(with_masks)} available"
        )
    perm = np.random.default_rng(seed).permutation(len(with_masks))
    chosen = {with_masks[i] for i in perm[:want]}
    records = [
        replace(r, labeled=r.name in chosen, fold=None) if r.split == TRAIN else r
        for r in manifest.records
    ]
    return replace(manifest, records=records, labeled_fraction=fraction)


def make_folds(manifest: DatasetManifest, k: int, seed: int = 0) -> DatasetManifest:
    """Partition labeled records into k validation folds (sizes within 1)."""
    labeled = sorted((r.name for r in manifest.records if r.labeled), key=str)
    if k < 2:
        raise DataError(f"cross-validation needs k >= 2, got {k}")
    if k > len(labeled):
        raise DataError(f"k={k} exceeds {len(labeled)} labeled records")
    perm = np.random.default_rng(seed).permutation(len(labeled))
    fold_of = {labeled[idx]: int(i % k) for i, idx in enumerate(perm)}
    records = [
        replace(r, fold=fold_of[r.name]) if r.name in fold_of else r
        for r in manifest.records
    ]
    return replace(manifest, records=records, folds_k=k)


# -- pixel loading -----------------------------------------------------------


def load_image(record: Record, size: int, channels: int = 1) -> np.ndarray:
    img = Image.open(record.image_path).convert("L" if channels == 1 else "RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr[..., None] if channels == 1 else arr


def load_mask(record: Record, size: int) -> np.ndarray:
    if record.mask_path is None:
        raise DataError(f"record '{record.name}' has no mask")
    img = Image.open(record.mask_path).convert("L")
    if img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    mask = (np.asarray(img, dtype=np.float32) >= 127.5).astype(np.float32)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise DataError(f"mask for '{record.name}' is not binary after binarization")
    return mask[..., None]


def load_image_stack(records: list[Record], size: int, channels: int = 1) -> np.ndarray:
    if not records:
        raise DataError("empty record list")
    return np.stack([load_image(r, size, channels) for r in records])


def load_mask_stack(records: list[Record], size: int) -> np.ndarray:
    if not records:
        raise DataError("empty record list")
    return np.stack([load_mask(r, size) for r in records])


# -- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    count: int
    size: int = 64
    shape_family: str = "ellipses"  # or "blobs"
    objects_min: int = 1
    objects_max: int = 3
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise DataError("synthetic dataset needs count >= 1")
        if self.shape_family not in ("ellipses", "blobs"):
            raise DataError(f"unknown shape family '{self.shape_family}'")
        if not 1 <= self.objects_min <= self.objects_max:
            raise DataError("objects range must satisfy 1 <= min <= max")
        if self.noise < 0:
            raise DataError("noise level must be non-negative")


def _object_indicator(xs, ys, obj, family):
    dx, dy = xs - obj["cx"], ys - obj["cy"]
    if family == "ellipses":
        cos_t, sin_t = math.cos(obj["theta"]), math.sin(obj["theta"])
        u = dx * cos_t + dy * sin_t
        v = -dx * sin_t + dy * cos_t
        return (u / obj["a"]) ** 2 + (v / obj["b"]) ** 2 <= 1.0
    radius = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    rim = obj["r0"] * (
        1.0
        + sum(a * np.cos(k * phi + p) for k, a, p in zip((2, 3, 4), obj["amp"], obj["phase"]))
    )
    return radius <= rim


def _sample_objects(rng, spec: SynthSpec):
    count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    objs = []
    s = spec.size
    for _ in range(count):
        obj = {
            "cx": rng.uniform(0.2, 0.8) * s,
            "cy": rng.uniform(0.2, 0.8) * s,
            "fg": rng.uniform(0.6, 0.95),
        }
        if spec.shape_family == "ellipses":
            obj.update(
                a=rng.uniform(0.10, 0.24) * s,
                b=rng.uniform(0.10, 0.24) * s,
                theta=rng.uniform(0.0, math.pi),
            )
        else:
            obj.update(
                r0=rng.uniform(0.12, 0.22) * s,
                amp=rng.uniform(0.0, [0.10, 0.07, 0.05]),
                phase=rng.uniform(0.0, 2 * math.pi, size=3),
            )
        objs.append(obj)
    return objs


def _render_pair(rng, spec: SynthSpec):
    s, ss = spec.size, 4  # 4x supersampling for anti-aliased images
    centers = np.arange(s) + 0.5
    mask_x, mask_y = np.meshgrid(centers, centers)
    fine = (np.arange(s * ss) + 0.5) / ss
    fine_x, fine_y = np.meshgrid(fine, fine)

    objects = _sample_objects(rng, spec)
    image = np.full((s, s), rng.uniform(0.05, 0.20), dtype=np.float64)
    mask = np.zeros((s, s), dtype=bool)
    for obj in objects:
        mask |= _object_indicator(mask_x, mask_y, obj, spec.shape_family)
        fine_hit = _object_indicator(fine_x, fine_y, obj, spec.shape_family)
        alpha = fine_hit.reshape(s, ss, s, ss).mean(axis=(1, 3))
        image = image * (1.0 - alpha) + obj["fg"] * alpha
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=(s, s))
    image = np.clip(image, 0.0, 1.0)
    return (
        np.round(image * 255.0).astype(np.uint8),
        np.where(mask, 255, 0).astype(np.uint8),
    )


def generate_synthetic(spec: SynthSpec, out_root) -> DatasetManifest:
    """Write `count` image/mask PNG pairs; bitwise deterministic per spec."""
    out_root = Path(out_root)
    img_dir, mask_dir = out_root / "images", out_root / "masks"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directories under {out_root}: {exc}") from exc
    width = max(4, len(str(spec.count - 1)))
    for i in range(spec.count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, i]))
        image, mask = _render_pair(rng, spec)
        stem = f"synth_{i:0{width}d}"
        Image.fromarray(image, mode="L").save(img_dir / f"{stem}.png")
        Image.fromarray(mask, mode="L").save(mask_dir / f"{stem}.png")
    return load_dataset(out_root)
