"""Synthetic multi-annotator dataset with a known ambiguity distribution.

Each sample is a smooth radial intensity blob plus pixel noise. Annotator k
thresholds the noiseless blob at its own level tau_k (drawn per sample from a
configurable spread), so the annotations are nested masks of varying extent;
with probability p_miss an annotator marks no lesion at all. The generating
parameters are kept in oracle_meta so the annotation distribution is known
exactly, which is what makes distribution-matching metrics testable.

On-disk contract: `manifest.json` at the root, 16-bit grayscale images under
`images/{id}.png`, 8-bit binary masks (0/255) under `masks/{id}_{annotator}.png`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class BoxPrompt:
    """Half-open pixel box [x1, x2) x [y1, y2); x indexes columns, y rows."""

    x1: int
    y1: int
    x2: int
    y2: int

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.x1 < self.x2 <= width):
            raise ValueError(f"invalid box x-range {self.x1}..{self.x2} for width {width}")
        if not (0 <= self.y1 < self.y2 <= height):
            raise ValueError(f"invalid box y-range {self.y1}..{self.y2} for height {height}")

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class AnnotatedSample:
    image: np.ndarray  # float32 [H, W] in [0, 1], 16-bit quantized
    box: BoxPrompt
    annotations: list[np.ndarray]  # uint8 {0, 1} masks, one per annotator
    oracle_meta: dict | None = None
    sample_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape  # type: ignore[return-value]


@dataclass
class Dataset:
    samples: list[AnnotatedSample]
    split: str

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError(f"dataset split '{self.split}' is empty")
        h, w = self.samples[0].shape
        a = len(self.samples[0].annotations)
        for s in self.samples:
            if s.shape != (h, w) or len(s.annotations) != a:
                raise ValueError(f"sample {s.sample_id} breaks the shared (H, W, A) contract")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def annotators(self) -> int:
        return len(self.samples[0].annotations)


@dataclass
class DatasetBundle:
    """All splits of one generated dataset plus its provenance record."""

    splits: dict[str, Dataset]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Dataset:
        return self.splits[name]

    def all_samples(self) -> list[AnnotatedSample]:
        out: list[AnnotatedSample] = []
        for name in SPLIT_NAMES:
            if name in self.splits:
                out.extend(self.splits[name].samples)
        return out


@dataclass
class GenConfig:
    n_samples: int
    height: int = 64
    width: int = 64
    annotators: int = 4
    p_miss: float = 0.1
    threshold_spread: float = 0.25
    noise_sigma: float = 0.05
    box_jitter: int = 2
    # train/val/test fractions mirroring a 722/144/144 style split
    split_fracs: tuple[float, float, float] = (0.72, 0.14, 0.14)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not 0.0 <= self.p_miss < 1.0:
            raise ValueError(f"p_miss must be in [0, 1), got {self.p_miss}")
        if not 0.0 <= self.threshold_spread <= 0.9:
            raise ValueError(f"threshold_spread must be in [0, 0.9], got {self.threshold_spread}")
        if self.annotators < 1:
            raise ValueError("need at least one annotator")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be >= 0")
        if abs(sum(self.split_fracs) - 1.0) > 1e-9:
            raise ValueError("split_fracs must sum to 1")


def blob_profile(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Noiseless radial intensity profile exp(-d^2 / (2 radius^2)), float64 [H, W]."""
    yy = np.arange(height, dtype=np.float64)[:, None]
    xx = np.arange(width, dtype=np.float64)[None, :]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return np.exp(-0.5 * d2 / (radius * radius))


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round to the 16-bit grid used on disk; float32 [0, 1]."""
    levels = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    return (levels.astype(np.float32) / np.float32(65535.0)).astype(np.float32)


def masks_from_oracle(meta: dict, height: int, width: int) -> list[np.ndarray]:
    """Recompute the annotator masks recorded in oracle_meta, bit-exactly."""
    profile = blob_profile(height, width, meta["center_y"], meta["center_x"], meta["radius"])
    masks = []
    for tau, missed in zip(meta["taus"], meta["missed"]):
        if missed:
            masks.append(np.zeros((height, width), dtype=np.uint8))
        else:
            masks.append((profile >= tau).astype(np.uint8))
    return masks


def derive_box(
    annotations: list[np.ndarray],
    jitter: int = 0,
    rng: np.random.Generator | None = None,
) -> BoxPrompt:
    """Tight box around the union of the annotations, each side jittered by a
    uniform integer in [-jitter, +jitter] and clamped back to a valid box.

    An all-empty union falls back to a centered H/2 x W/2 box.
    """
    if not annotations:
        raise ValueError("need at least one annotation")
    if jitter > 0 and rng is None:
        raise ValueError("jitter > 0 requires an rng")
    height, width = annotations[0].shape
    union = np.zeros((height, width), dtype=bool)
    for m in annotations:
        union |= m.astype(bool)
    if not union.any():
        return BoxPrompt(width // 4, height // 4, width // 4 + width // 2, height // 4 + height // 2)
    ys, xs = np.nonzero(union)
    x1, x2 = int(xs.min()), int(xs.max()) + 1
    y1, y2 = int(ys.min()), int(ys.max()) + 1
    if jitter > 0:
        assert rng is not None
        dx1, dy1, dx2, dy2 = (int(v) for v in rng.integers(-jitter, jitter + 1, size=4))
        x1 = min(max(x1 + dx1, 0), width)
        x2 = min(max(x2 + dx2, 0), width)
        y1 = min(max(y1 + dy1, 0), height)
        y2 = min(max(y2 + dy2, 0), height)
        x2 = max(x2, 1)
        x1 = min(x1, x2 - 1)
        y2 = max(y2, 1)
        y1 = min(y1, y2 - 1)
    return BoxPrompt(x1, y1, x2, y2)


def _gen_sample(cfg: GenConfig, seed: int, index: int) -> AnnotatedSample:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    h, w = cfg.height, cfg.width
    cy = float(rng.uniform(0.3, 0.7) * h)
    cx = float(rng.uniform(0.3, 0.7) * w)
    radius = float(rng.uniform(0.10, 0.18) * min(h, w))
    lo = 0.5 - cfg.threshold_spread / 2.0
    hi = 0.5 + cfg.threshold_spread / 2.0
    taus = [float(t) for t in rng.uniform(lo, hi, size=cfg.annotators)]
    missed = [bool(v) for v in rng.random(cfg.annotators) < cfg.p_miss]

    profile = blob_profile(h, w, cy, cx, radius)
    annotations = []
    for tau, miss in zip(taus, missed):
        if miss:
            annotations.append(np.zeros((h, w), dtype=np.uint8))
        else:
            annotations.append((profile >= tau).astype(np.uint8))

    noisy = profile + rng.normal(0.0, cfg.noise_sigma, size=(h, w)) if cfg.noise_sigma > 0 else profile
    image = quantize_image(noisy)

    fallback = not any(m.any() for m in annotations)
    box = derive_box(annotations, jitter=cfg.box_jitter, rng=rng)
    oracle_meta = {
        "center_y": cy,
        "center_x": cx,
        "radius": radius,
        "taus": taus,
        "missed": missed,
        "box_fallback": fallback,
    }
    return AnnotatedSample(
        image=image,
        box=box,
        annotations=annotations,
        oracle_meta=oracle_meta,
        sample_id=f"{index:05d}",
    )


def split_counts(n: int, fracs: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(fracs[0] * n))
    n_val = int(round(fracs[1] * n))
    n_val = min(n_val, n - n_train)
    n_test = n - n_train - n_val
    return n_train, n_val, n_test


def gen_synthetic(cfg: GenConfig, seed: int) -> DatasetBundle:
    """Generate the full dataset and partition it into disjoint splits.

    Fully reproducible from (cfg, seed); sample i only depends on (seed, i).
    Splits that would be empty are omitted from the bundle.
    """
    samples = [_gen_sample(cfg, seed, i) for i in range(cfg.n_samples)]
    n_train, n_val, n_test = split_counts(cfg.n_samples, cfg.split_fracs)
    parts = {
        "train": samples[:n_train],
        "val": samples[n_train : n_train + n_val],
        "test": samples[n_train + n_val :],
    }
    splits = {name: Dataset(part, name) for name, part in parts.items() if part}
    meta = {"generator": asdict(cfg), "seed": seed}
    meta["generator"]["split_fracs"] = list(cfg.split_fracs)
    return DatasetBundle(splits=splits, meta=meta)


# ---------------------------------------------------------------------------
# on-disk round trip


def save_dataset(data: DatasetBundle | Dataset, out_dir: str | Path) -> None:
    """Write images, masks, then the manifest (last, so partial writes lack it)."""
    bundle = data if isinstance(data, DatasetBundle) else DatasetBundle({data.split: data})
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    all_samples = bundle.all_samples()
    if not all_samples:
        raise ValueError("nothing to save")
    h, w = all_samples[0].shape
    a = len(all_samples[0].annotations)

    entries = []
    for split_name in SPLIT_NAMES:
        if split_name not in bundle.splits:
            continue
        for sample in bundle.splits[split_name].samples:
            if sample.shape != (h, w) or len(sample.annotations) != a:
                raise ValueError(f"sample {sample.sample_id} breaks the shared (H, W, A) contract")
            sid = sample.sample_id
            levels = np.round(sample.image.astype(np.float64) * 65535.0).astype(np.uint16)
            Image.fromarray(levels).save(out / "images" / f"{sid}.png")
            for k, mask in enumerate(sample.annotations):
                Image.fromarray((mask.astype(np.uint8) * 255)).save(out / "masks" / f"{sid}_{k}.png")
            entries.append(
                {
                    "id": sid,
                    "split": split_name,
                    "box": sample.box.as_list(),
                    "oracle": sample.oracle_meta,
                }
            )

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "height": h,
        "width": w,
        "annotators": a,
        "splits": {name: len(ds) for name, ds in bundle.splits.items()},
        "meta": bundle.meta,
        "samples": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(in_dir: str | Path, split: str | None = None) -> DatasetBundle | Dataset:
    """Load a dataset directory; pass `split` to get just that Dataset."""
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version in {manifest_path}")

    h, w, a = manifest["height"], manifest["width"], manifest["annotators"]
    by_split: dict[str, list[AnnotatedSample]] = {}
    for entry in manifest["samples"]:
        sid = entry["id"]
        img_path = root / "images" / f"{sid}.png"
        if not img_path.is_file():
            raise ValueError(f"missing image file: {img_path}")
        levels = np.asarray(Image.open(img_path))
        if levels.shape != (h, w):
            raise ValueError(f"image shape {levels.shape} != manifest ({h}, {w}): {img_path}")
        image = (levels.astype(np.float32) / np.float32(65535.0)).astype(np.float32)
        annotations = []
        for k in range(a):
            mask_path = root / "masks" / f"{sid}_{k}.png"
            if not mask_path.is_file():
                raise ValueError(f"missing mask file: {mask_path}")
            raw = np.asarray(Image.open(mask_path))
            if raw.shape != (h, w):
                raise ValueError(f"mask shape {raw.shape} != manifest ({h}, {w}): {mask_path}")
            bad = ~np.isin(raw, (0, 255))
            if bad.any():
                raise ValueError(f"non-binary pixel values in mask file: {mask_path}")
            annotations.append((raw == 255).astype(np.uint8))
        box = BoxPrompt(*entry["box"])
        box.validate(h, w)
        by_split.setdefault(entry["split"], []).append(
            AnnotatedSample(
                image=image,
                box=box,
                annotations=annotations,
                oracle_meta=entry.get("oracle"),
                sample_id=sid,
            )
        )

    splits = {name: Dataset(samples, name) for name, samples in by_split.items()}
    bundle = DatasetBundle(splits=splits, meta=manifest.get("meta", {}))
    if split is None:
        return bundle
    if split not in bundle.splits:
        raise ValueError(f"split '{split}' not present in {root} (have {sorted(bundle.splits)})")
    return bundle.splits[split]


def samples_equal(a: AnnotatedSample, b: AnnotatedSample) -> bool:
    return (
        a.sample_id == b.sample_id
        and a.box == b.box
        and np.array_equal(a.image, b.image)
        and len(a.annotations) == len(b.annotations)
        and all(np.array_equal(x, y) for x, y in zip(a.annotations, b.annotations))
        and a.oracle_meta == b.oracle_meta
    )


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    if set(a.splits) != set(b.splits) or a.meta != b.meta:
        return False
    for name in a.splits:
        sa, sb = a.splits[name].samples, b.splits[name].samples
        if len(sa) != len(sb) or not all(samples_equal(x, y) for x, y in zip(sa, sb)):
            return False
    return True
