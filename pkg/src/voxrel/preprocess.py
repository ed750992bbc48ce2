"""Dataset manifests, deterministic splits, and lesion filling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from voxrel.volume import Mask, Volume

SPLITS = ("train", "holdout")


@dataclass
class SubjectRecord:
    id: str
    image_path: str
    label: int
    lesion_mask_path: str | None = None
    wm_mask_path: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Subject table for one dataset; paths are relative to ``root``."""

    name: str
    dims: tuple[int, int, int]
    seed: int
    subjects: list[SubjectRecord]
    root: Path | None = None  # set when loaded from / saved to disk

    def split_subjects(self, split: str) -> list[SubjectRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.subjects if s.split == split]

    def resolve(self, rel_path: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory; load or save it first")
        return Path(self.root) / rel_path


def _validate_manifest(m: DatasetManifest, check_files: bool) -> None:
    seen = set()
    for s in m.subjects:
        if s.id in seen:
            raise ValueError(f"duplicate subject id {s.id!r}")
        seen.add(s.id)
        if s.label not in (0, 1):
            raise ValueError(f"subject {s.id}: label must be 0 or 1, got {s.label!r}")
        if s.split not in SPLITS:
            raise ValueError(f"subject {s.id}: bad split {s.split!r}")
        if check_files:
            for p in (s.image_path, s.lesion_mask_path, s.wm_mask_path):
                if p is not None and not m.resolve(p).is_file():
                    raise ValueError(f"subject {s.id}: missing file {p}")


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "name": m.name,
        "dims": list(m.dims),
        "seed": int(m.seed),
        "subjects": [
            {
                "id": s.id,
                "image": s.image_path,
                "lesion_mask": s.lesion_mask_path,
                "wm_mask": s.wm_mask_path,
                "label": int(s.label),
                "split": s.split,
            }
            for s in m.subjects
        ],
    }
    m.root = path.parent
    _validate_manifest(m, check_files=False)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        subjects = [
            SubjectRecord(
                id=str(s["id"]),
                image_path=s["image"],
                lesion_mask_path=s.get("lesion_mask"),
                wm_mask_path=s.get("wm_mask"),
                label=int(s["label"]),
                split=s.get("split", "train"),
            )
            for s in doc["subjects"]
        ]
        m = DatasetManifest(
            name=str(doc["name"]),
            dims=tuple(int(d) for d in doc["dims"]),
            seed=int(doc["seed"]),
            subjects=subjects,
            root=path.parent,
        )
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed manifest ({e})") from None
    _validate_manifest(m, check_files=True)
    return m


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_counts(class_sizes: dict[int, int], fraction: float) -> dict[int, int]:
    """Per-class holdout counts: floor quotas, remainders by largest share.

    The overall count is round-half-up of fraction * total; ties between
    classes go to the smaller label.
    """
    total = _round_half_up(sum(class_sizes.values()) * fraction)
    quotas = {c: n * fraction for c, n in class_sizes.items()}
    counts = {c: int(math.floor(q)) for c, q in quotas.items()}
    counts = {c: min(v, class_sizes[c]) for c, v in counts.items()}
    leftover = total - sum(counts.values())
    order = sorted(class_sizes, key=lambda c: (-(quotas[c] - counts[c]), c))
    i = 0
    while leftover > 0 and i < 10 * len(order):
        c = order[i % len(order)]
        if counts[c] < class_sizes[c]:
            counts[c] += 1
            leftover -= 1
        i += 1
    return counts


def split_dataset(m: DatasetManifest, holdout_fraction: float = 0.15, seed: int = 0) -> DatasetManifest:
    """Assign a stratified random holdout split; deterministic per seed."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(m.subjects):
        by_class.setdefault(s.label, []).append(i)
    if len(by_class) < 2:
        raise ValueError("both classes must be present to split")
    for label, idxs in by_class.items():
        if len(idxs) < 2:
            raise ValueError(f"class {label} has fewer than 2 subjects")
    counts = stratified_counts({c: len(v) for c, v in by_class.items()}, holdout_fraction)
    rng = np.random.default_rng([int(seed), 0x5B17])
    holdout: set[int] = set()
    for label in sorted(by_class):
        perm = rng.permutation(len(by_class[label]))
        for j in perm[: counts[label]]:
            holdout.add(by_class[label][j])
    subjects = [
        replace(s, split="holdout" if i in holdout else "train") for i, s in enumerate(m.subjects)
    ]
    return DatasetManifest(m.name, m.dims, m.seed, subjects, m.root)


@dataclass(frozen=True)
class FillParams:
    """Neighborhood scheme for replacing lesion voxels with NAWM statistics."""

    initial_radius: int = 2
    max_radius: int = 8
    min_samples: int = 10
    noise: bool = True

    def __post_init__(self):
        if not 1 <= self.initial_radius <= self.max_radius:
            raise ValueError("need 1 <= initial_radius <= max_radius")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


def fill_lesions(v: Volume, lesions: Mask, wm: Mask, p: FillParams = FillParams(), seed: int = 0) -> Volume:
    """Replace lesion voxels with local normal-appearing white matter values.

    Each lesion voxel takes the mean intensity of NAWM voxels (white matter
    outside the lesion mask) in the smallest cube of radius
    initial_radius..max_radius holding at least ``min_samples`` of them,
    falling back to the global NAWM mean. With ``noise`` on, a seeded
    Gaussian perturbation with the neighborhood's NAWM deviation is added.
    """
    if not (v.dims == lesions.dims == wm.dims):
        raise ValueError(f"dims mismatch: volume {v.dims}, lesions {lesions.dims}, wm {wm.dims}")
    lesion_idx = np.argwhere(lesions.data == 1)
    if len(lesion_idx) == 0:
        return Volume(v.dims, v.data.copy())
    nawm = (wm.data == 1) & (lesions.data == 0)
    if not nawm.any():
        raise ValueError("lesions present but no normal-appearing white matter available")
    data = v.data.astype(np.float64)
    global_vals = data[nawm]
    global_mean = float(global_vals.mean())
    global_std = float(global_vals.std())
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal(len(lesion_idx)) if p.noise else None
    out = data.copy()
    nx, ny, nz = v.dims
    for k, (x, y, z) in enumerate(lesion_idx):
        mean, std = global_mean, global_std
        for r in range(p.initial_radius, p.max_radius + 1):
            sl = (
                slice(max(x - r, 0), min(x + r + 1, nx)),
                slice(max(y - r, 0), min(y + r + 1, ny)),
                slice(max(z - r, 0), min(z + r + 1, nz)),
            )
            vals = data[sl][nawm[sl]]
            if len(vals) >= p.min_samples:
                mean = float(vals.mean())
                std = float(vals.std())
                break
        value = mean + (draws[k] * std if p.noise else 0.0)
        out[x, y, z] = value
    return Volume(v.dims, out.astype(np.float32))
