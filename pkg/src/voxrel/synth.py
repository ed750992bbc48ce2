"""Deterministic brain-like phantoms: tissue ellipsoids, lesions, atrophy.

The phantom is deliberately minimal; what matters is the causal structure.
In the lesion regime patients carry hyperintense white-matter blobs with a
posterior periventricular placement bias while controls carry at most a few
tiny ones. In the atrophy regime the classes differ by ventricle size
instead, giving a related but distinct task for pretraining.

Every phantom contains a small constant-intensity calibration marker
outside the brain. It pins the intensity maximum, so per-subject min-max
scaling applies the same affine map to every subject and class membership
leaves no trace in the global intensity scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from voxrel.preprocess import DatasetManifest, SubjectRecord, save_manifest
from voxrel.volume import Mask, Volume, minmax_scale, read_vvol, save_mask, save_volume, write_vvol

REGIMES = ("lesion", "atrophy")
CLASSES = ("patient", "control")


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (32, 38, 32)
    brain_semi_axes: tuple[float, float, float] = (13.0, 16.0, 13.0)
    ventricle_semi_axes: tuple[float, float, float] = (2.2, 5.0, 2.2)
    ventricle_separation: float = 7.0
    gm_mean: float = 0.62
    gm_std: float = 0.03
    wm_mean: float = 0.45
    wm_std: float = 0.03
    csf_mean: float = 0.15
    csf_std: float = 0.03
    smoothing_sigma: float = 0.8
    gm_shell_inner: float = 0.8
    thalamus_semi_axes: tuple[float, float, float] = (2.0, 2.5, 2.0)
    thalamus_y_offset: float = 6.5
    periventricular_radius: float = 3.0
    lesion_count_range: tuple[int, int] = (3, 8)
    lesion_radius_range: tuple[float, float] = (1.4, 2.6)
    periventricular_bias: float = 0.8
    hyperintensity_delta: float = 0.35
    control_lesion_count_range: tuple[int, int] = (0, 2)
    control_lesion_radius_range: tuple[float, float] = (0.8, 1.4)
    atrophy_scale_range: tuple[float, float] = (1.35, 1.7)
    atrophy_control_scale_range: tuple[float, float] = (0.9, 1.1)
    fiducial_radius: float = 1.2
    fiducial_margin: int = 4
    fiducial_intensity: float = 1.0

    def __post_init__(self):
        if any(d < 16 for d in self.dims):
            raise ValueError("phantom dims must be at least 16 per axis")
        if max(self.lesion_radius_range) >= min(self.brain_semi_axes):
            raise ValueError("lesion radius must be smaller than the brain")
        if not 0.0 <= self.periventricular_bias <= 1.0:
            raise ValueError("periventricular bias must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class Parcellation:
    """Label volume plus region names; names[k] names label k, 0 = background."""

    labels: np.ndarray  # uint16, [x, y, z]
    names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        present = np.unique(self.labels)
        if present.max(initial=0) >= len(self.names):
            raise ValueError("every nonzero label needs a name")


REGION_NAMES = [
    "background",
    "ventricles",
    "gm_shell",
    "thalamus",
    "periventricular_posterior_wm",
    "periventricular_anterior_wm",
    "deep_wm",
]


def _grids(dims):
    x = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    return x, y, z


def _ellipsoid(dims, center, semi_axes):
    x, y, z = _grids(dims)
    rho = (
        ((x - center[0]) / semi_axes[0]) ** 2
        + ((y - center[1]) / semi_axes[1]) ** 2
        + ((z - center[2]) / semi_axes[2]) ** 2
    )
    return rho


def _center(dims):
    return tuple((d - 1) / 2.0 for d in dims)


def _anatomy(p: PhantomParams, ventricle_scale: float) -> dict[str, np.ndarray]:
    """Boolean tissue regions for one subject's geometry."""
    dims = p.dims
    c = _center(dims)
    rho_brain = _ellipsoid(dims, c, p.brain_semi_axes)
    brain = rho_brain <= 1.0
    half_sep = p.ventricle_separation / 2.0
    vsemi = tuple(a * ventricle_scale for a in p.ventricle_semi_axes)
    vent = np.zeros(dims, dtype=bool)
    thal = np.zeros(dims, dtype=bool)
    for side in (-1.0, 1.0):
        vc = (c[0] + side * half_sep, c[1], c[2])
        vent |= _ellipsoid(dims, vc, vsemi) <= 1.0
        tc = (c[0] + side * half_sep, c[1] + p.thalamus_y_offset, c[2])
        thal |= _ellipsoid(dims, tc, p.thalamus_semi_axes) <= 1.0
    vent &= brain
    thal &= brain & ~vent
    gm_shell = brain & (rho_brain > p.gm_shell_inner**2)
    wm = brain & ~gm_shell & ~vent & ~thal
    return {"brain": brain, "ventricles": vent, "thalamus": thal, "gm_shell": gm_shell, "wm": wm}


def _fiducial_mask(p: PhantomParams) -> np.ndarray:
    m = p.fiducial_margin
    c = _center(p.dims)
    center = (float(m), c[1], float(m))
    return _ellipsoid(p.dims, center, (p.fiducial_radius,) * 3) <= 1.0


def _periventricular(p: PhantomParams, regions: dict) -> tuple[np.ndarray, np.ndarray]:
    """(posterior, anterior) periventricular WM, split at the y midplane."""
    dist = distance_transform_edt(~regions["ventricles"])
    pv = regions["wm"] & (dist <= p.periventricular_radius)
    _, y, _ = _grids(p.dims)
    cy = _center(p.dims)[1]
    posterior = pv & np.broadcast_to(y >= cy, p.dims)
    anterior = pv & ~posterior
    return posterior, anterior


def generate_parcellation(p: PhantomParams = PhantomParams()) -> Parcellation:
    """Label the base (unscaled) anatomy into the six named regions."""
    regions = _anatomy(p, ventricle_scale=1.0)
    pv_post, pv_ant = _periventricular(p, regions)
    labels = np.zeros(p.dims, dtype=np.uint16)
    labels[regions["ventricles"]] = 1
    labels[regions["gm_shell"]] = 2
    labels[regions["thalamus"]] = 3
    labels[pv_post] = 4
    labels[pv_ant] = 5
    labels[regions["wm"] & (labels == 0)] = 6
    return Parcellation(labels, list(REGION_NAMES))


def save_parcellation(parc: Parcellation, labels_path, names_path) -> None:
    write_vvol(labels_path, parc.labels, "u16")
    doc = {str(i): name for i, name in enumerate(parc.names)}
    Path(names_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_parcellation(labels_path, names_path) -> Parcellation:
    arr, dtype_name = read_vvol(labels_path)
    if dtype_name != "u16":
        raise ValueError(f"{labels_path}: expected u16 labels, found {dtype_name}")
    doc = json.loads(Path(names_path).read_text(encoding="utf-8"))
    names = [doc[str(i)] for i in range(len(doc))]
    return Parcellation(arr, names)


def _place_lesions(rng, p: PhantomParams, regions, count_range, radius_range):
    lesion = np.zeros(p.dims, dtype=bool)
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    if n == 0:
        return lesion
    wm_coords = np.argwhere(regions["wm"])
    if len(wm_coords) == 0:
        raise ValueError("lesion placement impossible: no white matter region")
    pv_post, _ = _periventricular(p, regions)
    pv_coords = np.argwhere(pv_post)
    x, y, z = _grids(p.dims)
    for _ in range(n):
        biased = rng.random() < p.periventricular_bias and len(pv_coords) > 0
        pool = pv_coords if biased else wm_coords
        cx, cy, cz = pool[int(rng.integers(len(pool)))]
        radius = float(rng.uniform(*radius_range))
        sphere = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= radius**2
        lesion |= sphere & regions["wm"]
    return lesion


def generate_subject(
    cls: str, regime: str, p: PhantomParams = PhantomParams(), seed: int = 0
) -> tuple[Volume, Mask, Mask]:
    """One phantom: (scaled image, lesion mask, white-matter mask)."""
    if cls not in CLASSES:
        raise ValueError(f"class must be one of {CLASSES}, got {cls!r}")
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    rng = np.random.default_rng(seed)

    if regime == "atrophy":
        lo, hi = p.atrophy_scale_range if cls == "patient" else p.atrophy_control_scale_range
        scale = float(rng.uniform(lo, hi))
    else:
        scale = 1.0
    regions = _anatomy(p, scale)

    intensity = np.zeros(p.dims, dtype=np.float64)
    noise = rng.standard_normal(p.dims)
    for region, mean, std in (
        (regions["gm_shell"], p.gm_mean, p.gm_std),
        (regions["thalamus"], p.gm_mean, p.gm_std),
        (regions["wm"], p.wm_mean, p.wm_std),
        (regions["ventricles"], p.csf_mean, p.csf_std),
    ):
        intensity[region] = mean + std * noise[region]
    intensity = gaussian_filter(intensity, sigma=p.smoothing_sigma)

    if regime == "lesion":
        count_range = p.lesion_count_range if cls == "patient" else p.control_lesion_count_range
        radius_range = p.lesion_radius_range if cls == "patient" else p.control_lesion_radius_range
        lesion = _place_lesions(rng, p, regions, count_range, radius_range)
    else:
        lesion = np.zeros(p.dims, dtype=bool)
    intensity[lesion] += p.hyperintensity_delta

    intensity[_fiducial_mask(p)] = p.fiducial_intensity
    vol = minmax_scale(Volume(p.dims, intensity.astype(np.float32)))
    return vol, Mask(p.dims, lesion.astype(np.uint8)), Mask(p.dims, regions["wm"].astype(np.uint8))


def generate_dataset(
    n_per_class: int,
    regime: str,
    p: PhantomParams = PhantomParams(),
    seed: int = 0,
    out_dir=None,
) -> DatasetManifest:
    """Generate a balanced dataset on disk and return its manifest.

    Per-subject seeds are ``seed ^ index`` with patients indexed first, so
    subjects are independent of generation order.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if out_dir is None:
        raise ValueError("out_dir is required")
    out_dir = Path(out_dir)
    for sub in ("images", "lesions", "wm"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    subjects = []
    specs = [("patient", 1, "p")] * n_per_class + [("control", 0, "c")] * n_per_class
    for index, (cls, label, prefix) in enumerate(specs):
        sid = f"{prefix}{index % n_per_class:03d}"
        vol, lesion, wm = generate_subject(cls, regime, p, seed=int(seed) ^ index)
        save_volume(vol, out_dir / "images" / f"{sid}.vvol")
        save_mask(lesion, out_dir / "lesions" / f"{sid}.vvol")
        save_mask(wm, out_dir / "wm" / f"{sid}.vvol")
        subjects.append(
            SubjectRecord(
                id=sid,
                image_path=f"images/{sid}.vvol",
                lesion_mask_path=f"lesions/{sid}.vvol",
                wm_mask_path=f"wm/{sid}.vvol",
                label=label,
            )
        )
    manifest = DatasetManifest(f"synth-{regime}", p.dims, int(seed), subjects, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
