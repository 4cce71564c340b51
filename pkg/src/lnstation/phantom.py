"""Synthetic head-and-neck phantom cohorts with known ground truth.

Each patient is a CT-like volume containing 12 axis-aligned ellipsoid
nodal stations (5 mirrored left/right pairs plus 2 midline), lymph
nodes rendered as ellipsoids inside the stations, and a proposal list
standing in for an upstream candidate detector. Which stations carry
metastatic nodes is drawn from a Gaussian copula, so station
involvement is correlated across stations; node short-axis sizes are
drawn so a configured fraction falls below 10 mm.

Appearance is deliberately ambiguous at the default separability: each
node draws a private mean-intensity offset whose spread dwarfs the
metastatic contrast, which is what leaves room for station context and
distance cues to matter downstream.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, DataError
from .voxgrid import Mask3D, Volume3D, load_mask, load_volume, save_grid

N_STATIONS = 12


class GenerationError(DataError):
    """Ran out of retries placing a node inside a station."""


# Station centres and semi-axes as fractions of the grid, chosen so the
# ellipsoids stay disjoint under the per-station jitter below.
# (x, y, z) centre fractions; pairs mirror in x around 0.5.
_PAIR_CENTRES = (
    (0.26, 0.36, 0.15),
    (0.26, 0.58, 0.325),
    (0.26, 0.36, 0.50),
    (0.26, 0.58, 0.675),
    (0.26, 0.36, 0.85),
)
_MIDLINE_CENTRES = (
    (0.50, 0.78, 0.30),
    (0.50, 0.76, 0.70),
)
_SEMI_FRACTIONS = (0.115, 0.105, 0.095)

# P(metastasis) per station slot 1..12; pairs share a value. Synthetic
# numbers shaped like the usual involvement gradient, not clinical ones.
_DEFAULT_STATION_PROBS = (
    0.40, 0.40, 0.30, 0.30, 0.22, 0.22, 0.18, 0.18, 0.12, 0.12, 0.30, 0.20,
)


@dataclass
class IntensityModel:
    """HU-like intensity parameters for rendering."""

    background_mean: float = 0.0
    background_sigma: float = 20.0
    station_offset: float = 8.0
    ln_mean: float = 60.0
    ln_sigma: float = 12.0
    ln_mean_jitter: float = 18.0
    met_contrast: float = 60.0

    def __post_init__(self):
        if self.background_sigma < 0 or self.ln_sigma < 0 or self.ln_mean_jitter < 0:
            raise ConfigError("IntensityModel: sigmas must be >= 0")


@dataclass
class PhantomConfig:
    dims: tuple = (96, 96, 96)
    spacing: tuple = (1.25, 1.25, 1.25)
    station_probs: tuple = _DEFAULT_STATION_PROBS
    correlation_rho: float = 0.8
    correlation: tuple | None = None  # full 12x12 overrides correlation_rho
    normal_ln_mean: float = 1.2       # benign nodes per station, Poisson
    met_extra_mean: float = 0.2       # metastatic count per flagged station = 1 + Poisson
    fraction_below_10mm: float = 0.70
    small_axis_range_mm: tuple = (4.0, 10.0)
    large_axis_range_mm: tuple = (10.0, 20.0)
    normal_axis_range_mm: tuple = (4.0, 12.0)  # reactive benign nodes pass 10 mm too
    separability: float = 0.25
    intensity: IntensityModel = field(default_factory=IntensityModel)
    recall: float = 0.9065
    fp_per_patient_mean: float = 4.0
    fp_inside_station_fraction: float = 0.7

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.station_probs = tuple(float(p) for p in self.station_probs)
        if len(self.station_probs) != N_STATIONS:
            raise ConfigError(
                f"PhantomConfig: need {N_STATIONS} station probabilities, "
                f"got {len(self.station_probs)}"
            )
        if any(not 0.0 <= p <= 1.0 for p in self.station_probs):
            raise ConfigError("PhantomConfig: station probabilities must be in [0, 1]")
        if not 0.0 <= self.recall <= 1.0:
            raise ConfigError(f"PhantomConfig: recall must be in [0, 1], got {self.recall}")
        if not 0.0 <= self.fraction_below_10mm <= 1.0:
            raise ConfigError("PhantomConfig: fraction_below_10mm must be in [0, 1]")
        if not 0.0 <= self.fp_inside_station_fraction <= 1.0:
            raise ConfigError("PhantomConfig: fp_inside_station_fraction must be in [0, 1]")
        if self.fp_per_patient_mean < 0:
            raise ConfigError("PhantomConfig: fp_per_patient_mean must be >= 0")
        if self.normal_ln_mean < 0 or self.met_extra_mean < 0:
            raise ConfigError("PhantomConfig: LN count means must be >= 0")
        for name in ("small_axis_range_mm", "large_axis_range_mm", "normal_axis_range_mm"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo < hi:
                raise ConfigError(f"PhantomConfig: {name} must satisfy 0 < lo < hi, got {(lo, hi)}")
        if isinstance(self.intensity, dict):
            self.intensity = IntensityModel(**self.intensity)

    def correlation_matrix(self) -> np.ndarray:
        if self.correlation is not None:
            mat = np.asarray(self.correlation, dtype=np.float64)
        else:
            rho = float(self.correlation_rho)
            mat = np.full((N_STATIONS, N_STATIONS), rho)
            np.fill_diagonal(mat, 1.0)
        _validate_correlation(mat)
        return mat


def _validate_correlation(mat: np.ndarray) -> None:
    if mat.shape != (N_STATIONS, N_STATIONS):
        raise ConfigError(f"correlation must be {N_STATIONS}x{N_STATIONS}, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ConfigError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(mat), 1.0, atol=1e-12):
        raise ConfigError("correlation matrix must have unit diagonal")
    eigvals = np.linalg.eigvalsh(mat)
    if eigvals.min() < -1e-10:
        raise ConfigError(
            f"correlation matrix must be positive semi-definite, min eigenvalue {eigvals.min():g}"
        )


@dataclass
class LNInstance:
    ln_id: int
    center: tuple            # voxel indices
    voxels: np.ndarray       # (n, 3) int
    short_axis_mm: float
    is_metastatic: bool
    station: int             # 1-based slot of the containing station


@dataclass
class Proposal:
    center: tuple
    source: str  # "ln:<id>" or "fp"


@dataclass
class PatientCase:
    patient_id: str
    volume: Volume3D
    stations: Mask3D
    ln_instances: list
    station_labels: np.ndarray  # (12,) uint8, 1 iff a metastatic centre inside
    proposals: list


# ---------------------------------------------------------------------------
# copula draw of station involvement


def sample_station_metastasis(
    cfg: PhantomConfig, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Correlated binary draws of which stations are metastatic.

    A latent normal vector with the configured correlation is
    thresholded at the per-station normal quantile, so marginals are
    exactly ``station_probs`` while co-occurrence follows the copula.
    Returns (12,) for ``size=None``, else (size, 12).
    """
    corr = cfg.correlation_matrix()
    z = _sample_latent(corr, rng, size=size)
    thresholds = norm.ppf(np.asarray(cfg.station_probs))
    return (z < thresholds).astype(np.uint8)


def _sample_latent(corr: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    # eigen factorisation tolerates the PSD-singular case (e.g. rho = 1)
    eigvals, eigvecs = np.linalg.eigh(corr)
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    shape = (N_STATIONS,) if size is None else (size, N_STATIONS)
    z = rng.standard_normal(shape)
    return z @ factor.T


# ---------------------------------------------------------------------------
# geometry helpers


def _station_geometry(dims, rng: np.random.Generator):
    """Centre and semi-axes (in voxels) for the 12 station slots.

    Slots: pair i occupies 2i+1 (left) and 2i+2 (right); the two
    midline stations take slots 11 and 12.
    """
    dims = np.asarray(dims, dtype=np.float64)
    geoms = []
    for cx, cy, cz in _PAIR_CENTRES:
        for x in (cx, 1.0 - cx):  # left slot first, then mirrored right
            centre = np.array([x, cy, cz]) * dims
            semis = np.asarray(_SEMI_FRACTIONS) * dims * rng.uniform(0.92, 1.08, size=3)
            geoms.append((centre, semis))
    for cx, cy, cz in _MIDLINE_CENTRES:
        centre = np.array([cx, cy, cz]) * dims
        semis = np.asarray(_SEMI_FRACTIONS) * dims * rng.uniform(0.92, 1.08, size=3)
        geoms.append((centre, semis))
    return geoms


def _ellipsoid_voxels(centre, semis, dims) -> np.ndarray:
    """Voxel indices inside the ellipsoid, clipped to the grid."""
    lo = [max(int(np.floor(c - s)), 0) for c, s in zip(centre, semis)]
    hi = [min(int(np.ceil(c + s)) + 1, d) for c, s, d in zip(centre, semis, dims)]
    if any(l >= h for l, h in zip(lo, hi)):
        return np.empty((0, 3), dtype=np.intp)
    ax = [np.arange(l, h) for l, h in zip(lo, hi)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    r = (
        ((gx - centre[0]) / semis[0]) ** 2
        + ((gy - centre[1]) / semis[1]) ** 2
        + ((gz - centre[2]) / semis[2]) ** 2
    )
    inside = r <= 1.0
    return np.stack([gx[inside], gy[inside], gz[inside]], axis=1).astype(np.intp)


def sample_short_axis_mm(
    cfg: PhantomConfig, rng: np.random.Generator, is_metastatic: bool = True
) -> float:
    """Short-axis draw in mm.

    Metastatic nodes follow the small/large uniform mixture hitting
    ``fraction_below_10mm``; benign nodes span a reactive range that
    crosses 10 mm, so size alone cannot separate the classes.
    """
    if not is_metastatic:
        lo, hi = cfg.normal_axis_range_mm
    elif rng.random() < cfg.fraction_below_10mm:
        lo, hi = cfg.small_axis_range_mm
    else:
        lo, hi = cfg.large_axis_range_mm
    return float(rng.uniform(lo, hi))


# ---------------------------------------------------------------------------
# patient generation


_PLACEMENT_RETRIES = 40


def generate_patient(cfg: PhantomConfig, seed: int, patient_id: str) -> PatientCase:
    """Render one patient; the same (cfg, seed) gives identical output."""
    rng = np.random.default_rng(seed)
    dims = cfg.dims
    spacing = np.asarray(cfg.spacing)

    geoms = _station_geometry(dims, rng)
    stations = np.zeros(dims, dtype=np.uint8)
    for slot, (centre, semis) in enumerate(geoms, start=1):
        vox = _ellipsoid_voxels(centre, semis, dims)
        sel = stations[tuple(vox.T)] == 0  # first label wins on overlap
        vox = vox[sel]
        stations[tuple(vox.T)] = slot

    flags = sample_station_metastasis(cfg, rng)

    im = cfg.intensity
    volume = rng.normal(im.background_mean, im.background_sigma, size=dims)
    volume[stations > 0] += im.station_offset

    occupied = np.zeros(dims, dtype=bool)
    instances = []
    ln_id = 0
    for slot in range(1, N_STATIONS + 1):
        n_met = 0
        if flags[slot - 1]:
            n_met = 1 + int(rng.poisson(cfg.met_extra_mean))
        n_normal = int(rng.poisson(cfg.normal_ln_mean))
        for is_met in [True] * n_met + [False] * n_normal:
            ln_id += 1
            inst = _place_ln(
                cfg, rng, slot, geoms[slot - 1], stations, occupied, volume, ln_id, is_met
            )
            instances.append(inst)

    labels = label_from_instances(instances)
    case = PatientCase(
        patient_id=patient_id,
        volume=Volume3D(volume.astype(np.float32), cfg.spacing),
        stations=Mask3D(stations, cfg.spacing),
        ln_instances=instances,
        station_labels=labels,
        proposals=[],
    )
    return generate_proposals(case, cfg, rng)


def label_from_instances(instances) -> np.ndarray:
    """Station label vector: 1 iff some metastatic centre lies in the slot."""
    labels = np.zeros(N_STATIONS, dtype=np.uint8)
    for inst in instances:
        if inst.is_metastatic and 1 <= inst.station <= N_STATIONS:
            labels[inst.station - 1] = 1
    return labels


def _place_ln(cfg, rng, slot, geom, stations, occupied, volume, ln_id, is_met) -> LNInstance:
    spacing = np.asarray(cfg.spacing)
    im = cfg.intensity
    # centres drawn uniformly from the station's still-free voxels, so a
    # large node blanketing most of the station cannot stall placement
    free = np.argwhere((stations == slot) & ~occupied)
    if free.shape[0] == 0:
        raise GenerationError(f"station {slot} fully occupied, cannot place another node")
    for _ in range(_PLACEMENT_RETRIES):
        cvox = tuple(int(v) for v in free[rng.integers(free.shape[0])])

        short_mm = sample_short_axis_mm(cfg, rng, is_metastatic=is_met)
        semi_short = short_mm / 2.0
        in_plane = [semi_short, semi_short * rng.uniform(1.0, 1.6)]
        if rng.random() < 0.5:
            in_plane.reverse()
        semi_mm = np.array([in_plane[0], in_plane[1], semi_short * rng.uniform(0.8, 1.4)])
        semis_vox = np.maximum(semi_mm / spacing, 0.55)
        vox = _ellipsoid_voxels(np.asarray(cvox, dtype=np.float64), semis_vox, cfg.dims)
        if vox.shape[0] == 0 or occupied[tuple(vox.T)].any():
            continue

        occupied[tuple(vox.T)] = True
        mean = im.ln_mean + rng.normal(0.0, im.ln_mean_jitter)
        if is_met:
            mean += cfg.separability * im.met_contrast
        volume[tuple(vox.T)] = mean + rng.normal(0.0, im.ln_sigma, size=vox.shape[0])
        return LNInstance(
            ln_id=ln_id,
            center=cvox,
            voxels=vox,
            short_axis_mm=short_mm,
            is_metastatic=bool(is_met),
            station=slot,
        )
    raise GenerationError(
        f"could not place a lymph node in station {slot} after {_PLACEMENT_RETRIES} tries"
    )


def generate_proposals(case: PatientCase, cfg: PhantomConfig, rng: np.random.Generator) -> PatientCase:
    """Candidate proposals: each true node with probability ``recall``,
    plus Poisson false positives split inside/outside the stations."""
    proposals = []
    taken = set()
    for inst in case.ln_instances:
        if rng.random() < cfg.recall:
            proposals.append(Proposal(center=tuple(inst.center), source=f"ln:{inst.ln_id}"))
            taken.add(tuple(inst.center))

    stations = case.stations.data
    occupied = np.zeros(stations.shape, dtype=bool)
    for inst in case.ln_instances:
        occupied[tuple(inst.voxels.T)] = True
    station_vox = np.argwhere(stations > 0)

    n_fp = int(rng.poisson(cfg.fp_per_patient_mean))
    for _ in range(n_fp):
        inside = rng.random() < cfg.fp_inside_station_fraction
        centre = _sample_fp_center(rng, stations, occupied, station_vox, taken, inside)
        if centre is None:
            continue
        taken.add(centre)
        proposals.append(Proposal(center=centre, source="fp"))
    return dataclasses.replace(case, proposals=proposals)


def _sample_fp_center(rng, stations, occupied, station_vox, taken, inside):
    for _ in range(200):
        if inside and station_vox.shape[0]:
            v = tuple(int(c) for c in station_vox[rng.integers(station_vox.shape[0])])
        else:
            v = tuple(int(rng.integers(d)) for d in stations.shape)
            if stations[v] != 0:
                continue
        if occupied[v] or v in taken:
            continue
        return v
    return None


# ---------------------------------------------------------------------------
# cohort IO


def patient_stem_names(patient_id: str) -> dict:
    return {
        "volume": f"{patient_id}_volume",
        "stations": f"{patient_id}_stations",
        "truth": f"{patient_id}_truth.json",
    }


def save_patient(case: PatientCase, out_dir) -> dict:
    out_dir = Path(out_dir)
    names = patient_stem_names(case.patient_id)
    save_grid(case.volume, out_dir / names["volume"])
    save_grid(case.stations, out_dir / names["stations"])
    truth = {
        "patient_id": case.patient_id,
        "station_labels": [int(v) for v in case.station_labels],
        "ln_instances": [
            {
                "ln_id": inst.ln_id,
                "center": list(inst.center),
                "short_axis_mm": inst.short_axis_mm,
                "is_metastatic": inst.is_metastatic,
                "station": inst.station,
                "voxels": inst.voxels.tolist(),
            }
            for inst in case.ln_instances
        ],
        "proposals": [
            {"center": list(p.center), "source": p.source} for p in case.proposals
        ],
    }
    (out_dir / names["truth"]).write_text(json.dumps(truth, sort_keys=True))
    return names


def load_patient(cohort_dir, patient_id: str) -> PatientCase:
    cohort_dir = Path(cohort_dir)
    names = patient_stem_names(patient_id)
    truth_path = cohort_dir / names["truth"]
    if not truth_path.exists():
        raise DataError(f"load_patient: missing {truth_path}")
    truth = json.loads(truth_path.read_text())
    instances = [
        LNInstance(
            ln_id=e["ln_id"],
            center=tuple(e["center"]),
            voxels=np.asarray(e["voxels"], dtype=np.intp).reshape(-1, 3),
            short_axis_mm=float(e["short_axis_mm"]),
            is_metastatic=bool(e["is_metastatic"]),
            station=int(e["station"]),
        )
        for e in truth["ln_instances"]
    ]
    return PatientCase(
        patient_id=patient_id,
        volume=load_volume(cohort_dir / names["volume"]),
        stations=load_mask(cohort_dir / names["stations"]),
        ln_instances=instances,
        station_labels=np.asarray(truth["station_labels"], dtype=np.uint8),
        proposals=[
            Proposal(center=tuple(p["center"]), source=p["source"])
            for p in truth["proposals"]
        ],
    )


def generate_cohort(cfg: PhantomConfig, n_patients: int, seed: int, train_fraction: float = 2 / 3):
    """In-memory cohort: list of (PatientCase, split) in a fixed order."""
    if n_patients < 0:
        raise ConfigError(f"generate_cohort: n_patients must be >= 0, got {n_patients}")
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=max(n_patients, 1))
    n_train = int(round(n_patients * train_fraction))
    out = []
    for i in range(n_patients):
        pid = f"p{i:04d}"
        case = generate_patient(cfg, int(seeds[i]), pid)
        out.append((case, "train" if i < n_train else "test"))
    return out


def write_cohort(cfg, n_patients, seed, out_dir, train_fraction=2 / 3, config_hash="") -> dict:
    """Generate and persist a cohort; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case, split in generate_cohort(cfg, n_patients, seed, train_fraction):
        names = save_patient(case, out_dir)
        entries.append({"id": case.patient_id, "split": split, "files": names})
    manifest = {
        "config_hash": config_hash,
        "seed": int(seed),
        "n_patients": int(n_patients),
        "patients": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_cohort(cohort_dir, split: str | None = None) -> list:
    """Load cases listed in the manifest, optionally filtered by split."""
    cohort_dir = Path(cohort_dir)
    manifest_path = cohort_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"load_cohort: no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    ids = [e["id"] for e in manifest["patients"]]
    if len(set(ids)) != len(ids):
        raise DataError("load_cohort: duplicate patient ids in manifest")
    cases = []
    for entry in manifest["patients"]:
        if split is not None and entry["split"] != split:
            continue
        cases.append(load_patient(cohort_dir, entry["id"]))
    return cases


def cohort_split_ids(cohort_dir, split: str) -> list:
    manifest = json.loads((Path(cohort_dir) / "manifest.json").read_text())
    return [e["id"] for e in manifest["patients"] if e["split"] == split]
