"""Candidate detection branch.

Each proposal becomes a cubic patch around its centre. The classifier
fuses three blocks into one vector:

* appearance: compact 3-d encoder output of the patch (256 dims full scale)
* distance: per-station centre-to-centroid distances in mm / 100,
  with 10.0 for absent stations (12 dims)
* station: the frozen station-branch feature of the nearest station
  (64 dims full scale)

laid out in that order, followed by a small MLP head. Ablation
switches zero the distance and/or station blocks. Gradient-times-input
on the fused vector gives a per-dimension attribution whose blocks can
be compared directly; with a single linear head the attributions sum
exactly to logit minus bias.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .augment import random_affine
from .errors import ConfigError, DataError, NumericDivergenceError, ShapeError
from .metrics import IOU_THRESHOLD, ScoredCandidate, voxel_iou
from .metrics import auc as _auc
from .neural import ParameterSet, Tensor, TrainConfig
from .phantom import N_STATIONS, PatientCase
from .station_branch import HU_WINDOW, normalize_hu
from .voxgrid import clip_hu, crop_patch, mask_centroid

DISTANCE_SCALE_MM = 100.0
ABSENT_STATION_SENTINEL = 10.0


@dataclass
class DetectorConfig:
    patch_size: int = 16
    encoder_channels: tuple = (8, 16, 32)
    appearance_dim: int = 256
    station_dim: int = 64
    head_hidden: int | None = 64  # None -> single linear head
    use_station_features: bool = True
    use_distance_features: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.patch_size < 4:
            raise ConfigError(f"DetectorConfig: patch_size too small ({self.patch_size})")
        if len(self.encoder_channels) != 3:
            raise ConfigError("DetectorConfig: encoder_channels must have 3 entries")

    @property
    def fused_dim(self) -> int:
        return self.appearance_dim + N_STATIONS + self.station_dim

    def fused_blocks(self) -> dict:
        """Half-open [start, end) index ranges of the fused layout."""
        a = self.appearance_dim
        return {
            "appearance": (0, a),
            "distance": (a, a + N_STATIONS),
            "station": (a + N_STATIONS, a + N_STATIONS + self.station_dim),
        }


@dataclass
class CandidateRecord:
    candidate_id: str
    patient_id: str
    center: tuple               # voxel indices
    patch: np.ndarray           # (s, s, s) float32, HU-clipped
    region: np.ndarray          # (n, 3) voxels from the proposal provenance
    source: str                 # "ln:<id>" or "fp"
    label: int | None = None
    nearest_station: int | None = None      # 1-based
    distances: np.ndarray | None = None     # (12,) normalised
    score: float | None = None


def extract_candidates(case: PatientCase, patch_size: int) -> list:
    """One record per proposal, ordered by centre (z, y, x).

    Patches are cropped from the HU-clipped volume; the window floor
    pads out-of-bounds voxels. The region carries the source node's
    voxels, or stays empty for detector-stage false positives.
    """
    clipped = clip_hu(case.volume, *HU_WINDOW)
    by_id = {inst.ln_id: inst for inst in case.ln_instances}
    ordered = sorted(case.proposals, key=lambda p: (p.center[2], p.center[1], p.center[0]))
    records = []
    for i, prop in enumerate(ordered):
        patch = crop_patch(clipped, prop.center, (patch_size,) * 3, HU_WINDOW[0])
        if prop.source.startswith("ln:"):
            inst = by_id.get(int(prop.source[3:]))
            if inst is None:
                raise DataError(f"extract_candidates: proposal references unknown node {prop.source}")
            region = inst.voxels
        else:
            region = np.empty((0, 3), dtype=np.intp)
        records.append(
            CandidateRecord(
                candidate_id=f"{case.patient_id}:{i:04d}",
                patient_id=case.patient_id,
                center=tuple(prop.center),
                patch=patch.data,
                region=region,
                source=prop.source,
            )
        )
    return records


def label_candidates(records: list, case: PatientCase, iou_threshold: float = IOU_THRESHOLD) -> None:
    """Label 1 iff the candidate region overlaps a metastatic instance
    with IoU above the threshold (in place)."""
    dims = case.volume.dims
    met = [inst for inst in case.ln_instances if inst.is_metastatic]
    for rec in records:
        rec.label = 0
        for inst in met:
            if voxel_iou(rec.region, inst.voxels, dims) > iou_threshold:
                rec.label = 1
                break


def station_centroids(case: PatientCase) -> np.ndarray:
    """(12, 3) station centroids in mm; absent stations are NaN rows."""
    out = np.full((N_STATIONS, 3), np.nan)
    for slot in range(1, N_STATIONS + 1):
        vox = np.argwhere(case.stations.data == slot)
        if vox.shape[0]:
            out[slot - 1] = vox.mean(axis=0) * np.asarray(case.stations.spacing)
    return out


def nearest_station(center, centroids: np.ndarray, spacing) -> int:
    """1-based index of the closest present station; ties take the
    lowest index. All twelve absent is an assignment error."""
    c_mm = np.asarray(center, dtype=np.float64) * np.asarray(spacing)
    d = np.linalg.norm(centroids - c_mm, axis=1)
    if np.isnan(d).all():
        raise DataError("nearest_station: no stations present")
    d = np.where(np.isnan(d), np.inf, d)
    return int(np.argmin(d)) + 1


def distance_features(center, centroids: np.ndarray, spacing) -> np.ndarray:
    """(12,) centre-to-centroid distances in mm / 100; absent -> 10.0."""
    c_mm = np.asarray(center, dtype=np.float64) * np.asarray(spacing)
    d = np.linalg.norm(centroids - c_mm, axis=1) / DISTANCE_SCALE_MM
    return np.where(np.isnan(d), ABSENT_STATION_SENTINEL, d)


def attach_geometry(records: list, case: PatientCase) -> None:
    """Fill nearest_station and distances for every record (in place)."""
    centroids = station_centroids(case)
    spacing = case.stations.spacing
    for rec in records:
        rec.nearest_station = nearest_station(rec.center, centroids, spacing)
        rec.distances = distance_features(rec.center, centroids, spacing)


class DetectorModel:
    """Appearance encoder + fused MLP classifier."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = ParameterSet()
        c1, c2, c3 = cfg.encoder_channels
        k = 3
        p.add_uniform("enc.conv1.w", (c1, 1, k, k, k), fan_in=k**3, rng=rng)
        p.add_uniform("enc.conv1.b", (c1,), fan_in=k**3, rng=rng)
        p.add_uniform("enc.conv2.w", (c2, c1, k, k, k), fan_in=c1 * k**3, rng=rng)
        p.add_uniform("enc.conv2.b", (c2,), fan_in=c1 * k**3, rng=rng)
        p.add_uniform("enc.conv3.w", (c3, c2, k, k, k), fan_in=c2 * k**3, rng=rng)
        p.add_uniform("enc.conv3.b", (c3,), fan_in=c2 * k**3, rng=rng)
        p.add_uniform("enc.fc.w", (cfg.appearance_dim, c3), fan_in=c3, rng=rng)
        p.add_uniform("enc.fc.b", (cfg.appearance_dim,), fan_in=c3, rng=rng)
        fused = cfg.fused_dim
        if cfg.head_hidden is None:
            p.add_uniform("head.fc.w", (1, fused), fan_in=fused, rng=rng)
            p.add_uniform("head.fc.b", (1,), fan_in=fused, rng=rng)
        else:
            p.add_uniform("head.fc1.w", (cfg.head_hidden, fused), fan_in=fused, rng=rng)
            p.add_uniform("head.fc1.b", (cfg.head_hidden,), fan_in=fused, rng=rng)
            p.add_uniform("head.fc2.w", (1, cfg.head_hidden), fan_in=cfg.head_hidden, rng=rng)
            p.add_uniform("head.fc2.b", (1,), fan_in=cfg.head_hidden, rng=rng)
        self.params = p

    def encode_patch(self, patch: np.ndarray) -> Tensor:
        p = self.params
        x = Tensor(normalize_hu(patch)[None])
        x = neural.relu(neural.conv3d(x, p["enc.conv1.w"], p["enc.conv1.b"], stride=2, padding=1))
        x = neural.relu(neural.conv3d(x, p["enc.conv2.w"], p["enc.conv2.b"], stride=2, padding=1))
        x = neural.relu(neural.conv3d(x, p["enc.conv3.w"], p["enc.conv3.b"], stride=2, padding=1))
        x = neural.global_avg_pool(x)
        return neural.linear(x, p["enc.fc.w"], p["enc.fc.b"])

    def fuse(self, patch: np.ndarray, distances: np.ndarray, station_feature: np.ndarray) -> Tensor:
        """Fused vector [appearance | distance | station]. Distances and
        station features enter as constants (the station branch stays
        frozen); disabled blocks are zeroed."""
        cfg = self.cfg
        distances = np.zeros(N_STATIONS) if not cfg.use_distance_features else np.asarray(distances, dtype=np.float64)
        station_feature = (
            np.zeros(cfg.station_dim)
            if not cfg.use_station_features
            else np.asarray(station_feature, dtype=np.float64)
        )
        if distances.shape != (N_STATIONS,):
            raise ShapeError(f"fuse: distance block must be ({N_STATIONS},), got {distances.shape}")
        if station_feature.shape != (cfg.station_dim,):
            raise ShapeError(
                f"fuse: station block must be ({cfg.station_dim},), got {station_feature.shape}"
            )
        return neural.concat(
            [self.encode_patch(patch), Tensor(distances), Tensor(station_feature)]
        )

    def _head_logit(self, fused: Tensor) -> Tensor:
        p = self.params
        if self.cfg.head_hidden is None:
            out = neural.linear(fused, p["head.fc.w"], p["head.fc.b"])
        else:
            hidden = neural.relu(neural.linear(fused, p["head.fc1.w"], p["head.fc1.b"]))
            out = neural.linear(hidden, p["head.fc2.w"], p["head.fc2.b"])
        return neural.reshape(out, ())

    def forward(self, patch, distances, station_feature):
        """Returns (probability, fused vector, logit) tensors."""
        fused = self.fuse(patch, distances, station_feature)
        logit = self._head_logit(fused)
        return neural.sigmoid(logit), fused, logit

    def score(self, patch, distances, station_feature) -> float:
        prob, _, _ = self.forward(patch, distances, station_feature)
        return float(prob.data)


def cam_attribution(model: DetectorModel, patch, distances, station_feature) -> dict:
    """Gradient-times-input attribution over the fused vector.

    Returns the per-dimension contributions, the block index ranges,
    and the logit/score. For a single linear head the contributions
    sum to logit minus bias exactly.
    """
    prob, fused, logit = model.forward(patch, distances, station_feature)
    logit.backward()
    contributions = fused.data * fused.grad
    return {
        "contributions": contributions,
        "blocks": {k: list(v) for k, v in model.cfg.fused_blocks().items()},
        "logit": float(logit.data),
        "score": float(prob.data),
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class DetectorSample:
    record: CandidateRecord
    station_feature: np.ndarray


def build_training_samples(records: list, station_features: np.ndarray) -> list:
    """Pair labelled records with their nearest station's frozen feature."""
    samples = []
    for rec in records:
        if rec.label is None or rec.nearest_station is None or rec.distances is None:
            raise DataError(f"candidate {rec.candidate_id} missing label/geometry")
        samples.append(
            DetectorSample(record=rec, station_feature=station_features[rec.nearest_station - 1])
        )
    return samples


def train_detector(samples: list, model: DetectorModel, cfg: TrainConfig, seed: int) -> list:
    """SGD over candidate samples; returns the per-epoch trace."""
    import logging

    rng = np.random.default_rng(seed)
    n = len(samples)
    if n and not any(s.record.label == 1 for s in samples):
        logging.getLogger(__name__).warning(
            "train_detector: no positive candidates in %d samples; training anyway", n
        )
    trace = []
    lo_pad = HU_WINDOW[0]
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            scores, targets = [], []
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                model.params.zero_grad()
                for i in batch:
                    sample = samples[i]
                    rec = sample.record
                    patch = rec.patch
                    if cfg.augment:
                        patch = random_affine(patch, rng, lo_pad)
                    prob, _, _ = model.forward(patch, rec.distances, sample.station_feature)
                    loss = neural.scale(
                        neural.focal_loss(
                            prob, float(rec.label), alpha=cfg.focal_alpha, gamma=cfg.focal_gamma
                        ),
                        1.0 / len(batch),
                    )
                    neural.backward(loss, model.params)
                    epoch_loss += float(loss.data) * len(batch)
                    scores.append(float(prob.data))
                    targets.append(int(rec.label))
                neural.sgd_step(model.params, cfg, epoch)
            mean_loss = epoch_loss / max(n, 1)
            if not np.isfinite(mean_loss) or not all(
                np.isfinite(t.data).all() for t in model.params.tensors()
            ):
                raise NumericDivergenceError(
                    f"detector training diverged at epoch {epoch}: loss={mean_loss!r}"
                )
            targets_arr = np.asarray(targets)
            train_auc = (
                _auc(targets_arr, np.asarray(scores))
                if targets_arr.size and 0 < targets_arr.sum() < targets_arr.size
                else float("nan")
            )
            trace.append(
                {
                    "epoch": epoch,
                    "loss": mean_loss,
                    "train_auc": train_auc,
                    "lr": neural.effective_lr(cfg, epoch),
                }
            )
    return trace


def score_records(records: list, model: DetectorModel, station_features: np.ndarray) -> None:
    """Fill ``score`` on every record (in place)."""
    for rec in records:
        if rec.nearest_station is None or rec.distances is None:
            raise DataError(f"candidate {rec.candidate_id} missing geometry")
        rec.score = model.score(
            rec.patch, rec.distances, station_features[rec.nearest_station - 1]
        )


def to_scored_candidates(records: list) -> list:
    out = []
    for rec in records:
        if rec.score is None or rec.label is None:
            raise DataError(f"candidate {rec.candidate_id} not scored/labelled")
        out.append(
            ScoredCandidate(
                candidate_id=rec.candidate_id,
                patient_id=rec.patient_id,
                score=rec.score,
                region=rec.region,
                label=rec.label,
            )
        )
    return out


CSV_FIELDS = ("patient_id", "cx", "cy", "cz", "label", "nearest_station", "score")


def write_candidates_csv(records: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for rec in records:
            writer.writerow(
                [
                    rec.patient_id,
                    rec.center[0],
                    rec.center[1],
                    rec.center[2],
                    rec.label,
                    rec.nearest_station,
                    f"{rec.score:.10g}",
                ]
            )


def detector_topology(cfg: DetectorConfig) -> dict:
    return {
        "kind": "detector",
        "patch_size": cfg.patch_size,
        "encoder_channels": list(cfg.encoder_channels),
        "appearance_dim": cfg.appearance_dim,
        "station_dim": cfg.station_dim,
        "head_hidden": cfg.head_hidden,
        "use_station_features": cfg.use_station_features,
        "use_distance_features": cfg.use_distance_features,
    }


def detector_config_from_topology(topo: dict) -> DetectorConfig:
    if topo.get("kind") != "detector":
        raise ConfigError(f"checkpoint is not a detector model (kind={topo.get('kind')!r})")
    return DetectorConfig(
        patch_size=topo["patch_size"],
        encoder_channels=tuple(topo["encoder_channels"]),
        appearance_dim=topo["appearance_dim"],
        station_dim=topo["station_dim"],
        head_hidden=topo["head_hidden"],
        use_station_features=topo["use_station_features"],
        use_distance_features=topo["use_distance_features"],
    )
