"""End-to-end experiment plumbing shared by the CLI and the scripts.

Everything here works on in-memory cohorts; the CLI adds file IO and
provenance around these calls. The station branch is always trained
first and then frozen while the detector trains on the fused features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detect_branch as db
from . import metrics as mx
from . import phantom as ph
from . import station_branch as sb
from .config import ExperimentConfig
from .errors import DataError
from .neural import TrainConfig


def build_cohort(cfg: ExperimentConfig, seed: int):
    """Generate the cohort and split it; returns (train, test) case lists."""
    pairs = ph.generate_cohort(cfg.phantom, cfg.n_patients, seed, cfg.train_fraction)
    train = [case for case, split in pairs if split == "train"]
    test = [case for case, split in pairs if split == "test"]
    return train, test


def station_inputs(cases, patch_size: int):
    """(patch_set, labels) pairs in cohort order."""
    out = []
    for case in cases:
        patch_set = sb.extract_station_patches(case.volume, case.stations, patch_size)
        out.append((patch_set, sb.label_stations(case)))
    return out


def fit_station(inputs, model_cfg: sb.StationBranchConfig, train_cfg: TrainConfig, seed: int):
    model = sb.StationModel(model_cfg, np.random.default_rng(seed))
    trace = sb.train_station_branch(inputs, model, train_cfg, seed)
    return model, trace


def station_auc(model: sb.StationModel, inputs) -> float:
    """Pooled per-station AUC over a set of patients."""
    scores, labels = [], []
    for patch_set, y in inputs:
        scores.extend(model.station_probs(patch_set).tolist())
        labels.extend(int(v) for v in y)
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        return float("nan")
    return mx.auc(labels, np.asarray(scores))


def candidate_records(case, det_cfg: db.DetectorConfig):
    """Extract, label and attach geometry to one patient's candidates."""
    records = db.extract_candidates(case, det_cfg.patch_size)
    db.label_candidates(records, case)
    db.attach_geometry(records, case)
    return records


def station_feature_map(cases, station_model, det_cfg: db.DetectorConfig, patch_size: int) -> dict:
    """patient id -> frozen (12, d_s) features; zeros when the station
    block is ablated away (no station model trained at all)."""
    out = {}
    for case in cases:
        if station_model is None or not det_cfg.use_station_features:
            out[case.patient_id] = np.zeros((ph.N_STATIONS, det_cfg.station_dim))
        else:
            patch_set = sb.extract_station_patches(case.volume, case.stations, patch_size)
            out[case.patient_id] = station_model.station_features(patch_set)
    return out


def detector_samples(cases, feature_map: dict, det_cfg: db.DetectorConfig):
    samples = []
    for case in cases:
        records = candidate_records(case, det_cfg)
        samples.extend(db.build_training_samples(records, feature_map[case.patient_id]))
    return samples


def fit_detector(samples, det_cfg: db.DetectorConfig, train_cfg: TrainConfig, seed: int):
    model = db.DetectorModel(det_cfg, np.random.default_rng(seed))
    trace = db.train_detector(samples, model, train_cfg, seed)
    return model, trace


def evaluate_detector(test_cases, feature_map: dict, det_model: db.DetectorModel, dims) -> dict:
    """Score the test cohort and compute the full metric report.

    Returns a dict with the detection table, scored records and the
    headline numbers; the CLI serialises a subset of this.
    """
    if not test_cases:
        raise DataError("evaluate_detector: empty test cohort")
    all_records = []
    gt_instances = []
    for case in test_cases:
        records = candidate_records(case, det_model.cfg)
        db.score_records(records, det_model, feature_map[case.patient_id])
        all_records.extend(records)
        for inst in case.ln_instances:
            if inst.is_metastatic:
                gt_instances.append(
                    mx.GTInstance(
                        gt_id=f"{case.patient_id}:ln{inst.ln_id}",
                        patient_id=case.patient_id,
                        voxels=inst.voxels,
                        short_axis_mm=inst.short_axis_mm,
                    )
                )
    patient_ids = [case.patient_id for case in test_cases]
    table = mx.match_detections(
        db.to_scored_candidates(all_records), gt_instances, patient_ids, dims
    )
    froc = mx.froc_curve(table)
    labels = np.array([rec.label for rec in all_records])
    scores = np.array([rec.score for rec in all_records])
    report = {
        "n_patients": len(patient_ids),
        "n_gt": table.n_gt,
        "n_candidates": len(all_records),
        "froc_at": {str(k): v for k, v in froc.froc_at.items()},
        "mfroc": froc.mfroc,
        "froc_points": [[f, s] for f, s in froc.points],
        "stratified": mx.size_stratified(table),
    }
    if labels.size and 0 < labels.sum() < labels.size:
        f1, thr = mx.max_f1(labels, scores)
        report["max_f1"] = f1
        report["max_f1_threshold"] = thr
        report["auc"] = mx.auc(labels, scores)
    else:
        report["max_f1"] = None
        report["max_f1_threshold"] = None
        report["auc"] = None
    spearman = mx.spearman_matrix(
        np.stack([case.station_labels for case in test_cases]).astype(np.float64)
    )
    report["station_label_spearman"] = spearman.matrix.tolist()
    report["station_label_spearman_constant"] = spearman.constant.tolist()
    return {"report": report, "table": table, "records": all_records}


@dataclass
class AblationOutcome:
    """Per-seed headline numbers for the two paired comparisons."""

    seed: int
    station_auc_gcn: float
    station_auc_plain: float
    mfroc_full: float
    mfroc_appearance: float
    froc_at_full: dict
    froc_at_appearance: dict


def run_ablation_pair(cfg: ExperimentConfig, seed: int) -> AblationOutcome:
    """One seed of the paired comparison: full fusion vs appearance-only
    detector, and graph vs per-node station classifier."""
    train, test = build_cohort(cfg, seed)
    st_train = station_inputs(train, cfg.station_model.patch_size)
    st_test = station_inputs(test, cfg.station_model.patch_size)

    cfg_gcn = _station_cfg(cfg, use_gcn=True)
    cfg_plain = _station_cfg(cfg, use_gcn=False)
    model_gcn, _ = fit_station(st_train, cfg_gcn, cfg.station_train, seed)
    model_plain, _ = fit_station(st_train, cfg_plain, cfg.station_train, seed)

    det_full_cfg = _detector_cfg(cfg, use_station=True, use_distance=True)
    det_app_cfg = _detector_cfg(cfg, use_station=False, use_distance=False)

    feats_train_full = station_feature_map(train, model_gcn, det_full_cfg, cfg.station_model.patch_size)
    feats_test_full = station_feature_map(test, model_gcn, det_full_cfg, cfg.station_model.patch_size)
    zeros_train = station_feature_map(train, None, det_app_cfg, cfg.station_model.patch_size)
    zeros_test = station_feature_map(test, None, det_app_cfg, cfg.station_model.patch_size)

    det_full, _ = fit_detector(
        detector_samples(train, feats_train_full, det_full_cfg),
        det_full_cfg,
        cfg.detector_train,
        seed,
    )
    det_app, _ = fit_detector(
        detector_samples(train, zeros_train, det_app_cfg),
        det_app_cfg,
        cfg.detector_train,
        seed,
    )

    out_full = evaluate_detector(test, feats_test_full, det_full, cfg.phantom.dims)
    out_app = evaluate_detector(test, zeros_test, det_app, cfg.phantom.dims)

    return AblationOutcome(
        seed=seed,
        station_auc_gcn=station_auc(model_gcn, st_test),
        station_auc_plain=station_auc(model_plain, st_test),
        mfroc_full=out_full["report"]["mfroc"],
        mfroc_appearance=out_app["report"]["mfroc"],
        froc_at_full=out_full["report"]["froc_at"],
        froc_at_appearance=out_app["report"]["froc_at"],
    )


def _station_cfg(cfg: ExperimentConfig, use_gcn: bool) -> sb.StationBranchConfig:
    base = cfg.station_model
    return sb.StationBranchConfig(
        patch_size=base.patch_size,
        encoder_channels=base.encoder_channels,
        d_h=base.d_h,
        d_s=base.d_s,
        mlp_hidden=base.mlp_hidden,
        use_gcn=use_gcn,
        mask_absent_in_loss=base.mask_absent_in_loss,
    )


def _detector_cfg(cfg: ExperimentConfig, use_station: bool, use_distance: bool) -> db.DetectorConfig:
    base = cfg.detector_model
    return db.DetectorConfig(
        patch_size=base.patch_size,
        encoder_channels=base.encoder_channels,
        appearance_dim=base.appearance_dim,
        station_dim=base.station_dim,
        head_hidden=base.head_hidden,
        use_station_features=use_station,
        use_distance_features=use_distance,
    )


# The six ablation rows of the summary table, in fixed presentation
# order: (label, use_distance, use_station, use_gcn).
ABLATION_ROWS = (
    ("appearance", False, False, False),
    ("station_plain", False, True, False),
    ("station_gcn", False, True, True),
    ("distance", True, False, False),
    ("distance_station_plain", True, True, False),
    ("full", True, True, True),
)


def run_ablation_row(cfg: ExperimentConfig, seed: int, row) -> dict:
    """Train and evaluate one row of the ablation table for one seed."""
    label, use_distance, use_station, use_gcn = row
    train, test = build_cohort(cfg, seed)
    station_model = None
    if use_station:
        st_train = station_inputs(train, cfg.station_model.patch_size)
        station_model, _ = fit_station(
            st_train, _station_cfg(cfg, use_gcn=use_gcn), cfg.station_train, seed
        )
    det_cfg = _detector_cfg(cfg, use_station=use_station, use_distance=use_distance)
    feats_train = station_feature_map(train, station_model, det_cfg, cfg.station_model.patch_size)
    feats_test = station_feature_map(test, station_model, det_cfg, cfg.station_model.patch_size)
    det_model, _ = fit_detector(
        detector_samples(train, feats_train, det_cfg), det_cfg, cfg.detector_train, seed
    )
    out = evaluate_detector(test, feats_test, det_model, cfg.phantom.dims)
    report = out["report"]
    return {
        "row": label,
        "seed": seed,
        "froc_at": report["froc_at"],
        "mfroc": report["mfroc"],
        "max_f1": report["max_f1"],
        "auc": report["auc"],
    }
