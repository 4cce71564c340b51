"""Command-line pipeline: generate phantoms, train both branches,
evaluate, and export candidate attributions.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import detect_branch as db
from . import experiment as ex
from . import phantom as ph
from . import station_branch as sb
from .config import ExperimentConfig, config_hash, config_profile, config_to_dict, load_config
from .errors import ConfigError, DataError, NumericDivergenceError
from .neural import checkpoint_hash, load_arrays, save_arrays

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# helpers


def _load_cfg(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return config_profile("desk")


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


def _initial_rng_state(seed: int) -> dict:
    state = np.random.default_rng(seed).bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _write_trace_csv(path: Path, trace, header_comments=()) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {c}" for c in header_comments]
    lines.append("epoch,loss,train_auc,lr")
    for row in trace:
        lines.append(
            f"{row['epoch']},{row['loss']:.10g},{row['train_auc']:.10g},{row['lr']:.10g}"
        )
    path.write_text("\n".join(lines) + "\n")


def write_froc_svg(points, path: Path) -> None:
    """Step plot of (fp per patient, sensitivity) pairs."""
    width, height = 480, 360
    ml, mr, mt, mb = 50, 15, 15, 40
    x_max = max([4.0] + [f for f, _ in points])
    px = lambda f: ml + (width - ml - mr) * (f / x_max if x_max else 0.0)
    py = lambda s: height - mb - (height - mt - mb) * s
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{py(0)}" x2="{width - mr}" y2="{py(0)}" stroke="black"/>',
        f'<line x1="{ml}" y1="{py(0)}" x2="{ml}" y2="{mt}" stroke="black"/>',
    ]
    for tick in range(int(x_max) + 1):
        parts.append(
            f'<text x="{px(tick):.1f}" y="{height - mb + 18}" font-size="11" '
            f'text-anchor="middle">{tick}</text>'
        )
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{ml - 8}" y="{py(tick):.1f}" font-size="11" '
            f'text-anchor="end">{tick:g}</text>'
        )
    parts.append(
        f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 8}" font-size="12" '
        f'text-anchor="middle">false positives per patient</text>'
    )
    if points:
        ordered = sorted(points)
        d = [f"M {px(0):.2f} {py(0):.2f}"]
        prev_s = 0.0
        for f, s in ordered:
            d.append(f"L {px(f):.2f} {py(prev_s):.2f}")
            d.append(f"L {px(f):.2f} {py(s):.2f}")
            prev_s = s
        parts.append(
            f'<path d="{" ".join(d)}" fill="none" stroke="crimson" stroke-width="1.5"/>'
        )
    parts.append("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")


def _load_station_model(stem) -> tuple:
    arrays, meta = load_arrays(stem)
    cfg = sb.station_config_from_topology(meta.get("topology", {}))
    model = sb.StationModel(cfg, np.random.default_rng(0))
    model.params.load_state_arrays(arrays)
    return model, meta


def _load_detector_model(stem) -> tuple:
    arrays, meta = load_arrays(stem)
    cfg = db.detector_config_from_topology(meta.get("topology", {}))
    model = db.DetectorModel(cfg, np.random.default_rng(0))
    model.params.load_state_arrays(arrays)
    return model, meta


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    if args.patients is not None:
        cfg.n_patients = int(args.patients)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.separability is not None:
        cfg.phantom.separability = float(args.separability)
    if args.recall is not None:
        cfg.phantom = dataclasses.replace(cfg.phantom, recall=float(args.recall))
    if args.fp_mean is not None:
        cfg.phantom = dataclasses.replace(cfg.phantom, fp_per_patient_mean=float(args.fp_mean))
    out_dir = Path(args.out)
    manifest = ph.write_cohort(
        cfg.phantom,
        cfg.n_patients,
        cfg.seed,
        out_dir,
        train_fraction=cfg.train_fraction,
        config_hash=config_hash(cfg),
    )
    _dump_json(out_dir / "config.json", config_to_dict(cfg))
    print(f"wrote {manifest['n_patients']} patients to {out_dir}")
    return EXIT_OK


def cmd_train_station(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.seed if args.seed is None else int(args.seed)
    out_dir = Path(args.out)
    train_cases = ph.load_cohort(args.cohort, split="train")
    if not train_cases:
        raise DataError("train station: cohort has no train split")
    inputs = ex.station_inputs(train_cases, cfg.station_model.patch_size)
    model, trace = ex.fit_station(inputs, cfg.station_model, cfg.station_train, seed)
    meta = {
        "topology": sb.station_topology(model.cfg),
        "epochs": cfg.station_train.epochs,
        "seed": seed,
        "rng_state": _initial_rng_state(seed),
        "config_hash": config_hash(cfg),
        "train_patients": [c.patient_id for c in train_cases],
    }
    stem = out_dir / "station_ckpt"
    save_arrays(stem, model.params.state_arrays(), meta)
    _write_trace_csv(out_dir / "station_trace.csv", trace)
    features = {
        c.patient_id: ex.station_feature_map(
            [c], model, cfg.detector_model, cfg.station_model.patch_size
        )[c.patient_id]
        for c in train_cases
    }
    save_arrays(out_dir / "station_features_train", features, {"of": "train"})
    print(f"station checkpoint at {stem} ({len(trace)} epochs)")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.seed if args.seed is None else int(args.seed)
    out_dir = Path(args.out)
    train_cases = ph.load_cohort(args.cohort, split="train")
    if not train_cases:
        raise DataError("train detector: cohort has no train split")
    det_cfg = cfg.detector_model
    station_model = None
    station_meta = {}
    station_hash = ""
    if det_cfg.use_station_features:
        if not args.station_checkpoint:
            raise DataError(
                "train detector: station features enabled but no --station-checkpoint given"
            )
        station_model, station_meta = _load_station_model(args.station_checkpoint)
        station_hash = checkpoint_hash(args.station_checkpoint)
    feats = ex.station_feature_map(
        train_cases, station_model, det_cfg, cfg.station_model.patch_size
    )
    samples = ex.detector_samples(train_cases, feats, det_cfg)
    model, trace = ex.fit_detector(samples, det_cfg, cfg.detector_train, seed)
    meta = {
        "topology": db.detector_topology(model.cfg),
        "epochs": cfg.detector_train.epochs,
        "seed": seed,
        "rng_state": _initial_rng_state(seed),
        "config_hash": config_hash(cfg),
        "station_checkpoint": station_hash,
        "station_train_patients": station_meta.get("train_patients", []),
        "train_patients": [c.patient_id for c in train_cases],
    }
    stem = out_dir / "detector_ckpt"
    save_arrays(stem, model.params.state_arrays(), meta)
    comments = [f"station_checkpoint={station_hash}"] if station_hash else []
    _write_trace_csv(out_dir / "detector_trace.csv", trace, header_comments=comments)
    print(f"detector checkpoint at {stem} ({len(trace)} epochs, {len(samples)} candidates)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out)
    test_cases = ph.load_cohort(args.cohort, split=args.split)
    if not test_cases:
        raise DataError(f"eval: cohort has no {args.split} split")

    det_model, det_meta = _load_detector_model(args.detector_checkpoint)
    det_hash = checkpoint_hash(args.detector_checkpoint)
    if args.station_features is not None:
        det_model.cfg.use_station_features = args.station_features == "on"
    if args.distance_features is not None:
        det_model.cfg.use_distance_features = args.distance_features == "on"

    station_model = None
    station_hash = ""
    if det_model.cfg.use_station_features:
        if not args.station_checkpoint:
            raise DataError("eval: detector uses station features but no --station-checkpoint")
        station_model, _ = _load_station_model(args.station_checkpoint)
        station_hash = checkpoint_hash(args.station_checkpoint)

    trained_on = set(det_meta.get("train_patients", [])) | set(
        det_meta.get("station_train_patients", [])
    )
    leaked = sorted(trained_on & {c.patient_id for c in test_cases})
    if leaked:
        raise DataError(f"eval: split leakage, trained on evaluation patients {leaked}")

    feats = ex.station_feature_map(
        test_cases, station_model, det_model.cfg, cfg.station_model.patch_size
    )
    out = ex.evaluate_detector(test_cases, feats, det_model, test_cases[0].volume.dims)
    report = dict(out["report"])
    report["config_hash"] = config_hash(cfg)
    report["checkpoints"] = {"detector": det_hash, "station": station_hash}
    report["ablation"] = {
        "use_station_features": det_model.cfg.use_station_features,
        "use_distance_features": det_model.cfg.use_distance_features,
    }
    froc_points = report.pop("froc_points")
    _dump_json(out_dir / "report.json", report)
    db.write_candidates_csv(out["records"], out_dir / "candidates.csv")
    lines = ["fp_per_patient,sensitivity"] + [f"{f:.10g},{s:.10g}" for f, s in froc_points]
    (out_dir / "froc.csv").write_text("\n".join(lines) + "\n")
    write_froc_svg(froc_points, out_dir / "froc.svg")
    print(
        f"eval: mfroc={report['mfroc']:.4f} "
        f"froc@4={report['froc_at']['4']:.4f} over {report['n_patients']} patients"
    )
    return EXIT_OK


def cmd_cam(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out)
    det_model, _ = _load_detector_model(args.detector_checkpoint)
    try:
        patient_id, index_text = args.candidate.rsplit(":", 1)
        index = int(index_text)
    except ValueError as exc:
        raise DataError(f"cam: malformed candidate id {args.candidate!r}") from exc
    try:
        case = ph.load_patient(args.cohort, patient_id)
    except DataError as exc:
        raise DataError(f"cam: unknown patient {patient_id!r}") from exc
    records = ex.candidate_records(case, det_model.cfg)
    if not 0 <= index < len(records):
        raise DataError(
            f"cam: candidate index {index} out of range (patient has {len(records)})"
        )
    rec = records[index]
    station_model = None
    if det_model.cfg.use_station_features:
        if not args.station_checkpoint:
            raise DataError("cam: detector uses station features but no --station-checkpoint")
        station_model, _ = _load_station_model(args.station_checkpoint)
    feats = ex.station_feature_map(
        [case], station_model, det_model.cfg, cfg.station_model.patch_size
    )[patient_id]
    cam = db.cam_attribution(
        det_model, rec.patch, rec.distances, feats[rec.nearest_station - 1]
    )
    payload = {
        "candidate_id": rec.candidate_id,
        "patient_id": patient_id,
        "center": list(rec.center),
        "nearest_station": rec.nearest_station,
        "label": rec.label,
        "score": cam["score"],
        "logit": cam["logit"],
        "blocks": cam["blocks"],
        "contributions": [float(v) for v in cam["contributions"]],
    }
    path = out_dir / f"cam_{patient_id}_{index:04d}.json"
    _dump_json(path, payload)
    print(f"cam attribution at {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argparse wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lnstation",
        description="Station-aware metastatic lymph node detection on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ph = sub.add_parser("phantom", help="synthetic cohort commands")
    ph_sub = p_ph.add_subparsers(dest="phantom_command", required=True)
    p_gen = ph_sub.add_parser("generate", help="write a phantom cohort")
    p_gen.add_argument("--config", help="experiment config JSON")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--patients", type=int)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--separability", type=float)
    p_gen.add_argument("--recall", type=float)
    p_gen.add_argument("--fp-mean", dest="fp_mean", type=float)
    p_gen.set_defaults(fn=cmd_generate)

    p_tr = sub.add_parser("train", help="train one branch")
    tr_sub = p_tr.add_subparsers(dest="train_command", required=True)
    p_st = tr_sub.add_parser("station", help="train the station classifier")
    p_st.add_argument("--config")
    p_st.add_argument("--cohort", required=True)
    p_st.add_argument("--out", required=True)
    p_st.add_argument("--seed", type=int)
    p_st.set_defaults(fn=cmd_train_station)
    p_det = tr_sub.add_parser("detector", help="train the candidate classifier")
    p_det.add_argument("--config")
    p_det.add_argument("--cohort", required=True)
    p_det.add_argument("--station-checkpoint")
    p_det.add_argument("--out", required=True)
    p_det.add_argument("--seed", type=int)
    p_det.set_defaults(fn=cmd_train_detector)

    p_ev = sub.add_parser("eval", help="evaluate a trained detector")
    p_ev.add_argument("--config")
    p_ev.add_argument("--cohort", required=True)
    p_ev.add_argument("--station-checkpoint")
    p_ev.add_argument("--detector-checkpoint", required=True)
    p_ev.add_argument("--out", required=True)
    p_ev.add_argument("--split", default="test")
    p_ev.add_argument("--station-features", choices=("on", "off"))
    p_ev.add_argument("--distance-features", choices=("on", "off"))
    p_ev.set_defaults(fn=cmd_eval)

    p_cam = sub.add_parser("cam", help="per-dimension attribution for one candidate")
    p_cam.add_argument("--config")
    p_cam.add_argument("--cohort", required=True)
    p_cam.add_argument("--station-checkpoint")
    p_cam.add_argument("--detector-checkpoint", required=True)
    p_cam.add_argument("--candidate", required=True, help="form: <patient_id>:<index>")
    p_cam.add_argument("--out", required=True)
    p_cam.set_defaults(fn=cmd_cam)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
