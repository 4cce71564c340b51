import json

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from lnstation import phantom as ph
from lnstation.errors import ConfigError, DataError


def desk_cfg(**kw):
    kw.setdefault("dims", (64, 64, 64))
    kw.setdefault("spacing", (2.0, 2.0, 2.0))
    return ph.PhantomConfig(**kw)


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(ConfigError):
        ph.PhantomConfig(station_probs=(0.5,) * 11)
    with pytest.raises(ConfigError):
        ph.PhantomConfig(station_probs=(1.5,) + (0.5,) * 11)
    with pytest.raises(ConfigError):
        ph.PhantomConfig(recall=1.2)
    with pytest.raises(ConfigError):
        ph.PhantomConfig(small_axis_range_mm=(10.0, 4.0))
    with pytest.raises(ConfigError):
        ph.PhantomConfig(fp_per_patient_mean=-1.0)
    cfg = ph.PhantomConfig(intensity={"ln_mean": 70.0})
    assert cfg.intensity.ln_mean == 70.0  # dict coerces to IntensityModel


def test_correlation_matrix_validation():
    cfg = ph.PhantomConfig(correlation_rho=0.8)
    mat = cfg.correlation_matrix()
    assert mat.shape == (12, 12)
    assert (np.diag(mat) == 1.0).all()
    assert (mat[0, 1], mat[5, 7]) == (0.8, 0.8)

    bad = np.full((12, 12), 0.5)
    np.fill_diagonal(bad, 1.0)
    bad[0, 1] = 0.9  # asymmetric
    with pytest.raises(ConfigError):
        ph.PhantomConfig(correlation=tuple(map(tuple, bad))).correlation_matrix()
    neg = -np.ones((12, 12)) + 2 * np.eye(12)  # not PSD
    with pytest.raises(ConfigError):
        ph.PhantomConfig(correlation=tuple(map(tuple, neg))).correlation_matrix()


# ---------------------------------------------------------------------------
# copula draws


def test_copula_marginals_match_rates():
    cfg = ph.PhantomConfig()
    draws = ph.sample_station_metastasis(cfg, np.random.default_rng(7), size=100_000)
    freq = draws.mean(axis=0)
    np.testing.assert_allclose(freq, cfg.station_probs, atol=0.01)


def test_copula_pairwise_orthant_matches_mvn_cdf():
    cfg = ph.PhantomConfig(correlation_rho=0.8)
    draws = ph.sample_station_metastasis(cfg, np.random.default_rng(11), size=100_000)
    probs = np.asarray(cfg.station_probs)
    for i, j in [(0, 1), (2, 9), (10, 11)]:
        want = multivariate_normal.cdf(
            [norm.ppf(probs[i]), norm.ppf(probs[j])],
            mean=[0.0, 0.0],
            cov=[[1.0, 0.8], [0.8, 1.0]],
        )
        got = (draws[:, i] & draws[:, j]).mean()
        assert got == pytest.approx(want, abs=0.015)


def test_copula_comonotone_at_rho_one():
    cfg = ph.PhantomConfig(correlation_rho=1.0)  # PSD-singular edge
    draws = ph.sample_station_metastasis(cfg, np.random.default_rng(3), size=2000)
    order = np.argsort(-np.asarray(cfg.station_probs), kind="stable")
    ordered = draws[:, order]
    # with a single shared latent, involvement is monotone in the rate
    assert (np.diff(ordered.astype(int), axis=1) <= 0).all()


def test_copula_single_draw_shape_and_determinism():
    cfg = ph.PhantomConfig()
    a = ph.sample_station_metastasis(cfg, np.random.default_rng(5))
    b = ph.sample_station_metastasis(cfg, np.random.default_rng(5))
    assert a.shape == (12,) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# LN size sampler


def test_short_axis_sampler_ranges():
    cfg = desk_cfg()
    rng = np.random.default_rng(0)
    met = np.array([ph.sample_short_axis_mm(cfg, rng, True) for _ in range(3000)])
    ben = np.array([ph.sample_short_axis_mm(cfg, rng, False) for _ in range(1000)])
    assert met.min() >= 4.0 and met.max() <= 20.0
    assert ben.min() >= 4.0 and ben.max() <= 12.0
    frac_small = (met <= 10.0).mean()
    assert frac_small == pytest.approx(0.70, abs=0.04)


# ---------------------------------------------------------------------------
# patient generation


def test_generate_patient_deterministic():
    cfg = desk_cfg()
    a = ph.generate_patient(cfg, seed=123, patient_id="p0")
    b = ph.generate_patient(cfg, seed=123, patient_id="p0")
    assert a.volume.data.tobytes() == b.volume.data.tobytes()
    assert a.stations.data.tobytes() == b.stations.data.tobytes()
    assert len(a.ln_instances) == len(b.ln_instances)
    for x, y in zip(a.ln_instances, b.ln_instances):
        assert x.center == y.center and x.short_axis_mm == y.short_axis_mm
    assert [p.center for p in a.proposals] == [p.center for p in b.proposals]
    c = ph.generate_patient(cfg, seed=124, patient_id="p0")
    assert a.volume.data.tobytes() != c.volume.data.tobytes()


def test_patient_station_geometry():
    case = ph.generate_patient(desk_cfg(), seed=5, patient_id="p0")
    labels_present = set(np.unique(case.stations.data)) - {0}
    assert labels_present == set(range(1, 13))
    nx = case.stations.dims[0]
    for left_slot in (1, 3, 5, 7, 9):
        left_x = np.argwhere(case.stations.data == left_slot)[:, 0].mean()
        right_x = np.argwhere(case.stations.data == left_slot + 1)[:, 0].mean()
        assert left_x < nx / 2 < right_x


def test_patient_invariants():
    case = ph.generate_patient(desk_cfg(), seed=9, patient_id="p0")
    # station label vector derives exactly from the instances
    np.testing.assert_array_equal(
        case.station_labels, ph.label_from_instances(case.ln_instances)
    )
    seen = set()
    for inst in case.ln_instances:
        # centre voxel sits in the claimed station
        assert case.stations.data[inst.center] == inst.station
        vox = set(map(tuple, inst.voxels))
        assert inst.center in vox
        assert not (vox & seen), "LN voxel regions must be disjoint"
        seen |= vox


def test_patient_intensity_contrast():
    cfg = desk_cfg()
    case = ph.generate_patient(cfg, seed=21, patient_id="p0")
    ln_vox = np.concatenate([i.voxels for i in case.ln_instances])
    ln_mask = np.zeros(cfg.dims, dtype=bool)
    ln_mask[tuple(ln_vox.T)] = True
    background = case.volume.data[(case.stations.data == 0) & ~ln_mask]
    assert case.volume.data[ln_mask].mean() > background.mean() + 30.0


def test_generation_error_names_station():
    cfg = desk_cfg(
        dims=(40, 40, 40),
        station_probs=(1.0,) * 12,
        met_extra_mean=6.0,
        fraction_below_10mm=0.0,
        large_axis_range_mm=(38.0, 40.0),
        normal_axis_range_mm=(38.0, 40.0),
    )
    with pytest.raises(ph.GenerationError, match="station"):
        ph.generate_patient(cfg, seed=0, patient_id="p0")


# ---------------------------------------------------------------------------
# proposals


def test_proposals_cover_all_nodes_at_full_recall():
    case = ph.generate_patient(desk_cfg(recall=1.0, fp_per_patient_mean=0.0), 3, "p0")
    ln_centers = {i.center for i in case.ln_instances}
    prop_centers = {p.center for p in case.proposals}
    assert ln_centers == prop_centers
    assert all(p.source.startswith("ln:") for p in case.proposals)


def test_proposals_zero_recall_only_fps():
    case = ph.generate_patient(desk_cfg(recall=0.0, fp_per_patient_mean=6.0), 3, "p0")
    assert all(p.source == "fp" for p in case.proposals)
    centers = [p.center for p in case.proposals]
    assert len(centers) == len(set(centers))
    occupied = np.zeros(case.stations.dims, dtype=bool)
    for inst in case.ln_instances:
        occupied[tuple(inst.voxels.T)] = True
    assert not any(occupied[c] for c in centers)  # FPs avoid node voxels


def test_proposal_recall_statistics():
    cfg = desk_cfg()
    rng = np.random.default_rng(0)
    hit = total = 0
    for seed in rng.integers(0, 2**31, size=40):
        case = ph.generate_patient(cfg, int(seed), "p0")
        sources = {p.source for p in case.proposals}
        total += len(case.ln_instances)
        hit += sum(1 for i in case.ln_instances if f"ln:{i.ln_id}" in sources)
    assert hit / total == pytest.approx(cfg.recall, abs=0.03)


def test_fp_rate_statistics():
    cfg = desk_cfg()
    rng = np.random.default_rng(1)
    counts = []
    for seed in rng.integers(0, 2**31, size=40):
        case = ph.generate_patient(cfg, int(seed), "p0")
        counts.append(sum(1 for p in case.proposals if p.source == "fp"))
    assert np.mean(counts) == pytest.approx(cfg.fp_per_patient_mean, abs=0.8)


# ---------------------------------------------------------------------------
# cohort IO


def test_generate_cohort_split_and_ids():
    cfg = desk_cfg()
    pairs = ph.generate_cohort(cfg, 6, seed=0, train_fraction=2 / 3)
    assert [c.patient_id for c, _ in pairs] == [f"p{i:04d}" for i in range(6)]
    assert [s for _, s in pairs] == ["train"] * 4 + ["test"] * 2
    again = ph.generate_cohort(cfg, 6, seed=0, train_fraction=2 / 3)
    assert pairs[3][0].volume.data.tobytes() == again[3][0].volume.data.tobytes()
    with pytest.raises(ConfigError):
        ph.generate_cohort(cfg, -1, seed=0)


def test_write_and_load_cohort_roundtrip(tmp_path):
    cfg = desk_cfg()
    manifest = ph.write_cohort(cfg, 3, seed=4, out_dir=tmp_path, train_fraction=2 / 3,
                               config_hash="abc123")
    assert manifest["n_patients"] == 3
    assert manifest["config_hash"] == "abc123"
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest

    cases = ph.load_cohort(tmp_path)
    assert [c.patient_id for c in cases] == ["p0000", "p0001", "p0002"]
    train = ph.load_cohort(tmp_path, split="train")
    assert [c.patient_id for c in train] == ["p0000", "p0001"]
    assert ph.cohort_split_ids(tmp_path, "test") == ["p0002"]

    mem = ph.generate_cohort(cfg, 3, seed=4, train_fraction=2 / 3)
    for (case_mem, _), case_disk in zip(mem, cases):
        assert case_mem.volume.data.tobytes() == case_disk.volume.data.tobytes()
        assert case_mem.station_labels.tolist() == case_disk.station_labels.tolist()
        assert len(case_mem.ln_instances) == len(case_disk.ln_instances)
        for a, b in zip(case_mem.ln_instances, case_disk.ln_instances):
            assert a.center == b.center
            np.testing.assert_array_equal(a.voxels, b.voxels)
        assert [p.center for p in case_mem.proposals] == [
            p.center for p in case_disk.proposals
        ]


def test_load_cohort_errors(tmp_path):
    with pytest.raises(DataError):
        ph.load_cohort(tmp_path)  # no manifest
    ph.write_cohort(desk_cfg(), 1, seed=0, out_dir=tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["patients"].append(manifest["patients"][0])  # duplicate id
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        ph.load_cohort(tmp_path)
    with pytest.raises(DataError):
        ph.load_patient(tmp_path, "p9999")
