"""Station classification branch: shared 3-d encoder, a two-layer graph
network with a learnable row-softmax adjacency over the 12 station
nodes, and a shared MLP head producing one metastasis probability per
station.

Each graph layer computes out_j = sum_k a[k, j] * phi(h_k) where
``a = row_softmax(logits)`` and phi is a per-node affine map. With
uniform logits every output is the node mean; a strongly diagonal
logit matrix recovers a per-node network. The "w/o graph" ablation
pins the adjacency to the identity (per-node mixing only) while
keeping the per-node maps, so feature dimensions are unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural
from .augment import random_affine
from .errors import ConfigError, NumericDivergenceError, ShapeError
from .metrics import auc as _auc
from .neural import ParameterSet, Tensor, TrainConfig
from .phantom import N_STATIONS, PatientCase
from .voxgrid import Mask3D, Volume3D, clip_hu, resize

HU_WINDOW = (-218.0, 600.0)
SOFT_TISSUE_CENTER = 30.0  # HU midpoint of the nodal soft-tissue band
SOFT_TISSUE_SCALE = 50.0

# Diagonal bias of the adjacency-logit init. At 2.5 each node keeps
# ~0.53 of its own feature and spreads the rest uniformly, so the graph
# starts near the per-node model and learns how much to borrow from the
# other stations. A zero init makes every node the station mean, which
# ties all twelve logits together and leaves per-station discrimination
# to a slow symmetry-breaking drift of the adjacency.
ADJ_SELF_INIT = 2.5


@dataclass
class StationBranchConfig:
    patch_size: int = 24
    encoder_channels: tuple = (8, 16, 32)
    d_h: int = 32          # encoder output per node
    d_s: int = 64          # graph feature per node
    mlp_hidden: int = 32
    use_gcn: bool = True
    mask_absent_in_loss: bool = False  # default: absent stations stay in the loss

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.patch_size < 4:
            raise ConfigError(f"StationBranchConfig: patch_size too small ({self.patch_size})")
        if len(self.encoder_channels) != 3:
            raise ConfigError("StationBranchConfig: encoder_channels must have 3 entries")


@dataclass
class StationPatchSet:
    """Per-patient input to the branch: one resized patch per station."""

    patches: np.ndarray        # (12, s, s, s) float32, HU-clipped
    present: np.ndarray        # (12,) bool


def normalize_hu(patch: np.ndarray) -> np.ndarray:
    """Recentre a clipped patch on the nodal soft-tissue band.

    Mapping the whole clip window onto [0, 1] would leave the ~50 HU of
    node-versus-background contrast at a few percent of the input range,
    too faint for the small encoders to pick up within the short
    schedules; a fixed affine recentring keeps it at order one.
    """
    return (np.asarray(patch, dtype=np.float64) - SOFT_TISSUE_CENTER) / SOFT_TISSUE_SCALE


def extract_station_patches(
    volume: Volume3D, stations: Mask3D, patch_size: int
) -> StationPatchSet:
    """Tight bounding box per station label, cropped from the clipped
    volume and resized trilinearly to a cube. Absent stations yield a
    pad-valued patch and a cleared presence flag."""
    clipped = clip_hu(volume, *HU_WINDOW)
    size = (patch_size,) * 3
    patches = np.full((N_STATIONS,) + size, HU_WINDOW[0], dtype=np.float32)
    present = np.zeros(N_STATIONS, dtype=bool)
    for slot in range(1, N_STATIONS + 1):
        vox = np.argwhere(stations.data == slot)
        if vox.shape[0] == 0:
            continue
        lo = vox.min(axis=0)
        hi = vox.max(axis=0) + 1
        sub = Volume3D(
            clipped.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]], volume.spacing
        )
        patches[slot - 1] = resize(sub, size, "trilinear").data
        present[slot - 1] = True
    return StationPatchSet(patches=patches, present=present)


def label_stations(case: PatientCase) -> np.ndarray:
    """(12,) binary labels: station's slot contains a metastatic centre.

    A node straddling several stations counts only for the station its
    centre voxel lies in.
    """
    labels = np.zeros(N_STATIONS, dtype=np.uint8)
    for inst in case.ln_instances:
        if not inst.is_metastatic:
            continue
        slot = int(case.stations.data[tuple(inst.center)])
        if 1 <= slot <= N_STATIONS:
            labels[slot - 1] = 1
    return labels


class StationModel:
    """Encoder + graph layers + shared MLP head over 12 station nodes."""

    def __init__(self, cfg: StationBranchConfig, rng: np.random.Generator):
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
        p.add_uniform("enc.fc.w", (cfg.d_h, c3), fan_in=c3, rng=rng)
        p.add_uniform("enc.fc.b", (cfg.d_h,), fan_in=c3, rng=rng)
        p.add_uniform("gcn.phi1.w", (cfg.d_s, cfg.d_h), fan_in=cfg.d_h, rng=rng)
        p.add_uniform("gcn.phi1.b", (cfg.d_s,), fan_in=cfg.d_h, rng=rng)
        p.add_uniform("gcn.phi2.w", (cfg.d_s, cfg.d_s), fan_in=cfg.d_s, rng=rng)
        p.add_uniform("gcn.phi2.b", (cfg.d_s,), fan_in=cfg.d_s, rng=rng)
        if cfg.use_gcn:
            p.add("gcn.adj_logits", ADJ_SELF_INIT * np.eye(N_STATIONS))
        p.add_uniform("mlp.fc1.w", (cfg.mlp_hidden, cfg.d_s), fan_in=cfg.d_s, rng=rng)
        p.add_uniform("mlp.fc1.b", (cfg.mlp_hidden,), fan_in=cfg.d_s, rng=rng)
        p.add_uniform("mlp.fc2.w", (1, cfg.mlp_hidden), fan_in=cfg.mlp_hidden, rng=rng)
        p.add_uniform("mlp.fc2.b", (1,), fan_in=cfg.mlp_hidden, rng=rng)
        self.params = p

    def encode_patch(self, patch: np.ndarray) -> Tensor:
        """One station patch (s, s, s) -> (d_h,) appearance vector."""
        p = self.params
        x = Tensor(normalize_hu(patch)[None])
        x = neural.relu(neural.conv3d(x, p["enc.conv1.w"], p["enc.conv1.b"], stride=2, padding=1))
        x = neural.relu(neural.conv3d(x, p["enc.conv2.w"], p["enc.conv2.b"], stride=2, padding=1))
        x = neural.relu(neural.conv3d(x, p["enc.conv3.w"], p["enc.conv3.b"], stride=2, padding=1))
        x = neural.global_avg_pool(x)
        return neural.linear(x, p["enc.fc.w"], p["enc.fc.b"])

    def adjacency(self) -> Tensor:
        if self.cfg.use_gcn:
            return neural.row_softmax(self.params["gcn.adj_logits"])
        return Tensor(np.eye(N_STATIONS))

    def forward(self, patches: np.ndarray):
        """(12, s, s, s) patches -> (p: (12,) probabilities, f: (12, d_s))."""
        if patches.shape[0] != N_STATIONS:
            raise ShapeError(f"station forward: expected {N_STATIONS} patches, got {patches.shape}")
        p = self.params
        h = neural.stack_rows([self.encode_patch(patches[j]) for j in range(N_STATIONS)])
        a = self.adjacency()
        z1 = neural.graph_mix(a, neural.linear(h, p["gcn.phi1.w"], p["gcn.phi1.b"]))
        f = neural.graph_mix(a, neural.linear(neural.relu(z1), p["gcn.phi2.w"], p["gcn.phi2.b"]))
        hidden = neural.relu(neural.linear(f, p["mlp.fc1.w"], p["mlp.fc1.b"]))
        logits = neural.reshape(neural.linear(hidden, p["mlp.fc2.w"], p["mlp.fc2.b"]), (N_STATIONS,))
        return neural.sigmoid(logits), f

    def station_features(self, patch_set: StationPatchSet) -> np.ndarray:
        """Frozen (12, d_s) node features for the detection branch."""
        _, f = self.forward(patch_set.patches)
        return f.data.copy()

    def station_probs(self, patch_set: StationPatchSet) -> np.ndarray:
        probs, _ = self.forward(patch_set.patches)
        return probs.data.copy()


def train_station_branch(
    patients: list,
    model: StationModel,
    cfg: TrainConfig,
    seed: int,
) -> list:
    """Train on (StationPatchSet, labels) pairs; returns per-epoch trace.

    ``patients`` is a list of (patch_set, labels) tuples in a fixed
    order; batches are groups of patients, gradients averaged across
    the batch before each step.
    """
    rng = np.random.default_rng(seed)
    trace = []
    n = len(patients)
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
                    patch_set, labels = patients[i]
                    patches = patch_set.patches
                    if cfg.augment:
                        patches = np.stack(
                            [random_affine(pt, rng, lo_pad) for pt in patches]
                        )
                    probs, _ = model.forward(patches)
                    per_station = neural.focal_loss(
                        probs, labels, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma
                    )
                    if model.cfg.mask_absent_in_loss:
                        per_station = neural.mul_array(
                            per_station, patch_set.present.astype(np.float64)
                        )
                    loss = neural.scale(neural.tsum(per_station), 1.0 / len(batch))
                    neural.backward(loss, model.params)
                    epoch_loss += float(loss.data) * len(batch)
                    scores.extend(probs.data.tolist())
                    targets.extend(int(v) for v in labels)
                neural.sgd_step(model.params, cfg, epoch)
            mean_loss = epoch_loss / max(n, 1)
            if not np.isfinite(mean_loss) or not _params_finite(model.params):
                raise NumericDivergenceError(
                    f"station training diverged at epoch {epoch}: loss={mean_loss!r}"
                )
            trace.append(
                {
                    "epoch": epoch,
                    "loss": mean_loss,
                    "train_auc": _safe_auc(targets, scores),
                    "lr": neural.effective_lr(cfg, epoch),
                }
            )
    return trace


def _params_finite(params: ParameterSet) -> bool:
    return all(np.isfinite(t.data).all() for t in params.tensors())


def _safe_auc(targets, scores):
    targets = np.asarray(targets)
    if targets.size == 0 or targets.min() == targets.max():
        return float("nan")
    return _auc(targets, np.asarray(scores))


def station_topology(cfg: StationBranchConfig) -> dict:
    return {
        "kind": "station",
        "patch_size": cfg.patch_size,
        "encoder_channels": list(cfg.encoder_channels),
        "d_h": cfg.d_h,
        "d_s": cfg.d_s,
        "mlp_hidden": cfg.mlp_hidden,
        "use_gcn": cfg.use_gcn,
        "mask_absent_in_loss": cfg.mask_absent_in_loss,
    }


def station_config_from_topology(topo: dict) -> StationBranchConfig:
    if topo.get("kind") != "station":
        raise ConfigError(f"checkpoint is not a station model (kind={topo.get('kind')!r})")
    return StationBranchConfig(
        patch_size=topo["patch_size"],
        encoder_channels=tuple(topo["encoder_channels"]),
        d_h=topo["d_h"],
        d_s=topo["d_s"],
        mlp_hidden=topo["mlp_hidden"],
        use_gcn=topo["use_gcn"],
        mask_absent_in_loss=topo.get("mask_absent_in_loss", False),
    )
