"""Deterministic synthetic benchmarks with planted detector-regime structure.

Feature exports are built on a sparse-pattern geometry: each class activates a
random subset of coordinates, the linear head reads those patterns back, and
OOD test samples are produced by regime-specific transforms that favor one
detector family (e.g. radial inflation is visible to Mahalanobis but invisible
to direction- and logit-based scorers). Media clips get per-regime statistics
so the planted regimes are recoverable from meta-features alone.

Every random draw comes from splitmix64 streams derived from the spec seed,
and draws never depend on the shift magnitude, so regenerating a benchmark is
byte-identical and AUROC responds monotonically to `ood_shift`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import (
    DatasetPair,
    EmbeddingFile,
    FeatureExport,
    FlowClip,
    PerformanceMatrix,
    VideoClip,
    write_embedding_file,
    write_feature_export,
    write_flow_file,
    write_pair_manifest,
    write_performance_matrix,
    write_video_file,
)
from .detector_zoo import REGISTRY, build_performance_matrix
from .rng import SplitMix64, derive_seed

PATTERN_DENSITY = 0.3
PATTERN_LEVEL = 0.4
HEAD_SCALE = 1.5
BIAS_SCALE = 0.02


@dataclass(frozen=True)
class Regime:
    best_detector: str
    meta_feature_shift: tuple[float, ...] = ()
    id_cluster_spread: float = 0.1
    ood_shift: float = 6.0

    def __post_init__(self):
        if self.best_detector not in REGISTRY:
            raise ValueError(f"unknown detector {self.best_detector!r}")
        if self.id_cluster_spread <= 0 or self.ood_shift < 0:
            raise ValueError("spread must be positive and shift nonnegative")
        if not all(math.isfinite(v) for v in self.meta_feature_shift):
            raise ValueError("meta_feature_shift must be finite")


@dataclass(frozen=True)
class RegimeSpec:
    n_pairs: int
    regimes: tuple[Regime, ...]
    seed: int
    n_train_samples: int = 256
    n_test_id: int = 96
    n_test_ood: int = 96
    n_classes: int = 4
    feature_dim: int = 64
    n_train_clips: int = 8
    n_test_clips: int = 4
    clip_shape: tuple[int, int, int] = (4, 16, 16)
    deep_embedding_dim: int = 8

    def __post_init__(self):
        if self.n_pairs < 2 or not self.regimes:
            raise ValueError("need n_pairs >= 2 and at least one regime")


DEFAULT_SPEC = RegimeSpec(
    n_pairs=24,
    regimes=(
        Regime("Mahalanobis", meta_feature_shift=(-35.0, 2.0, 0.0, 0.5)),
        Regime("kNN", meta_feature_shift=(45.0, 7.0, 1.8, 2.5)),
    ),
    seed=20240607,
)


def load_regime_spec(path) -> RegimeSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    regimes = tuple(
        Regime(
            r["best_detector"],
            tuple(r.get("meta_feature_shift", ())),
            r.get("id_cluster_spread", 0.1),
            r.get("ood_shift", 6.0),
        )
        for r in doc["regimes"]
    )
    extra = {
        k: doc[k]
        for k in (
            "n_train_samples", "n_test_id", "n_test_ood", "n_classes", "feature_dim",
            "n_train_clips", "n_test_clips", "deep_embedding_dim",
        )
        if k in doc
    }
    return RegimeSpec(n_pairs=doc["n_pairs"], regimes=regimes, seed=doc["seed"], **extra)


# ---------------------------------------------------------------------------
# media synthesis


def synth_video_clip(
    t: int, h: int, w: int, brightness_mean: float, noise_std: float, seed: int
) -> VideoClip:
    if t < 1 or h < 8 or w < 8:
        raise ValueError("invalid clip dimensions")
    if not (0.0 <= brightness_mean <= 255.0) or noise_std < 0:
        raise ValueError("brightness must lie in [0, 255] and noise_std be nonnegative")
    if noise_std == 0:
        frames = np.full((t, h, w, 3), round(brightness_mean), dtype=np.uint8)
        return VideoClip(frames=frames)
    rng = SplitMix64(seed)
    noise = rng.gauss_array(t * h * w * 3).reshape(t, h, w, 3)
    vals = np.clip(np.round(brightness_mean + noise_std * noise), 0, 255)
    return VideoClip(frames=vals.astype(np.uint8))


def synth_flow_clip(
    t: int, h: int, w: int, direction: float, magnitude: float, jitter: float, seed: int
) -> FlowClip:
    if t < 1 or h < 8 or w < 8:
        raise ValueError("invalid clip dimensions")
    if magnitude < 0:
        raise ValueError("magnitude must be nonnegative")
    if jitter == 0:
        angles = np.full((t, h, w), direction)
    else:
        rng = SplitMix64(seed)
        angles = direction + jitter * rng.gauss_array(t * h * w).reshape(t, h, w)
    flow = np.stack([magnitude * np.cos(angles), magnitude * np.sin(angles)], axis=-1)
    return FlowClip(flow=flow.astype(np.float32))


# ---------------------------------------------------------------------------
# feature-export synthesis


@dataclass(frozen=True)
class _Geometry:
    means: np.ndarray  # C x D sparse nonnegative patterns
    head_w: np.ndarray  # C x D
    head_b: np.ndarray  # C
    patterns: np.ndarray  # C x D booleans

    @property
    def dead_coords(self) -> np.ndarray:
        return ~self.patterns.any(axis=0)


def _base_geometry(n_classes: int, dim: int, rng: SplitMix64) -> _Geometry:
    patterns = np.zeros((n_classes, dim), dtype=bool)
    for c in range(n_classes):
        row = np.array([rng.next_float() < PATTERN_DENSITY for _ in range(dim)])
        if not row.any():
            row[c % dim] = True
        patterns[c] = row
    means = PATTERN_LEVEL * patterns.astype(np.float64)
    head_w = HEAD_SCALE * means
    head_b = BIAS_SCALE * rng.gauss_array(n_classes)
    return _Geometry(means, head_w, head_b, patterns)


def _cluster_samples(geom: _Geometry, labels: np.ndarray, spread: float, rng: SplitMix64) -> np.ndarray:
    noise = rng.gauss_array(labels.size * geom.means.shape[1]).reshape(labels.size, -1)
    return geom.means[labels] + spread * noise


def _export(geom, features, class_labels, ood_labels) -> FeatureExport:
    logits = features @ geom.head_w.T + geom.head_b
    return FeatureExport(
        features=features,
        logits=logits,
        head=(geom.head_w, geom.head_b),
        class_labels=class_labels,
        ood_labels=ood_labels,
    )


def synth_feature_export(
    n_id: int, n_ood: int, n_classes: int, dim: int, id_spread: float, ood_shift: float, seed: int
) -> tuple[FeatureExport, FeatureExport]:
    """(train, test) exports: ID class clusters, OOD collapsed toward the
    head's null point by an amount that grows with `ood_shift`."""
    if n_classes < 2 or min(n_id, n_ood) < n_classes:
        raise ValueError("need n_id, n_ood >= n_classes >= 2")
    if dim < 2 or id_spread <= 0 or ood_shift < 0:
        raise ValueError("invalid export parameters")
    rng = SplitMix64(seed)
    geom = _base_geometry(n_classes, dim, rng)

    train_labels = np.arange(n_id) % n_classes
    train_z = _cluster_samples(geom, train_labels, id_spread, rng)
    test_id_labels = np.arange(n_id) % n_classes
    test_id_z = _cluster_samples(geom, test_id_labels, id_spread, rng)
    ood_labels_c = np.arange(n_ood) % n_classes
    ood_z = _cluster_samples(geom, ood_labels_c, id_spread, rng)

    # collapse the class-pattern component; draws above do not depend on shift
    w = ood_shift / (ood_shift + 2.0)
    null_point = -np.linalg.pinv(geom.head_w) @ geom.head_b
    ood_z = ood_z + w * (null_point - geom.means)[ood_labels_c]

    train = _export(geom, train_z, train_labels, None)
    test = _export(
        geom,
        np.vstack([test_id_z, ood_z]),
        np.concatenate([test_id_labels, np.full(n_ood, -1)]),
        np.concatenate([np.zeros(n_id, dtype=np.int64), np.ones(n_ood, dtype=np.int64)]),
    )
    return train, test


# ---------------------------------------------------------------------------
# regime recipes. Each recipe shapes a whole pair (ID structure + OOD bend) so
# that one detector family separates best:
#   Mahalanobis  radial inflation - invisible after kNN's normalization and
#                inverted for logit scorers
#   kNN          per-class anisotropic noise whose direction flips for OOD;
#                the shared covariance (and hence Mahalanobis) is blind to it
#   ViM          a small off-principal-subspace offset (residual channel) plus
#                a slight logit collapse (energy channel); only ViM adds both
#   MaxLogit     a uniform logit drop (softmax scorers are shift-invariant)
#   EnergyBased  own-logit drop plus tail suppression (logsumexp sees both,
#                the max sees only one)
#   MSP          confusion between two classes with the max logit restored
#   GEN          non-max logits evened out per sample at small net movement
#   ReAct        activation inflation hidden by the clip, combined with a
#                uniform logit drop that cancels for unclipped scorers
#   ASH          a per-sample spike that sits on class evidence for ID but on
#                head-invisible coordinates for OOD, plus logit compensation


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _orthogonal_directions(geom: _Geometry, rng: SplitMix64, count: int) -> np.ndarray:
    """Mutually orthonormal unit directions, all orthogonal to class patterns."""
    c, d = geom.means.shape
    basis = np.linalg.qr(geom.means.T)[0][:, : min(c, d)]
    dirs = np.zeros((count, d))
    for k in range(count):
        v = rng.gauss_array(d)
        v -= basis @ (basis.T @ v)
        for j in range(k):
            v -= np.dot(dirs[j], v) * dirs[j]
        dirs[k] = _unit(v)
    return dirs


def _strength(shift: float) -> float:
    # saturating in the shift, exactly zero at zero shift
    return shift / (shift + 6.0)


def synth_regime_export(
    regime: Regime, spec: RegimeSpec, seed: int
) -> tuple[FeatureExport, FeatureExport]:
    """(train, test) exports for one pair of a planted regime."""
    kind = regime.best_detector
    spread = regime.id_cluster_spread
    s = _strength(regime.ood_shift)
    rng = SplitMix64(seed)
    geom = _base_geometry(spec.n_classes, spec.feature_dim, rng)
    c, d = geom.means.shape
    pinv_w = np.linalg.pinv(geom.head_w)
    aniso = _orthogonal_directions(geom, rng, c + 1)

    train_labels = np.arange(spec.n_train_samples) % c
    train_z = _cluster_samples(geom, train_labels, spread, rng)
    id_labels = np.arange(spec.n_test_id) % c
    id_z = _cluster_samples(geom, id_labels, spread, rng)
    ood_cls = np.arange(spec.n_test_ood) % c
    ood_z = _cluster_samples(geom, ood_cls, spread, rng)

    if kind == "kNN":
        # ID noise is elongated along a class-specific direction; OOD keeps the
        # same second moment but concentrates along the *next* class's direction
        sigma_big = 6.0 * spread
        t_train = rng.gauss_array(train_labels.size)
        t_id = rng.gauss_array(id_labels.size)
        t_ood = rng.gauss_array(ood_cls.size)
        train_z += sigma_big * t_train[:, None] * aniso[train_labels]
        id_z += sigma_big * t_id[:, None] * aniso[id_labels]
        keep = math.sqrt(max(0.0, 1.0 - s**2))
        ood_z += sigma_big * (
            keep * t_ood[:, None] * aniso[ood_cls]
            + s * np.sign(t_ood)[:, None] * aniso[(ood_cls + 1) % c]
        )
    elif kind == "ASH":
        # every sample carries one spike; for ID it lands on an own-pattern
        # coordinate (head reads it), for OOD on a coordinate no class uses
        dead = np.flatnonzero(geom.dead_coords)
        spike = 2.5 * PATTERN_LEVEL
        all_z = [(train_z, train_labels, False), (id_z, id_labels, False), (ood_z, ood_cls, True)]
        for z, labels, is_ood in all_z:
            for i in range(z.shape[0]):
                own = np.flatnonzero(geom.patterns[labels[i]])
                coord_id = own[rng.next_below(own.size)]
                coord_dead = dead[rng.next_below(dead.size)] if dead.size else coord_id
                if is_ood:
                    z[i, coord_id] += (1.0 - s) * spike
                    z[i, coord_dead] += s * spike
                else:
                    z[i, coord_id] += spike
        # restore the mean logit contribution the OOD spikes lost
        lift = s * spike * HEAD_SCALE * PATTERN_LEVEL
        ood_z += lift * (pinv_w @ np.ones(c)) * (1.0 / max(c - 1, 1))

    if kind == "Mahalanobis":
        ood_z *= 1.0 + 0.75 * regime.ood_shift / 6.0
    elif kind == "ViM":
        rho = 4.5 * s * spread
        w_c = 0.10 * s
        null_point = -pinv_w @ geom.head_b
        ood_z += rho * aniso[ood_cls] + w_c * (null_point - geom.means)[ood_cls]
    elif kind == "MaxLogit":
        ood_z -= 0.9 * s * (pinv_w @ np.ones(c))
    elif kind == "EnergyBased":
        deltas = np.full((ood_cls.size, c), -1.4 * s)
        deltas[np.arange(ood_cls.size), ood_cls] = -0.45 * s
        ood_z += deltas @ pinv_w.T
    elif kind == "MSP":
        partner = (ood_cls + 1) % c
        mid = 0.5 * (geom.means[ood_cls] + geom.means[partner])
        own_sq = np.einsum("ij,ij->i", geom.means[ood_cls], geom.means[ood_cls])
        cross = np.einsum("ij,ij->i", geom.means[ood_cls], geom.means[partner])
        gain = own_sq / np.maximum(0.5 * (own_sq + cross), 1e-9)
        target = mid * gain[:, None] + (ood_z - geom.means[ood_cls])
        ood_z += 0.5 * s * (target - ood_z)
    elif kind == "GEN":
        logits = ood_z @ geom.head_w.T + geom.head_b
        own = logits[np.arange(ood_cls.size), ood_cls]
        masked = logits.copy()
        masked[np.arange(ood_cls.size), ood_cls] = np.nan
        tail_mean = np.nanmean(masked, axis=1)
        deltas = np.where(np.isnan(masked), 0.0, tail_mean[:, None] - masked)
        ood_z += (1.0 * s) * deltas @ pinv_w.T
    elif kind == "ReAct":
        inflate = 0.5 * s * spread / 0.1
        ood_z[geom.patterns[ood_cls]] += inflate * spread
        mean_active = geom.patterns.sum(axis=1).mean()
        lift = inflate * spread * HEAD_SCALE * PATTERN_LEVEL * mean_active
        ood_z -= lift * (pinv_w @ np.ones(c))

    train = _export(geom, train_z, train_labels, None)
    test = _export(
        geom,
        np.vstack([id_z, ood_z]),
        np.concatenate([id_labels, np.full(spec.n_test_ood, -1)]),
        np.concatenate(
            [np.zeros(spec.n_test_id, dtype=np.int64), np.ones(spec.n_test_ood, dtype=np.int64)]
        ),
    )
    return train, test


# ---------------------------------------------------------------------------
# whole benchmarks

_MEDIA_BASE = {"brightness": 110.0, "noise_std": 8.0, "flow_dir": 0.3, "flow_mag": 1.5}


def _media_knobs(regime: Regime, pair_rng: SplitMix64) -> dict:
    shift = list(regime.meta_feature_shift) + [0.0] * 4
    return {
        "brightness": float(np.clip(_MEDIA_BASE["brightness"] + shift[0] + 3.0 * pair_rng.next_gauss(), 5, 250)),
        "noise_std": max(0.5, _MEDIA_BASE["noise_std"] + shift[1] + 0.4 * pair_rng.next_gauss()),
        "flow_dir": _MEDIA_BASE["flow_dir"] + shift[2] + 0.05 * pair_rng.next_gauss(),
        "flow_mag": max(0.1, _MEDIA_BASE["flow_mag"] + shift[3] + 0.1 * pair_rng.next_gauss()),
    }


def synth_benchmark(spec: RegimeSpec, out_dir) -> tuple[list[DatasetPair], PerformanceMatrix]:
    """Write pair manifests, media, exports, deep embeddings and the oracle
    AUROC matrix under out_dir; returns the loaded pairs and the oracle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t, h, w = spec.clip_shape
    pairs: list[DatasetPair] = []
    index = []

    for i in range(spec.n_pairs):
        regime_idx = i % len(spec.regimes)
        regime = spec.regimes[regime_idx]
        pair_seed = derive_seed(spec.seed, i)
        pair_id = f"pair{i:03d}"
        pdir = out / pair_id
        (pdir / "media").mkdir(parents=True, exist_ok=True)

        knobs = _media_knobs(regime, SplitMix64(derive_seed(pair_seed, 0)))
        modalities = {"video": {"train": [], "test": []}, "flow": {"train": [], "test": []}}
        for role, count in (("train", spec.n_train_clips), ("test", spec.n_test_clips)):
            for j in range(count):
                clip_seed = derive_seed(pair_seed, 100 + (0 if role == "train" else count) + j)
                video = synth_video_clip(
                    t, h, w, knobs["brightness"], knobs["noise_std"], derive_seed(clip_seed, 0)
                )
                flow = synth_flow_clip(
                    t, h, w, knobs["flow_dir"], knobs["flow_mag"], 0.25, derive_seed(clip_seed, 1)
                )
                vpath, fpath = f"media/{role}_{j:02d}.m3vd", f"media/{role}_{j:02d}.m3fl"
                write_video_file(video, pdir / vpath)
                write_flow_file(flow, pdir / fpath)
                modalities["video"][role].append(vpath)
                modalities["flow"][role].append(fpath)

        train_exp, test_exp = synth_regime_export(regime, spec, derive_seed(pair_seed, 1))
        write_feature_export(train_exp, pdir / "export_train")
        write_feature_export(test_exp, pdir / "export_test")

        emb_rng = SplitMix64(derive_seed(pair_seed, 2))
        deep = {}
        if spec.deep_embedding_dim > 0:
            for modality in ("video", "flow"):
                base = np.zeros(spec.deep_embedding_dim)
                base[regime_idx % spec.deep_embedding_dim] = 3.0
                rows = np.stack(
                    [
                        base + 0.5 * emb_rng.gauss_array(spec.deep_embedding_dim)
                        for _ in range(spec.n_train_clips)
                    ]
                )
                path = f"{modality}_deep.emb"
                write_embedding_file(EmbeddingFile(name=f"{pair_id}_{modality}", rows=rows), pdir / path)
                deep[modality] = path

        pair = DatasetPair(
            pair_id=pair_id,
            modalities=modalities,
            exports={"train": "export_train", "test": "export_test"},
            deep_embeddings=deep,
            description=(
                f"Synthetic multimodal pair (regime {regime_idx}): brightness "
                f"{knobs['brightness']:.0f}, flow magnitude {knobs['flow_mag']:.1f}."
            ),
            root=pdir,
        )
        write_pair_manifest(pair, pdir / "manifest.json")
        pairs.append(pair)
        index.append({"pair_id": pair_id, "manifest": f"{pair_id}/manifest.json", "regime": regime_idx})

    oracle = build_performance_matrix(pairs)
    write_performance_matrix(oracle, out / "oracle.csv")
    with open(out / "benchmark.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": spec.seed, "pairs": index, "oracle": "oracle.csv"}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return pairs, oracle


def load_benchmark(bench_dir) -> tuple[list[DatasetPair], PerformanceMatrix, list[int]]:
    from .data_model import load_pair_manifest, read_performance_matrix

    bench = Path(bench_dir)
    with open(bench / "benchmark.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    pairs = [load_pair_manifest(bench / entry["manifest"]) for entry in doc["pairs"]]
    oracle = read_performance_matrix(bench / doc["oracle"])
    regimes = [entry["regime"] for entry in doc["pairs"]]
    return pairs, oracle, regimes
