"""The nine post-hoc OOD scorers, AUROC, and performance-matrix construction.

All detectors operate on exported penultimate features / logits, never on a
live network. Score convention everywhere: higher = more in-distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data_model import DatasetPair, FeatureExport, PerformanceMatrix, read_feature_export

REGISTRY: tuple[str, ...] = (
    "MSP", "GEN", "MaxLogit", "EnergyBased", "Mahalanobis", "ViM", "kNN", "ReAct", "ASH",
)


def _load_defaults() -> dict:
    with resources.files("oodselect.data").joinpath("detector_defaults.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class DetectorConfig:
    """Frozen defaults live in data/detector_defaults.json; any field can be overridden."""

    energy_temperature: float = 1.0
    gen_gamma: float = 0.1
    gen_top_m: int = 100
    knn_k: int = 50
    vim_dim: int | None = None  # None -> floor(D / 2)
    react_percentile: float = 90.0
    ash_prune_percentile: float = 90.0
    ash_variant: str = "p"  # "p" = prune only, "s" = rescale kept activations
    mahalanobis_eps_scale: float = 1e-6

    @classmethod
    def from_file_defaults(cls, **overrides) -> "DetectorConfig":
        doc = _load_defaults()
        doc.pop("version", None)
        doc.update(overrides)
        return cls(**doc)


@dataclass(frozen=True)
class ScorerModel:
    kind: str
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# logit-only scores (row-level ops plus vectorized batch forms)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1)
    return m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))


def msp_score(logits) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("msp_score requires finite logits")
    return float(_softmax(logits).max())


def maxlogit_score(logits) -> float:
    return float(np.asarray(logits, dtype=np.float64).max())


def energy_score(logits, temperature: float = 1.0) -> float:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    return float(temperature * _logsumexp(logits / temperature))


def gen_score(logits, gamma: float = 0.1, top_m: int | None = None) -> float:
    """Negated generalized softmax entropy of the top-M probabilities."""
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must lie in (0, 1)")
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[-1]
    m = min(c, 100) if top_m is None else min(top_m, c)
    p = np.sort(_softmax(logits))[::-1][:m]
    return float(-np.sum(p**gamma * (1.0 - p) ** gamma))


def _batch_logit_scores(kind: str, logits: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    if kind == "MSP":
        return _softmax(logits).max(axis=1)
    if kind == "MaxLogit":
        return logits.max(axis=1)
    if kind == "EnergyBased":
        t = cfg.energy_temperature
        if t <= 0:
            raise ValueError("temperature must be positive")
        return t * _logsumexp(logits / t)
    if kind == "GEN":
        c = logits.shape[1]
        m = min(c, cfg.gen_top_m)
        p = np.sort(_softmax(logits), axis=1)[:, ::-1][:, :m]
        return -np.sum(p**cfg.gen_gamma * (1.0 - p) ** cfg.gen_gamma, axis=1)
    raise KeyError(kind)


# ---------------------------------------------------------------------------
# fitted feature-space detectors


def fit_mahalanobis(train: FeatureExport, eps_scale: float = 1e-6) -> ScorerModel:
    """Class means plus shared (pooled, divide-by-N) within-class covariance."""
    if train.class_labels is None or (train.class_labels < 0).any():
        raise ValueError("Mahalanobis requires class labels on the train export")
    z, labels = train.features, train.class_labels
    n, d = z.shape
    c = train.n_classes
    means = np.zeros((c, d))
    scatter = np.zeros((d, d))
    for k in range(c):
        zk = z[labels == k]
        if zk.shape[0] == 0:
            raise ValueError(f"Mahalanobis: class {k} has no train samples")
        means[k] = zk.mean(axis=0)
        dev = zk - means[k]
        scatter += dev.T @ dev
    cov = scatter / n
    cov += (eps_scale * np.trace(cov) / d) * np.eye(d)
    try:
        np.linalg.cholesky(cov)
        precision = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Mahalanobis: covariance is singular") from exc
    precision = 0.5 * (precision + precision.T)
    return ScorerModel("Mahalanobis", {"means": means, "precision": precision})


def mahalanobis_scores(model: ScorerModel, features: np.ndarray) -> np.ndarray:
    means, prec = model.params["means"], model.params["precision"]
    d2 = np.empty((features.shape[0], means.shape[0]))
    for k, mu in enumerate(means):
        dev = features - mu
        d2[:, k] = np.einsum("ij,jk,ik->i", dev, prec, dev)
    return -d2.min(axis=1)


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    # zero vectors are left unnormalized by convention
    return np.where(norms > 0, z / np.where(norms > 0, norms, 1.0), z)


def fit_knn(train: FeatureExport, k: int | None = None) -> ScorerModel:
    n = train.n_samples
    k = min(50, n) if k is None else k
    if not (1 <= k <= n):
        raise ValueError(f"kNN: k={k} out of range for {n} train samples")
    return ScorerModel("kNN", {"bank": _unit_rows(train.features), "k": k})


def knn_scores(model: ScorerModel, features: np.ndarray) -> np.ndarray:
    bank, k = model.params["bank"], model.params["k"]
    q = _unit_rows(features)
    d2 = np.maximum(
        (q**2).sum(axis=1)[:, None] + (bank**2).sum(axis=1)[None, :] - 2.0 * q @ bank.T, 0.0
    )
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return -np.sqrt(kth)


def fit_vim(train: FeatureExport, d: int | None = None) -> ScorerModel:
    """Principal-subspace residual fused with the energy score."""
    z = train.features
    n, dim = z.shape
    if dim < 2:
        raise ValueError("ViM needs at least 2 feature dimensions")
    d = max(1, dim // 2) if d is None else d
    if d >= dim:
        raise ValueError(f"ViM: subspace dim {d} must be < feature dim {dim}")
    if train.head is not None:
        w, b = train.head
        u = -np.linalg.pinv(w) @ b
    else:
        u = z.mean(axis=0)
    centered = z - u
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    basis = eigvecs[:, np.argsort(eigvals)[::-1][:d]]  # D x d, orthonormal
    resid = np.linalg.norm(centered - (centered @ basis) @ basis.T, axis=1)
    mean_resid = resid.mean()
    alpha = float(train.logits.max(axis=1).mean() / mean_resid) if mean_resid > 0 else 0.0
    return ScorerModel("ViM", {"u": u, "basis": basis, "alpha": alpha})


def vim_scores(model: ScorerModel, features: np.ndarray, logits: np.ndarray) -> np.ndarray:
    u, basis, alpha = model.params["u"], model.params["basis"], model.params["alpha"]
    centered = features - u
    resid = np.linalg.norm(centered - (centered @ basis) @ basis.T, axis=1)
    return _logsumexp(logits) - alpha * resid


def fit_react(train: FeatureExport, percentile: float = 90.0) -> ScorerModel:
    if train.head is None:
        raise ValueError("ReAct requires exported head")
    c = float(np.percentile(train.features.ravel(), percentile))
    return ScorerModel("ReAct", {"head": train.head, "clip": c})


def react_score(features: np.ndarray, head: tuple[np.ndarray, np.ndarray], clip: float) -> np.ndarray:
    """Energy over head logits of activations clipped at `clip` from above."""
    if head is None:
        raise ValueError("ReAct requires exported head")
    w, b = head
    clipped = np.minimum(features, clip)
    return _logsumexp(clipped @ w.T + b)


def ash_score(
    features: np.ndarray,
    head: tuple[np.ndarray, np.ndarray],
    prune_percentile: float = 90.0,
    variant: str = "p",
) -> np.ndarray:
    """Energy over head logits after keeping only the top activations.

    Keeps the largest (100-p)% activations per sample (ties resolved toward
    lower index), zeroes the rest; variant "s" additionally rescales the kept
    activations by sum-before / sum-after.
    """
    if head is None:
        raise ValueError("ASH requires exported head")
    if not (0.0 <= prune_percentile < 100.0):
        raise ValueError("prune percentile must lie in [0, 100)")
    w, b = head
    n, d = features.shape
    n_keep = max(1, int(np.floor(d * (100.0 - prune_percentile) / 100.0 + 1e-12)))
    pruned = np.zeros_like(features)
    # stable argsort on negated values keeps the lower index on ties
    order = np.argsort(-features, axis=1, kind="stable")[:, :n_keep]
    rows = np.arange(n)[:, None]
    pruned[rows, order] = features[rows, order]
    if variant == "s":
        s1 = features.sum(axis=1)
        s2 = pruned.sum(axis=1)
        scale = np.where(s2 != 0, s1 / np.where(s2 != 0, s2, 1.0), 1.0)
        pruned = pruned * scale[:, None]
    elif variant != "p":
        raise ValueError(f"unknown ASH variant {variant!r}")
    return _logsumexp(pruned @ w.T + b)


def classify(score: float, threshold: float) -> str:
    """Threshold rule G(x): scores at or above the threshold count as ID."""
    return "ID" if score >= threshold else "OOD"


# ---------------------------------------------------------------------------
# evaluation


def auroc(scores, ood_labels) -> float:
    """Tie-aware Mann-Whitney AUROC: P(s_ID > s_OOD) + 0.5 P(s_ID = s_OOD)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(ood_labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    n_id = int((y == 0).sum())
    n_ood = int((y == 1).sum())
    if n_id == 0 or n_ood == 0:
        raise ValueError("auroc needs at least one ID and one OOD label")
    ranks = rankdata(s, method="average")
    r_id = ranks[y == 0].sum()
    return float((r_id - n_id * (n_id + 1) / 2.0) / (n_id * n_ood))


# ---------------------------------------------------------------------------
# fit / score dispatch and the performance matrix

_LOGIT_ONLY = ("MSP", "GEN", "MaxLogit", "EnergyBased")


def fit_detector(kind: str, train: FeatureExport, cfg: DetectorConfig | None = None) -> ScorerModel:
    cfg = cfg or DetectorConfig()
    if kind in _LOGIT_ONLY:
        return ScorerModel(kind)
    if kind == "Mahalanobis":
        return fit_mahalanobis(train, eps_scale=cfg.mahalanobis_eps_scale)
    if kind == "kNN":
        return fit_knn(train, k=min(cfg.knn_k, train.n_samples))
    if kind == "ViM":
        return fit_vim(train, d=cfg.vim_dim)
    if kind == "ReAct":
        return fit_react(train, percentile=cfg.react_percentile)
    if kind == "ASH":
        if train.head is None:
            raise ValueError("ASH requires exported head")
        return ScorerModel("ASH", {"head": train.head})
    raise KeyError(f"unknown detector {kind!r}")


def score_export(model: ScorerModel, test: FeatureExport, cfg: DetectorConfig | None = None) -> np.ndarray:
    cfg = cfg or DetectorConfig()
    kind = model.kind
    if kind in _LOGIT_ONLY:
        return _batch_logit_scores(kind, test.logits, cfg)
    if kind == "Mahalanobis":
        return mahalanobis_scores(model, test.features)
    if kind == "kNN":
        return knn_scores(model, test.features)
    if kind == "ViM":
        return vim_scores(model, test.features, test.logits)
    if kind == "ReAct":
        return react_score(test.features, model.params["head"], model.params["clip"])
    if kind == "ASH":
        return ash_score(
            test.features, model.params["head"], cfg.ash_prune_percentile, cfg.ash_variant
        )
    raise KeyError(f"unknown detector {kind!r}")


def _pair_exports(pair: DatasetPair) -> tuple[FeatureExport, FeatureExport]:
    if "train" not in pair.exports or "test" not in pair.exports:
        raise ValueError(f"pair {pair.pair_id!r} lacks train/test exports")
    train = read_feature_export(pair.resolve(pair.exports["train"]), role="train")
    test = read_feature_export(pair.resolve(pair.exports["test"]), role="test")
    return train, test


def score_pair(
    pair: DatasetPair, registry: tuple[str, ...] = REGISTRY, cfg: DetectorConfig | None = None
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-detector test scores for one pair, plus the test OOD labels."""
    train, test = _pair_exports(pair)
    scores = {}
    for kind in registry:
        try:
            model = fit_detector(kind, train, cfg)
            scores[kind] = score_export(model, test, cfg)
        except Exception as exc:
            raise RuntimeError(f"detector {kind!r} failed on pair {pair.pair_id!r}: {exc}") from exc
    return scores, test.ood_labels


def build_performance_matrix(
    pairs: list[DatasetPair],
    registry: tuple[str, ...] = REGISTRY,
    cfg: DetectorConfig | None = None,
    jobs: int = 1,
) -> PerformanceMatrix:
    """AUROC of every registry detector on every pair, rows in pair order."""

    def one_row(pair: DatasetPair) -> list[float]:
        scores, labels = score_pair(pair, registry, cfg)
        row = []
        for kind in registry:
            try:
                row.append(auroc(scores[kind], labels))
            except Exception as exc:
                raise RuntimeError(
                    f"detector {kind!r} failed on pair {pair.pair_id!r}: {exc}"
                ) from exc
        return row

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one_row, pairs))
    else:
        rows = [one_row(p) for p in pairs]
    return PerformanceMatrix(
        tuple(p.pair_id for p in pairs), tuple(registry), np.asarray(rows)
    )


def write_scores(pair: DatasetPair, out_dir, registry=REGISTRY, cfg=None) -> Path:
    """One CSV per detector under out_dir/pair_id/, one score per line."""
    scores, _ = score_pair(pair, registry, cfg)
    pair_dir = Path(out_dir) / pair.pair_id
    pair_dir.mkdir(parents=True, exist_ok=True)
    for kind in registry:
        with open(pair_dir / f"{kind}.csv", "w", encoding="utf-8") as fh:
            for v in scores[kind]:
                fh.write(repr(float(v)) + "\n")
    return pair_dir


def read_scores(scores_dir, pair_id: str, registry=REGISTRY) -> np.ndarray:
    """m x N matrix of stored detector scores for one pair."""
    pair_dir = Path(scores_dir) / pair_id
    rows = []
    for kind in registry:
        path = pair_dir / f"{kind}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing score file {path}")
        with open(path, "r", encoding="utf-8") as fh:
            rows.append([float(line) for line in fh if line.strip()])
    return np.asarray(rows, dtype=np.float64)
