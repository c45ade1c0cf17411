"""Handcrafted meta-features and dataset embeddings.

Each clip pair (video + flow) maps to a fixed 37-dimensional feature vector;
a dataset pair is summarized by the per-dimension mean and std of the vectors
of sampled train clips, optionally concatenated with mean-pooled deep
embeddings of both modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data_model import DatasetPair, FlowClip, VideoClip, read_embedding_file, read_flow_file, read_video_file
from .rng import SplitMix64

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

STAT_NAMES = (
    "mean", "std", "skew", "kurt", "min", "max", "median",
    "iqr", "gini", "mad", "aad", "cv", "out_pct", "out_3sigma",
)

CLIP_FEATURE_NAMES = (
    ("clip_len", "height", "width", "aspect", "flow_height", "flow_width", "flow_aspect",
     "colourfulness", "edge_density", "glcm_entropy")
    + tuple(f"hof_{k}" for k in range(8))
    + tuple(f"luma_{s}" for s in STAT_NAMES)
    + ("flowmag_mean", "flowmag_std", "flowmag_iqr", "flowmag_out_pct", "flowmag_out_3sigma")
)

N_CLIP_FEATURES = len(CLIP_FEATURE_NAMES)  # 37


def basic_stats(values) -> np.ndarray:
    """14 distribution statistics; undefined ratios fall back to 0."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("basic_stats needs a nonempty sequence")
    n = x.size
    mu = x.mean()
    centered = x - mu
    var = np.mean(centered**2)
    sigma = np.sqrt(var)
    if sigma > 0:
        skew = np.mean(centered**3) / sigma**3
        kurt = np.mean(centered**4) / sigma**4 - 3.0
    else:
        skew = kurt = 0.0
    med = np.median(x)
    q25, q75 = np.percentile(x, [25.0, 75.0])
    iqr = q75 - q25
    if mu != 0:
        srt = np.sort(x)
        pair_abs_sum = 2.0 * np.sum((2.0 * np.arange(n) - n + 1) * srt)
        gini = pair_abs_sum / (2.0 * n * n * mu)
        cv = sigma / mu
    else:
        gini = cv = 0.0
    mad = np.median(np.abs(x - med))
    aad = np.mean(np.abs(centered))
    q01, q99 = np.percentile(x, [1.0, 99.0])
    out_pct = np.mean((x < q01) | (x > q99))
    out_3s = np.mean(np.abs(centered) > 3.0 * sigma)
    return np.array(
        [mu, sigma, skew, kurt, x.min(), x.max(), med, iqr, gini, mad, aad, cv, out_pct, out_3s]
    )


def _luma(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float64) @ LUMA_WEIGHTS


def colourfulness(clip: VideoClip) -> float:
    """Hasler-Suesstrunk measure over all pixels of all frames jointly."""
    px = clip.frames.reshape(-1, 3).astype(np.float64)
    rg = px[:, 0] - px[:, 1]
    yb = 0.5 * (px[:, 0] + px[:, 1]) - px[:, 2]
    sigma = np.sqrt(rg.var() + yb.var())
    mu = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(sigma + 0.3 * mu)


def _gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()

_BLUR_KERNEL = _gaussian_kernel()
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _canny_edges(gray: np.ndarray) -> np.ndarray:
    """Boolean edge map; thresholds are relative to the frame's max gradient."""
    smooth = ndimage.convolve(gray, _BLUR_KERNEL, mode="reflect")
    gx = ndimage.convolve(smooth, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(smooth, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(gray, dtype=bool)

    # non-max suppression over 4 quantized directions (0, 45, 90, 135 deg)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = ((angle + 22.5) // 45).astype(int) % 4
    padded = np.pad(mag, 1, mode="constant")
    offsets = {0: (0, 1), 1: (-1, 1), 2: (-1, 0), 3: (-1, -1)}
    keep = np.zeros_like(mag, dtype=bool)
    h, w = mag.shape
    core = padded[1 : h + 1, 1 : w + 1]
    for s, (dr, dc) in offsets.items():
        n1 = padded[1 + dr : h + 1 + dr, 1 + dc : w + 1 + dc]
        n2 = padded[1 - dr : h + 1 - dr, 1 - dc : w + 1 - dc]
        mask = sector == s
        keep |= mask & (core >= n1) & (core >= n2)
    thinned = np.where(keep, mag, 0.0)

    low, high = 0.1 * peak, 0.3 * peak
    strong = thinned >= high
    weak = thinned >= low
    return ndimage.binary_propagation(strong, mask=weak)


def edge_density(clip: VideoClip) -> float:
    t, h, w, _ = clip.frames.shape
    luma = _luma(clip.frames)
    dens = [_canny_edges(luma[i]).sum() / (h * w) for i in range(t)]
    return float(np.mean(dens))


def glcm_entropy(clip: VideoClip) -> float:
    """Mean per-frame entropy of the 16-level co-occurrence table, offset (0, 1)."""
    luma = _luma(clip.frames)
    levels = np.clip((luma // 16.0).astype(np.int64), 0, 15)
    ents = []
    for frame in levels:
        left, right = frame[:, :-1].ravel(), frame[:, 1:].ravel()
        counts = np.bincount(left * 16 + right, minlength=256).astype(np.float64)
        p = counts / counts.sum()
        nz = p[p > 0]
        ents.append(float(-(nz * np.log2(nz)).sum()))
    return float(np.mean(ents))


_HOF_EDGES = (np.arange(1, 8) - 4.0) * (np.pi / 4.0)  # 7 interior bin edges


def hof_histogram(flow: FlowClip) -> np.ndarray:
    """8-bin magnitude-weighted orientation histogram over (-pi, pi]."""
    dx = flow.flow[..., 0].astype(np.float64).ravel()
    dy = flow.flow[..., 1].astype(np.float64).ravel()
    mag = np.hypot(dx, dy)
    total = mag.sum()
    if total <= 0:
        return np.zeros(8)
    ang = np.arctan2(dy, dx)
    ang = np.where(ang <= -np.pi, np.pi, ang)  # fold -pi onto +pi: bins are (-pi, pi]
    idx = np.searchsorted(_HOF_EDGES, ang, side="left")
    hist = np.bincount(idx, weights=mag, minlength=8)
    return hist / total


def flow_mag_stats(flow: FlowClip) -> np.ndarray:
    """(mean, std, IQR, outside-1%-band, outside-3sigma) of flow magnitudes."""
    dx = flow.flow[..., 0].astype(np.float64)
    dy = flow.flow[..., 1].astype(np.float64)
    stats = basic_stats(np.hypot(dx, dy))
    return stats[[0, 1, 7, 12, 13]]


def clip_meta_features(video: VideoClip, flow: FlowClip) -> np.ndarray:
    t, h, w, _ = video.frames.shape
    fh, fw = flow.flow.shape[1], flow.flow.shape[2]
    geom = [float(t), float(h), float(w), h / w, float(fh), float(fw), fh / fw]
    luma_stats = basic_stats(_luma(video.frames))
    vec = np.concatenate(
        [
            geom,
            [colourfulness(video), edge_density(video), glcm_entropy(video)],
            hof_histogram(flow),
            luma_stats,
            flow_mag_stats(flow),
        ]
    )
    assert vec.shape == (N_CLIP_FEATURES,)
    return vec


@dataclass(frozen=True)
class DatasetEmbedding:
    pair_id: str
    vector: np.ndarray
    schema: tuple[str, ...]

    def __post_init__(self):
        if len(self.schema) != self.vector.shape[0]:
            raise ValueError("embedding schema length mismatch")
        if not np.isfinite(self.vector).all():
            raise ValueError("embedding contains non-finite values")


def dataset_embedding(pair: DatasetPair, sample_budget: int = 32, seed: int = 0) -> DatasetEmbedding:
    """[mean_37, std_37, pooled video deep emb, pooled flow deep emb] of train clips.

    Deep channels are appended only when the corresponding embedding file is
    listed in the manifest; test-side files are never touched.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    video_paths = pair.clip_paths("video", "train")
    flow_paths = pair.clip_paths("flow", "train")
    has_media = bool(video_paths) and bool(flow_paths)
    if not has_media and not pair.deep_embeddings:
        raise ValueError("no embeddable content")

    parts: list[np.ndarray] = []
    schema: list[str] = []
    if has_media:
        if len(video_paths) != len(flow_paths):
            raise ValueError("video and flow train clip lists must be parallel")
        rng = SplitMix64(seed)
        chosen = rng.sample_indices(len(video_paths), sample_budget)
        feats = np.stack(
            [
                clip_meta_features(read_video_file(video_paths[i]), read_flow_file(flow_paths[i]))
                for i in chosen
            ]
        )
        parts += [feats.mean(axis=0), feats.std(axis=0)]
        schema += [f"mean_{n}" for n in CLIP_FEATURE_NAMES]
        schema += [f"std_{n}" for n in CLIP_FEATURE_NAMES]

    for modality in ("video", "flow"):
        if modality in pair.deep_embeddings:
            emb = read_embedding_file(pair.resolve(pair.deep_embeddings[modality]))
            pooled = emb.rows.mean(axis=0)
            parts.append(pooled)
            schema += [f"{modality}_emb_{i}" for i in range(pooled.shape[0])]

    return DatasetEmbedding(pair.pair_id, np.concatenate(parts), tuple(schema))


@dataclass(frozen=True)
class Scaler:
    schema: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray  # zeros kept as-is; those dims map to 0

    def apply(self, emb: DatasetEmbedding) -> np.ndarray:
        if emb.schema != self.schema:
            raise ValueError("embedding schema does not match scaler")
        out = np.zeros_like(emb.vector)
        nz = self.std > 0
        out[nz] = (emb.vector[nz] - self.mean[nz]) / self.std[nz]
        return out

    def to_dict(self) -> dict:
        return {"schema": list(self.schema), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Scaler":
        return cls(tuple(doc["schema"]), np.asarray(doc["mean"]), np.asarray(doc["std"]))


def standardize(embeddings: list[DatasetEmbedding]) -> tuple[list[np.ndarray], Scaler]:
    """Per-dimension z-scores over the given (train) embeddings."""
    if not embeddings:
        raise ValueError("standardize needs at least one embedding")
    schema = embeddings[0].schema
    if any(e.schema != schema for e in embeddings):
        raise ValueError("embedding schema mismatch")
    mat = np.stack([e.vector for e in embeddings])
    scaler = Scaler(schema, mat.mean(axis=0), mat.std(axis=0))
    return [scaler.apply(e) for e in embeddings], scaler
