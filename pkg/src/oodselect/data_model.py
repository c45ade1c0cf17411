"""Domain types and on-disk formats.

Everything the pipeline reads or writes goes through this module: raw media
clips (custom binary formats so round-trips are bit-exact), feature exports
(CSV bundles), embedding files, performance matrices and pair manifests.
All loaded objects are validated on the way in; nothing partially valid is
ever returned.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VIDEO_MAGIC = b"M3VD"
FLOW_MAGIC = b"M3FL"


class FormatError(ValueError):
    """A file violates its format or an invariant of the decoded type."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # T x H x W x 3 uint8
    frame_rate: float = 24.0

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.dtype != np.uint8:
            raise FormatError("video frames must be T x H x W x 3 uint8")
        t, h, w, _ = f.shape
        if t < 1 or h < 8 or w < 8:
            raise FormatError("corrupt file: video dims below minimum (T>=1, H,W>=8)")


@dataclass(frozen=True)
class FlowClip:
    flow: np.ndarray  # T x H x W x 2 float32

    def __post_init__(self):
        f = self.flow
        if f.ndim != 4 or f.shape[3] != 2 or f.dtype != np.float32:
            raise FormatError("flow must be T x H x W x 2 float32")
        t, h, w, _ = f.shape
        if t < 1 or h < 8 or w < 8:
            raise FormatError("corrupt file: flow dims below minimum")
        if not np.isfinite(f).all():
            raise FormatError("corrupt file: non-finite flow values")


@dataclass(frozen=True)
class FeatureExport:
    """Penultimate features, logits and labels for one side of a pair."""

    features: np.ndarray  # N x D
    logits: np.ndarray  # N x C
    head: tuple[np.ndarray, np.ndarray] | None = None  # (W: C x D, b: C)
    class_labels: np.ndarray | None = None  # N ints in [0, C), -1 = absent
    ood_labels: np.ndarray | None = None  # N ints, 0 = ID / 1 = OOD

    def __post_init__(self):
        z, lg = self.features, self.logits
        if z.ndim != 2 or lg.ndim != 2:
            raise FormatError("inconsistent export: features and logits must be 2-D")
        n, d = z.shape
        if n < 1 or d < 1 or lg.shape[1] < 2:
            raise FormatError("inconsistent export: need N>=1, D>=1, C>=2")
        if lg.shape[0] != n:
            raise FormatError("inconsistent export: row count mismatch")
        if not (np.isfinite(z).all() and np.isfinite(lg).all()):
            raise FormatError("inconsistent export: non-finite values")
        if self.head is not None:
            w, b = self.head
            if w.shape != (self.n_classes, d) or b.shape != (self.n_classes,):
                raise FormatError("inconsistent export: head shape mismatch")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise FormatError("inconsistent export: non-finite head")
            if (z @ w.T + b).shape != lg.shape:
                raise FormatError("inconsistent export: head does not map to logits")
        for name, lab in (("class", self.class_labels), ("ood", self.ood_labels)):
            if lab is not None and lab.shape != (n,):
                raise FormatError(f"inconsistent export: {name} label length mismatch")
        if self.class_labels is not None:
            cl = self.class_labels
            if ((cl < -1) | (cl >= self.n_classes)).any():
                raise FormatError("inconsistent export: class label out of range")
        if self.ood_labels is not None and not np.isin(self.ood_labels, (0, 1)).all():
            raise FormatError("inconsistent export: ood labels must be 0/1")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class PerformanceMatrix:
    pair_ids: tuple[str, ...]
    model_ids: tuple[str, ...]
    values: np.ndarray  # n x m AUROC fractions

    def __post_init__(self):
        v = self.values
        n, m = len(self.pair_ids), len(self.model_ids)
        if n < 1 or m < 1 or v.shape != (n, m):
            raise FormatError("performance matrix shape mismatch")
        if len(set(self.pair_ids)) != n or len(set(self.model_ids)) != m:
            raise FormatError("duplicate pair or model id")
        if not np.isfinite(v).all() or (v < 0).any() or (v > 1).any():
            raise FormatError("invalid AUROC: values must lie in [0, 1]")

    def row(self, pair_id: str) -> np.ndarray:
        return self.values[self.pair_ids.index(pair_id)]

    def subset(self, pair_ids) -> "PerformanceMatrix":
        idx = [self.pair_ids.index(p) for p in pair_ids]
        return PerformanceMatrix(tuple(pair_ids), self.model_ids, self.values[idx])


@dataclass(frozen=True)
class EmbeddingFile:
    name: str
    rows: np.ndarray  # count x dim

    def __post_init__(self):
        r = self.rows
        if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
            raise FormatError("embedding rows must be a non-empty 2-D matrix")
        if not np.isfinite(r).all():
            raise FormatError("corrupt file: non-finite embedding values")


@dataclass(frozen=True)
class SplitSpec:
    train_pair_ids: tuple[str, ...]
    test_pair_ids: tuple[str, ...]

    def __post_init__(self):
        tr, te = set(self.train_pair_ids), set(self.test_pair_ids)
        if not tr or not te:
            raise FormatError("split sides must both be nonempty")
        if tr & te:
            raise FormatError("split sides must be disjoint")

    def validate_against(self, matrix: PerformanceMatrix) -> None:
        known = set(matrix.pair_ids)
        missing = (set(self.train_pair_ids) | set(self.test_pair_ids)) - known
        if missing:
            raise FormatError(f"split references unknown pairs: {sorted(missing)}")


@dataclass
class DatasetPair:
    """Manifest for one ID-train / mixed-test dataset pair."""

    pair_id: str
    modalities: dict = field(default_factory=dict)  # modality -> role -> [paths]
    exports: dict = field(default_factory=dict)  # role -> export dir
    deep_embeddings: dict = field(default_factory=dict)  # modality -> path
    description: str = ""
    root: Path = field(default_factory=Path)  # resolution base, not serialized

    def resolve(self, rel) -> Path:
        return (self.root / rel).resolve()

    def clip_paths(self, modality: str, role: str) -> list[Path]:
        return [self.resolve(p) for p in self.modalities.get(modality, {}).get(role, [])]


# ---------------------------------------------------------------------------
# media files


def write_video_file(clip: VideoClip, path) -> None:
    t, h, w, c = clip.frames.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<4I", t, h, w, c))
        fh.write(clip.frames.tobytes(order="C"))


def read_video_file(path) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:4] != VIDEO_MAGIC:
        raise FormatError("not a video file")
    if len(raw) < 20:
        raise FormatError("corrupt file: truncated header")
    t, h, w, c = struct.unpack_from("<4I", raw, 4)
    if c != 3 or t < 1 or h < 8 or w < 8:
        raise FormatError("corrupt file: bad video dimensions")
    need = t * h * w * c
    payload = raw[20:]
    if len(payload) != need:
        raise FormatError("corrupt file: payload size mismatch")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, c)
    return VideoClip(frames=frames.copy())


def write_flow_file(clip: FlowClip, path) -> None:
    t, h, w, c = clip.flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<4I", t, h, w, c))
        fh.write(clip.flow.astype("<f4").tobytes(order="C"))


def read_flow_file(path) -> FlowClip:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise FormatError("not a flow file")
    if len(raw) < 20:
        raise FormatError("corrupt file: truncated header")
    t, h, w, c = struct.unpack_from("<4I", raw, 4)
    if c != 2 or t < 1 or h < 8 or w < 8:
        raise FormatError("corrupt file: bad flow dimensions")
    need = t * h * w * c * 4
    payload = raw[20:]
    if len(payload) != need:
        raise FormatError("corrupt file: payload size mismatch")
    flow = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c)
    if not np.isfinite(flow).all():
        raise FormatError("corrupt file: non-finite flow values")
    return FlowClip(flow=flow.copy())


# ---------------------------------------------------------------------------
# numeric CSV helpers (repr() round-trips floats exactly)


def _write_float_csv(rows: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.atleast_2d(rows):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_float_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise FormatError(f"corrupt file: {path} is empty")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"inconsistent export: ragged rows in {path}")
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# feature exports


def write_feature_export(export: FeatureExport, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    _write_float_csv(export.features, d / "features.csv")
    _write_float_csv(export.logits, d / "logits.csv")
    if export.head is not None:
        w, b = export.head
        _write_float_csv(w, d / "head_w.csv")
        _write_float_csv(b.reshape(1, -1), d / "head_b.csv")
    with open(d / "labels.csv", "w", encoding="utf-8") as fh:
        fh.write("class_label,ood_label\n")
        for i in range(export.n_samples):
            cl = ""
            if export.class_labels is not None and export.class_labels[i] >= 0:
                cl = str(int(export.class_labels[i]))
            ol = "" if export.ood_labels is None else str(int(export.ood_labels[i]))
            fh.write(f"{cl},{ol}\n")


def read_feature_export(dir_path, role: str = "test") -> FeatureExport:
    """Load a CSV export bundle; `role` decides which labels are mandatory."""
    if role not in ("train", "test"):
        raise ValueError(f"unknown export role {role!r}")
    d = Path(dir_path)
    features = _read_float_csv(d / "features.csv")
    logits = _read_float_csv(d / "logits.csv")
    head = None
    if (d / "head_w.csv").exists():
        w = _read_float_csv(d / "head_w.csv")
        b = _read_float_csv(d / "head_b.csv").ravel()
        head = (w, b)

    n = features.shape[0]
    class_labels = np.full(n, -1, dtype=np.int64)
    ood_raw: list[str] = []
    labels_path = d / "labels.csv"
    if not labels_path.exists():
        raise FormatError("missing labels")
    with open(labels_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != ["class_label", "ood_label"]:
            raise FormatError("inconsistent export: bad labels header")
        body = [line.rstrip("\n").split(",") for line in fh if line.strip(", \n")]
    if len(body) != n:
        raise FormatError("inconsistent export: label row count mismatch")
    for i, cols in enumerate(body):
        if len(cols) != 2:
            raise FormatError("inconsistent export: malformed label row")
        if cols[0] != "":
            class_labels[i] = int(cols[0])
        ood_raw.append(cols[1])

    ood_labels = None
    if any(tok != "" for tok in ood_raw):
        if any(tok == "" for tok in ood_raw):
            raise FormatError("inconsistent export: partial ood labels")
        ood_labels = np.array([int(tok) for tok in ood_raw], dtype=np.int64)

    if role == "train" and (class_labels < 0).any():
        raise FormatError("missing labels: train export requires class labels")
    if role == "test":
        if ood_labels is None:
            raise FormatError("missing labels: test export requires ood labels")
        if len(np.unique(ood_labels)) < 2:
            raise FormatError("degenerate test labels: need both ID and OOD samples")

    cl = class_labels if (class_labels >= 0).any() else None
    return FeatureExport(features, logits, head=head, class_labels=cl, ood_labels=ood_labels)


# ---------------------------------------------------------------------------
# performance matrices (values kept at 6 decimals)


def write_performance_matrix(matrix: PerformanceMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pair_id," + ",".join(matrix.model_ids) + "\n")
        for pid, row in zip(matrix.pair_ids, matrix.values):
            fh.write(pid + "," + ",".join(f"{v:.6f}" for v in row) + "\n")


def read_performance_matrix(path) -> PerformanceMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if len(header) < 2 or header[0] != "pair_id":
            raise FormatError("corrupt file: bad performance matrix header")
        model_ids = tuple(header[1:])
        pair_ids: list[str] = []
        rows: list[list[float]] = []
        for line in fh:
            if not line.strip():
                continue
            cols = line.rstrip("\n").split(",")
            if len(cols) != len(header):
                raise FormatError("corrupt file: ragged performance row")
            if cols[0] in pair_ids:
                raise FormatError(f"duplicate pair id {cols[0]!r}")
            vals = []
            for tok in cols[1:]:
                try:
                    v = float(tok)
                except ValueError as exc:
                    raise FormatError(f"invalid AUROC {tok!r}") from exc
                if not (0.0 <= v <= 1.0):
                    raise FormatError(f"invalid AUROC {tok!r}")
                vals.append(v)
            pair_ids.append(cols[0])
            rows.append(vals)
    if not rows:
        raise FormatError("corrupt file: empty performance matrix")
    return PerformanceMatrix(tuple(pair_ids), model_ids, np.asarray(rows))


# ---------------------------------------------------------------------------
# embedding files


def write_embedding_file(emb: EmbeddingFile, path) -> None:
    count, dim = emb.rows.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"name": emb.name, "dim": dim, "count": count}) + "\n")
        for row in emb.rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_embedding_file(path) -> EmbeddingFile:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError("corrupt file: bad embedding header") from exc
        for key in ("name", "dim", "count"):
            if key not in header:
                raise FormatError(f"corrupt file: embedding header missing {key!r}")
        dim, count = int(header["dim"]), int(header["count"])
        if dim < 1 or count < 1:
            raise FormatError("corrupt file: non-positive embedding dims")
        rows = []
        for line in fh:
            if line.strip():
                rows.append([float(tok) for tok in line.strip().split(",")])
    if len(rows) != count or any(len(r) != dim for r in rows):
        raise FormatError("corrupt file: embedding rows do not match header")
    return EmbeddingFile(name=str(header["name"]), rows=np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# pair manifests


def write_pair_manifest(pair: DatasetPair, path) -> None:
    doc = {
        "pair_id": pair.pair_id,
        "description": pair.description,
        "modalities": pair.modalities,
        "exports": pair.exports,
        "deep_embeddings": pair.deep_embeddings,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pair_manifest(path) -> DatasetPair:
    p = Path(path)
    with open(p, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc.get("pair_id"), str) or not doc["pair_id"]:
        raise FormatError("corrupt file: manifest needs a nonempty pair_id")
    pair = DatasetPair(
        pair_id=doc["pair_id"],
        modalities=doc.get("modalities") or {},
        exports=doc.get("exports") or {},
        deep_embeddings=doc.get("deep_embeddings") or {},
        description=doc.get("description", ""),
        root=p.parent,
    )
    bad = set(pair.modalities) - {"video", "flow"}
    if bad:
        raise FormatError(f"corrupt file: unknown modalities {sorted(bad)}")
    return pair


def validate_pair(pair: DatasetPair) -> list[str]:
    """Return human-readable invariant violations (empty list = valid)."""
    violations = []
    if not pair.pair_id:
        violations.append("empty pair_id")
    if not pair.modalities and not pair.exports:
        violations.append("no data source")
    for modality, roles in pair.modalities.items():
        for role in ("train", "test"):
            if role not in roles:
                violations.append(f"{modality} missing {role} clip list")
    if "video" in pair.modalities and "flow" in pair.modalities:
        for role in ("train", "test"):
            nv = len(pair.modalities["video"].get(role, []))
            nf = len(pair.modalities["flow"].get(role, []))
            if nv != nf:
                violations.append(f"unpaired video/flow clips for {role}")
    if "train" in pair.exports:
        try:
            export = read_feature_export(pair.resolve(pair.exports["train"]), role="train")
            if export.ood_labels is not None:
                violations.append("train side must be ID-only")
        except (FormatError, OSError) as exc:
            violations.append(f"train export unreadable: {exc}")
    if "test" in pair.exports:
        try:
            read_feature_export(pair.resolve(pair.exports["test"]), role="test")
        except (FormatError, OSError) as exc:
            violations.append(f"test export unreadable: {exc}")
    return violations


def load_split(path) -> SplitSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SplitSpec(tuple(doc["train_pair_ids"]), tuple(doc["test_pair_ids"]))


def write_split(split: SplitSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"train_pair_ids": list(split.train_pair_ids), "test_pair_ids": list(split.test_pair_ids)},
            fh,
            indent=2,
        )
        fh.write("\n")
