"""Feature and annotation files, windowing, fold splits and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AnnotationParseError,
    BadMagicError,
    ConfigError,
    FormatError,
    MambaVAError,
    NonFiniteValueError,
    TruncatedFileError,
    UnsupportedVersionError,
)

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"FVEC"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")
INVALID_SENTINEL = -5.0


class CoverageError(MambaVAError, RuntimeError):
    """A real frame was not covered by any segment."""


@dataclass
class FeatureSequence:
    video_id: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise FormatError(f"{self.video_id}: features must be [n >= 1, dim], got {self.data.shape}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class VaSeries:
    valence: np.ndarray
    arousal: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.valence = np.asarray(self.valence, dtype=np.float64)
        self.arousal = np.asarray(self.arousal, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)

    @classmethod
    def from_values(cls, valence, arousal) -> "VaSeries":
        """Frames with a value outside [-1, 1] (e.g. the -5 sentinel) become invalid."""
        v = np.asarray(valence, dtype=np.float64)
        a = np.asarray(arousal, dtype=np.float64)
        valid = (np.abs(v) <= 1) & (np.abs(a) <= 1)
        return cls(v, a, valid)

    def __len__(self):
        return self.valid.size

    def as_array(self) -> np.ndarray:
        return np.stack([self.valence, self.arousal], axis=1)


@dataclass
class Video:
    features: FeatureSequence
    labels: VaSeries

    @property
    def video_id(self) -> str:
        return self.features.video_id


# ---------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class SegmentRange:
    start: int  # 1-indexed first frame
    length: int  # real (unpadded) frames

    @property
    def stop(self) -> int:
        """1-indexed last real frame."""
        return self.start + self.length - 1


def segment_video(n: int, w: int, s: int) -> list[SegmentRange]:
    """Window a video of ``n`` frames into segments of ``w`` frames every ``s``.

    Segment i (1-indexed) starts at frame (i-1)*s + 1; ``n // s + 1``
    candidates are generated and those starting past frame ``n`` are
    dropped. Segments running past ``n`` keep only their real frames and
    are padded by the caller.
    """
    if n < 1 or w < 1 or s < 1:
        raise ConfigError(f"need n, w, s >= 1, got n={n}, w={w}, s={s}")
    if s > w:
        raise ConfigError(f"stride {s} exceeds window {w}; frames would be left uncovered")
    out = []
    for i in range(1, n // s + 2):
        start = (i - 1) * s + 1
        if start > n:
            continue
        out.append(SegmentRange(start, min(w, n - start + 1)))
    return out


@dataclass
class SegmentBatch:
    window: int
    stride: int
    ranges: list[SegmentRange]
    features: np.ndarray  # [k, w, dim], zero-padded
    pad_mask: np.ndarray  # [k, w], True on real frames

    def __len__(self):
        return len(self.ranges)


def split_segments(seq: np.ndarray, w: int, s: int) -> SegmentBatch:
    """Cut a per-frame array [n, ...] into zero-padded windows [k, w, ...]."""
    n = seq.shape[0]
    ranges = segment_video(n, w, s)
    out = np.zeros((len(ranges), w) + seq.shape[1:], dtype=seq.dtype)
    mask = np.zeros((len(ranges), w), dtype=bool)
    for i, r in enumerate(ranges):
        out[i, : r.length] = seq[r.start - 1 : r.stop]
        mask[i, : r.length] = True
    return SegmentBatch(w, s, ranges, out, mask)


def merge_overlapping_predictions(outputs: np.ndarray, ranges: list[SegmentRange], n: int) -> np.ndarray:
    """Average per-segment outputs [k, w, C] back onto ``n`` frames.

    Each frame gets the mean over every non-padded segment position that
    covers it. The mean is kept incrementally, which reproduces a constant
    input exactly however many segments overlap.
    """
    outputs = np.asarray(outputs)
    mean = np.zeros((n,) + outputs.shape[2:], dtype=np.float64)
    count = np.zeros(n, dtype=np.int64)
    tail = (1,) * (mean.ndim - 1)
    for seg, r in zip(outputs, ranges):
        span = slice(r.start - 1, r.stop)
        count[span] += 1
        mean[span] += (seg[: r.length] - mean[span]) / count[span].reshape((-1,) + tail)
    if (count == 0).any():
        missing = int(np.flatnonzero(count == 0)[0]) + 1
        raise CoverageError(f"frame {missing} of {n} is not covered by any segment")
    return mean


# ---------------------------------------------------------------------------
# feature files


def save_features(path, seq: FeatureSequence | np.ndarray):
    data = seq.data if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float32)
    n, dim = data.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, dim))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_features(path, video_id: str | None = None) -> FeatureSequence:
    """Read a feature file: ``FVEC``, u32 version, u32 n, u32 dim, then n*dim LE float32."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {raw[:4]!r})")
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated at {len(raw)} bytes")
    _, version, n, dim = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"{path}: feature format version {version} is not supported")
    if n < 1 or dim < 1:
        raise FormatError(f"{path}: empty feature matrix n={n}, dim={dim}")
    expected = n * dim * 4
    payload = raw[_FEATURE_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float32)
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        frame = int(np.flatnonzero(~finite)[0])
        raise NonFiniteValueError(f"{path}: non-finite value at frame {frame}", frame=frame)
    return FeatureSequence(video_id or path.stem, data)


# ---------------------------------------------------------------------------
# annotation files


def save_annotations(path, valence, arousal):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("valence,arousal\n")
        for v, a in zip(valence, arousal):
            fh.write(f"{float(v)!r},{float(a)!r}\n")


def load_annotations(path, n: int | None = None) -> VaSeries:
    """Read a ``valence,arousal`` CSV with one row per frame.

    Out-of-range values mark a frame invalid. When ``n`` is given the rows
    are reconciled to it: extra rows are dropped and missing rows become
    invalid frames, both with a warning.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise AnnotationParseError(f"{path}: empty annotation file", line=1)
        if [h.strip().lower() for h in header] != ["valence", "arousal"]:
            raise AnnotationParseError(f"{path}:1: expected header 'valence,arousal', got {header}", line=1)
        vals = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                v, a = (float(x) for x in row)
            except ValueError:
                raise AnnotationParseError(f"{path}:{lineno}: cannot parse row {row}", line=lineno) from None
            if not (math.isfinite(v) and math.isfinite(a)):
                raise AnnotationParseError(f"{path}:{lineno}: non-finite value in row {row}", line=lineno)
            vals.append((v, a))
    if not vals:
        raise AnnotationParseError(f"{path}: no annotation rows", line=2)
    arr = np.array(vals, dtype=np.float64)
    if n is not None and len(arr) != n:
        log.warning("%s: %d annotation rows for %d frames; reconciling to %d", path, len(arr), n, n)
        if len(arr) > n:
            arr = arr[:n]
        else:
            arr = np.concatenate([arr, np.full((n - len(arr), 2), INVALID_SENTINEL)])
    return VaSeries.from_values(arr[:, 0], arr[:, 1])


def load_video(feature_path, annotation_path) -> Video:
    feats = load_features(feature_path)
    return Video(feats, load_annotations(annotation_path, feats.n))


def load_dataset(feature_dir, annotation_dir, video_ids=None) -> list[Video]:
    """Load every ``<id>.fvec`` in ``feature_dir`` paired with ``<id>.csv`` annotations."""
    feature_dir, annotation_dir = Path(feature_dir), Path(annotation_dir)
    if not feature_dir.is_dir():
        raise FileNotFoundError(f"feature directory not found: {feature_dir}")
    if not annotation_dir.is_dir():
        raise FileNotFoundError(f"annotation directory not found: {annotation_dir}")
    ids = sorted(p.stem for p in feature_dir.glob("*.fvec")) if video_ids is None else list(video_ids)
    return [load_video(feature_dir / f"{vid}.fvec", annotation_dir / f"{vid}.csv") for vid in ids]


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


def kfold_split(video_ids, k: int = 6, seed: int = 0, official=None, groups=None) -> list[Fold]:
    """Video-level folds.

    Without ``official``, the ids are shuffled by ``seed`` and partitioned
    into ``k`` validation folds. With ``official = (train_ids, val_ids)``,
    fold 0 is exactly that split and folds 1..k-1 partition all ids.
    ``groups`` (video id -> subject) keeps each subject inside one fold.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    ids = sorted(set(video_ids) | (set(official[0]) | set(official[1]) if official else set()))
    parts = k - 1 if official else k
    keys = sorted({groups[v] for v in ids}) if groups else ids
    if len(keys) < parts:
        raise ConfigError(f"{len(keys)} {'subjects' if groups else 'videos'} cannot fill {parts} folds")
    order = np.random.default_rng(seed).permutation(len(keys))
    chunks = np.array_split(order, parts)
    folds = []
    if official:
        folds.append(Fold(0, tuple(official[0]), tuple(official[1])))
    for i, chunk in enumerate(chunks):
        chosen = {keys[j] for j in chunk}
        val = tuple(v for v in ids if (groups[v] if groups else v) in chosen)
        train = tuple(v for v in ids if v not in val)
        folds.append(Fold(i + 1 if official else i, train, val))
    return folds


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticParams:
    seed: int
    dim: int
    feature_alpha: float
    label_alpha: float
    readout: np.ndarray  # [dim, 2]
    bias: np.ndarray  # [2]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.readout, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bias, dtype="<f8").tobytes())
        return h.hexdigest()


def _ema(x: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    state = np.zeros(x.shape[1:], dtype=np.float64)
    for t in range(x.shape[0]):
        state = (1 - alpha) * state + alpha * x[t]
        out[t] = state
    return out


def synthetic_labels(features: np.ndarray, params: SyntheticParams) -> np.ndarray:
    """The generating function: tanh of a fixed readout of a causal EMA of the features."""
    smoothed = _ema(np.asarray(features, dtype=np.float64), params.label_alpha)
    return np.tanh(smoothed @ params.readout + params.bias)


def generate_synthetic_dataset(
    out_dir,
    seed: int = 0,
    n_videos: int = 20,
    frames_range: tuple[int, int] = (450, 550),
    dim: int = 32,
    feature_alpha: float = 0.1,
    label_alpha: float = 0.3,
    invalid_fraction: float = 0.02,
) -> SyntheticParams:
    """Write a seeded stand-in dataset under ``out_dir``.

    Features are unit-variance exponentially smoothed noise. Labels come
    from :func:`synthetic_labels`, so a causal model can learn them
    exactly. About half the videos get one run of ``-5`` sentinel frames
    (``invalid_fraction`` of their length). Writes ``features/``,
    ``annotations/`` and ``manifest.txt``.
    """
    lo, hi = frames_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad frames_range {frames_range}")
    rng = np.random.default_rng(seed)
    readout = rng.standard_normal((dim, 2)) * (1.5 / math.sqrt(dim))
    bias = rng.uniform(-0.2, 0.2, size=2)
    params = SyntheticParams(seed, dim, feature_alpha, label_alpha, readout, bias)

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    scale = math.sqrt((2 - feature_alpha) / feature_alpha)
    lengths = []
    for i in range(n_videos):
        vid = f"video{i:03d}"
        n = int(rng.integers(lo, hi + 1))
        noise = rng.standard_normal((n, dim))
        feats = (_ema(noise, feature_alpha) * scale).astype(np.float32)
        labels = synthetic_labels(feats, params)
        if rng.random() < 0.5 and invalid_fraction > 0:
            run = max(1, int(n * invalid_fraction))
            at = int(rng.integers(0, n - run + 1))
            labels[at : at + run] = INVALID_SENTINEL
        save_features(out / "features" / f"{vid}.fvec", FeatureSequence(vid, feats))
        save_annotations(out / "annotations" / f"{vid}.csv", labels[:, 0], labels[:, 1])
        lengths.append(f"{vid}:{n}")

    manifest = {
        "seed": seed,
        "n_videos": n_videos,
        "frames_min": lo,
        "frames_max": hi,
        "dim": dim,
        "feature_alpha": repr(feature_alpha),
        "label_alpha": repr(label_alpha),
        "invalid_fraction": repr(invalid_fraction),
        "readout": ",".join(repr(float(v)) for v in readout.ravel()),
        "bias": ",".join(repr(float(v)) for v in bias),
        "coefficients_sha256": params.digest(),
        "videos": " ".join(lengths),
    }
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return params


def read_manifest(path) -> dict[str, str]:
    items = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            items[key.strip()] = value.strip()
    return items


def synthetic_params_from_manifest(path) -> SyntheticParams:
    m = read_manifest(path)
    dim = int(m["dim"])
    readout = np.array([float(v) for v in m["readout"].split(",")]).reshape(dim, 2)
    bias = np.array([float(v) for v in m["bias"].split(",")])
    params = SyntheticParams(int(m["seed"]), dim, float(m["feature_alpha"]), float(m["label_alpha"]), readout, bias)
    if params.digest() != m["coefficients_sha256"]:
        raise FormatError(f"{path}: coefficient digest mismatch")
    return params


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
