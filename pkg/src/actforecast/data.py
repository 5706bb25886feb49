"""Feature-sequence files, the synthetic activity corpus and the p%/q% split."""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

FSEQ_MAGIC = b"FSQ1"
_FSEQ_HEADER = struct.Struct("<4sIII")
MANIFEST_HEADER = "fseq-manifest v1"
SPLITS = ("train", "val", "test")

# observation x prediction percentages of the evaluation protocol
PROTOCOL_PQ: tuple[tuple[int, int], ...] = tuple((p, q) for p in (20, 30) for q in (10, 20, 30, 50))


class TruncatedFileError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


@dataclass
class FeatureSequence:
    id: str
    features: np.ndarray  # (T_raw, d) float32
    labels: np.ndarray  # (T_raw,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.id}: features {self.features.shape} and labels {self.labels.shape} disagree")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.id == other.id
            and self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


def write_fseq(seq: FeatureSequence, path) -> None:
    bad = np.flatnonzero((seq.labels < 0) | (seq.labels >= seq.n_classes))
    if bad.size:
        raise LabelRangeError(f"{seq.id}: frame {bad[0]} has label {seq.labels[bad[0]]} outside [0, {seq.n_classes})")
    T, d = seq.features.shape
    with open(path, "wb") as f:
        f.write(_FSEQ_HEADER.pack(FSEQ_MAGIC, T, d, seq.n_classes))
        f.write(seq.features.astype("<f4").tobytes())
        f.write(seq.labels.astype("<u2").tobytes())


def read_fseq(path, seq_id: str | None = None) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != FSEQ_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FSEQ_MAGIC!r}")
    if len(raw) < _FSEQ_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    _, T, d, n = _FSEQ_HEADER.unpack_from(raw)
    need = _FSEQ_HEADER.size + 4 * T * d + 2 * T
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: truncated, {len(raw)} of {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes")
    off = _FSEQ_HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=T * d, offset=off).reshape(T, d).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u2", count=T, offset=off + 4 * T * d).astype(np.int64)
    bad = np.flatnonzero(labels >= n)
    if bad.size:
        raise LabelRangeError(f"{path}: frame {bad[0]} has label {labels[bad[0]]} >= N={n}")
    return FeatureSequence(seq_id if seq_id is not None else Path(path).stem, feats, labels, n)


# --- manifest ---------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str]]  # (relative path, split)
    n_classes: int
    dim: int

    def paths(self, split: str) -> list[str]:
        return [p for p, s in self.entries if s == split]

    def load(self, split: str) -> list[FeatureSequence]:
        seqs = []
        for rel in self.paths(split):
            seq = read_fseq(self.root / rel, seq_id=rel)
            if seq.dim != self.dim or seq.n_classes != self.n_classes:
                raise FormatError(f"{rel}: (d={seq.dim}, N={seq.n_classes}) does not match manifest (d={self.dim}, N={self.n_classes})")
            seqs.append(seq)
        return seqs

    def train_val(self, val_fraction: float = 0.1) -> tuple[list[FeatureSequence], list[FeatureSequence]]:
        """Train and validation sequences; carves ``val_fraction`` of train by id hash when no val entries exist."""
        train = self.load("train")
        if self.paths("val"):
            return train, self.load("val")
        return carve_validation(train, val_fraction)

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.txt"
        lines = [f"{MANIFEST_HEADER} N={self.n_classes} d={self.dim}"]
        lines += [f"{split}\t{rel}" for rel, split in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    head = lines[0].split()
    if " ".join(head[:2]) != MANIFEST_HEADER or len(head) != 4:
        raise FormatError(f"{path}:1: expected header '{MANIFEST_HEADER} N=<n> d=<d>', got {lines[0]!r}")
    try:
        kv = dict(tok.split("=", 1) for tok in head[2:])
        n, d = int(kv["N"]), int(kv["d"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}:1: malformed header {lines[0]!r}") from exc
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[0] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: expected '<train|val|test>\\t<path>', got {line!r}")
        if not (path.parent / parts[1]).is_file():
            raise FormatError(f"{path}:{lineno}: missing file {parts[1]}")
        entries.append((parts[1], parts[0]))
    return DatasetManifest(path.parent, entries, n, d)


def carve_validation(seqs: list[FeatureSequence], fraction: float = 0.1):
    """Deterministic train/val split: the ``fraction`` of ids with the smallest hash go to val."""
    if len(seqs) < 2:
        return list(seqs), []
    n_val = max(1, int(round(fraction * len(seqs))))
    ranked = sorted(seqs, key=lambda s: hashlib.sha256(s.id.encode()).hexdigest())
    val_ids = {s.id for s in ranked[:n_val]}
    return [s for s in seqs if s.id not in val_ids], [s for s in seqs if s.id in val_ids]


# --- synthetic corpus --------------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Activities are absorbing Markov chains over action classes.

    ``transitions[a]`` is ``N x (N + 1)``: row ``c`` gives the next-action
    distribution after class ``c``, with the final column the probability of
    ending the sequence. ``start[a]`` is the first-action distribution.
    """

    n_classes: int = 8
    n_activities: int = 2
    transitions: list[np.ndarray] | None = None
    start: list[np.ndarray] | None = None
    duration_range: tuple[int, int] = (8, 20)
    dim: int = 32
    k_informative: int = 8
    noise: float = 0.5
    smoothing: float = 0.8
    prototype_scale: float = 1.5
    n_train: int = 120
    n_val: int = 20
    n_test: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.transitions is None or self.start is None:
            start, trans = default_chains(self.n_classes, self.n_activities, self.seed)
            self.start = start if self.start is None else self.start
            self.transitions = trans if self.transitions is None else self.transitions
        self.transitions = [np.asarray(t, dtype=np.float64) for t in self.transitions]
        self.start = [np.asarray(s, dtype=np.float64) for s in self.start]
        self.validate()

    def validate(self) -> None:
        N = self.n_classes
        if len(self.transitions) != self.n_activities or len(self.start) != self.n_activities:
            raise ConfigError(f"need {self.n_activities} chains, got {len(self.transitions)} transitions / {len(self.start)} starts")
        for a, (s, t) in enumerate(zip(self.start, self.transitions)):
            if t.shape != (N, N + 1) or s.shape != (N,):
                raise ConfigError(f"activity {a}: transition {t.shape} / start {s.shape}, expected ({N}, {N + 1}) / ({N},)")
            if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError(f"activity {a}: transition rows must be nonnegative and sum to 1")
            if (s < 0).any() or not np.isclose(s.sum(), 1.0, atol=1e-9):
                raise ConfigError(f"activity {a}: start distribution must sum to 1")
        if not 0 < self.k_informative <= self.dim:
            raise ConfigError(f"k_informative={self.k_informative} must be in [1, d={self.dim}]")
        lo, hi = self.duration_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad duration range {self.duration_range}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must be in [0, 1), got {self.smoothing}")

    def expected_actions(self) -> float:
        """Mean chain length, from the fundamental matrix of the absorbing chain."""
        N = self.n_classes
        total = 0.0
        for s, t in zip(self.start, self.transitions):
            fundamental = np.linalg.inv(np.eye(N) - t[:, :N])
            total += s @ fundamental @ np.ones(N)
        return total / self.n_activities


def default_chains(n_classes: int, n_activities: int, seed: int, p_skip: float = 0.15):
    """Each activity walks its own permutation of the classes; with
    probability ``p_skip`` it jumps over the next action. The walk ends after
    the last action of the permutation."""
    rng = np.random.default_rng([seed, 0xC4A1])
    starts, transitions = [], []
    N = n_classes
    for _ in range(n_activities):
        order = rng.permutation(N)
        t = np.zeros((N, N + 1))
        for i, c in enumerate(order):
            if i == N - 1:
                t[c, N] = 1.0
            elif i == N - 2:
                t[c, order[i + 1]] = 1.0 - p_skip
                t[c, N] = p_skip
            else:
                t[c, order[i + 1]] = 1.0 - p_skip
                t[c, order[i + 2]] = p_skip
        s = np.zeros(N)
        s[order[0]] = 1.0
        starts.append(s)
        transitions.append(t)
    return starts, transitions


def sample_action_sequence(cfg: GeneratorConfig, rng: np.random.Generator) -> tuple[int, list[int], list[int]]:
    """Returns (activity, action classes, durations)."""
    a = int(rng.integers(cfg.n_activities))
    N = cfg.n_classes
    c = int(rng.choice(N, p=cfg.start[a]))
    actions, durations = [], []
    lo, hi = cfg.duration_range
    while c != N:
        actions.append(c)
        durations.append(int(rng.integers(lo, hi + 1)))
        c = int(rng.choice(N + 1, p=cfg.transitions[a][c]))
    return a, actions, durations


def generate_sequences(cfg: GeneratorConfig) -> dict[str, list[FeatureSequence]]:
    """In-memory corpus; ids are ``<split>/<index>``."""
    rng = np.random.default_rng(cfg.seed)
    informative = np.sort(rng.choice(cfg.dim, size=cfg.k_informative, replace=False))
    protos = np.zeros((cfg.n_classes, cfg.dim))
    protos[:, informative] = cfg.prototype_scale * rng.standard_normal((cfg.n_classes, cfg.k_informative))
    out: dict[str, list[FeatureSequence]] = {}
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        seqs = []
        for i in range(count):
            _, actions, durations = sample_action_sequence(cfg, rng)
            labels = np.repeat(actions, durations)
            while labels.size < 2:
                labels = np.concatenate([labels, labels])
            x = protos[labels] + cfg.noise * rng.standard_normal((labels.size, cfg.dim))
            if cfg.smoothing > 0:
                for t in range(1, labels.size):
                    x[t] = cfg.smoothing * x[t - 1] + (1.0 - cfg.smoothing) * x[t]
            seqs.append(FeatureSequence(f"{split}/{i:04d}", x, labels, cfg.n_classes))
        out[split] = seqs
    return out


def generate_synthetic_dataset(cfg: GeneratorConfig, out_dir) -> DatasetManifest:
    """Write the corpus as FSQ1 files plus ``manifest.txt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    entries = []
    for split, seqs in generate_sequences(cfg).items():
        os.makedirs(out_dir / split, exist_ok=True)
        for seq in seqs:
            rel = f"{seq.id}.fseq"
            write_fseq(seq, out_dir / rel)
            entries.append((rel, split))
    manifest = DatasetManifest(out_dir, entries, cfg.n_classes, cfg.dim)
    manifest.write()
    return manifest


# --- temporal resampling and the observation protocol ------------------------------


def _positions(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resample_labels(labels: np.ndarray, target_len: int) -> np.ndarray:
    """Nearest-frame label lookup on the normalised time axis."""
    labels = np.asarray(labels)
    idx = np.minimum(np.floor(_positions(labels.size, target_len) + 0.5).astype(np.intp), labels.size - 1)
    return labels[idx]


def resample_sequence(X: np.ndarray, labels: np.ndarray | None, target_len: int):
    """Linear interpolation of feature rows onto ``target_len`` evenly spaced
    points (endpoints to endpoints); labels by nearest frame."""
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    if T < 1 or target_len < 1:
        raise ValueError(f"resample_sequence: lengths must be >= 1 (T={T}, target={target_len})")
    pos = _positions(T, target_len)
    lo = np.minimum(np.floor(pos).astype(np.intp), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    Y = X[lo] * (1.0 - frac) + X[hi] * frac
    if T == target_len:
        Y = X.copy()
    return Y, (resample_labels(labels, target_len) if labels is not None else None)


@dataclass
class Sample:
    """Model-ready observation/future pair (or a batch of them)."""

    X_obs: np.ndarray  # (T_fixed, d) or (B, T_fixed, d)
    obs_labels: np.ndarray
    fut_labels: np.ndarray
    fut_frame_range: tuple[int, int] | list[tuple[int, int]]
    fut_frame_labels: np.ndarray | list[np.ndarray] = field(repr=False)
    seq_id: str | list[str] = ""
    pq: tuple[int, int] | list[tuple[int, int]] = (0, 0)

    @property
    def batched(self) -> bool:
        return self.X_obs.ndim == 3

    @property
    def batch_size(self) -> int:
        return self.X_obs.shape[0] if self.batched else 1


def observation_windows(T_raw: int, p: float, q: float) -> tuple[int, int]:
    """Frame counts (n_obs, end) for observing p% and predicting the next q%."""
    if not (p > 0 and q > 0 and p + q <= 100):
        raise ConfigError(f"need p > 0, q > 0, p + q <= 100; got p={p}, q={q}")
    n_obs = math.floor(p * T_raw / 100)
    end = math.floor((p + q) * T_raw / 100)
    if n_obs < 1:
        raise ConfigError(f"empty observed window: floor({p}% of {T_raw} frames) = 0")
    if end <= n_obs:
        raise ConfigError(f"empty future window: frames [{n_obs}, {end}) for p={p}, q={q}, T={T_raw}")
    return n_obs, end


def split_observation(seq: FeatureSequence, p: float, q: float, T_fixed: int, n_f: int) -> Sample:
    n_obs, end = observation_windows(seq.length, p, q)
    X_obs, obs_labels = resample_sequence(seq.features[:n_obs], seq.labels[:n_obs], T_fixed)
    fut = seq.labels[n_obs:end]
    return Sample(X_obs, obs_labels, resample_labels(fut, n_f), (n_obs, end), fut.copy(), seq.id, (p, q))


def collate(samples: list[Sample]) -> Sample:
    return Sample(
        np.stack([s.X_obs for s in samples]),
        np.stack([s.obs_labels for s in samples]),
        np.stack([s.fut_labels for s in samples]),
        [s.fut_frame_range for s in samples],
        [s.fut_frame_labels for s in samples],
        [s.seq_id for s in samples],
        [s.pq for s in samples],
    )


# --- exact-chain forecaster -----------------------------------------------------------


def markov_oracle_forecast(cfg: GeneratorConfig, observed_labels: np.ndarray, n_future: int) -> np.ndarray:
    """Frame-wise most likely future labels under the true generator.

    Posterior over activities from the observed action order, then an exact
    forward recursion over (activity, current class, frames left after the
    current one). Mass that terminates the sequence is dropped.
    """
    N = cfg.n_classes
    lo, hi = cfg.duration_range
    observed_labels = np.asarray(observed_labels)
    runs = [int(observed_labels[0])]
    for c in observed_labels[1:]:
        if c != runs[-1]:
            runs.append(int(c))
    elapsed = 0
    for c in observed_labels[::-1]:
        if c != runs[-1]:
            break
        elapsed += 1
    post = np.array(
        [s[runs[0]] * np.prod([t[a, b] for a, b in zip(runs[:-1], runs[1:])]) for s, t in zip(cfg.start, cfg.transitions)]
    )
    post = post / post.sum() if post.sum() > 0 else np.full(cfg.n_activities, 1.0 / cfg.n_activities)

    durations = np.arange(lo, hi + 1)
    left = np.zeros((cfg.n_activities, N, hi + 1))
    feasible = durations[durations >= elapsed]
    if feasible.size == 0:
        left[:, runs[-1], 0] = post
    else:
        for D in feasible:
            left[:, runs[-1], D - elapsed] += post / feasible.size
    pred = np.empty(n_future, dtype=np.int64)
    for k in range(n_future):
        nxt = np.zeros_like(left)
        nxt[:, :, :-1] = left[:, :, 1:]
        for a in range(cfg.n_activities):
            flow = left[a, :, 0] @ cfg.transitions[a][:, :N]
            nxt[a, :, durations - 1] += flow / durations.size
        left = nxt
        pred[k] = int(np.argmax(left.sum(axis=(0, 2))))
    return pred
