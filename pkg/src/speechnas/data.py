"""Synthetic speaker data, feature files, manifests, trials and crops."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .metrics import Trial, write_trials

FEAT_MAGIC = b"SNF1"
_HEADER = struct.Struct("<4sII")


class FeatureFormatError(ValueError):
    pass


def write_features(path, features: np.ndarray) -> None:
    """``SNF1`` | u32 frames | u32 channels | float32 LE row-major."""
    features = np.asarray(features)
    if features.ndim != 2 or 0 in features.shape:
        raise ValueError(f"features must be a non-empty 2-D array, got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEAT_MAGIC, *features.shape))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, T, F = _HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if T == 0 or F == 0:
        raise FeatureFormatError(f"{path}: zero dimension in header (frames={T}, channels={F}) at offset 4")
    expected = _HEADER.size + 4 * T * F
    if len(raw) < expected:
        raise FeatureFormatError(f"{path}: truncated payload at offset {len(raw)}, expected {expected} bytes")
    return np.frombuffer(raw, dtype="<f4", count=T * F, offset=_HEADER.size).reshape(T, F).astype(np.float32)


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    speaker: int


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    Each speaker owns a random unit prototype; every utterance is an AR(1)
    process pulled towards ``scale * prototype`` with Gaussian innovations of
    standard deviation ``noise``.  ``session`` adds a per-utterance offset drawn
    inside a fixed random subspace of ``session_rank`` dimensions (a stand-in
    for channel variability that a model has to learn to ignore).
    """

    num_speakers: int = 32
    utts_per_speaker: int = 20
    feat_dim: int = 30
    t_min: int = 100
    t_max: int = 200
    scale: float = 1.0
    rho: float = 0.5
    noise: float = 1.0
    session: float = 0.0
    session_rank: int = 10
    val_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ValueError("need at least two speakers")
        if self.t_min < 2 or self.t_max < self.t_min:
            raise ValueError("frame range must satisfy 2 <= t_min <= t_max")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.utts_per_speaker < 2:
            raise ValueError("need at least two utterances per speaker")


def synthesize(spec: SynthSpec) -> Tuple[List[Utterance], np.ndarray]:
    """All utterances in memory, plus the speaker prototypes."""
    rng = np.random.default_rng(spec.seed)
    F = spec.feat_dim
    protos = rng.normal(size=(spec.num_speakers, F))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    basis = np.linalg.qr(rng.normal(size=(F, F)))[0][:, :min(spec.session_rank, F)]
    utts = []
    for spk in range(spec.num_speakers):
        center = spec.scale * protos[spk]
        for k in range(spec.utts_per_speaker):
            T = int(rng.integers(spec.t_min, spec.t_max + 1))
            offset = basis @ rng.normal(size=basis.shape[1]) * spec.session
            target = center + offset
            frames = np.empty((T, F))
            prev = target + rng.normal(size=F) * spec.noise
            frames[0] = prev
            for t in range(1, T):
                prev = target + spec.rho * (prev - target) + rng.normal(size=F) * spec.noise
                frames[t] = prev
            utts.append(Utterance(f"spk{spk:03d}-utt{k:03d}", frames.astype(np.float32), spk))
    return utts, protos


def split_utterances(utts: List[Utterance], val_fraction: float, rng: np.random.Generator
                     ) -> Tuple[List[Utterance], List[Utterance]]:
    """Per-speaker utterance split: every speaker appears in both halves, no utterance in both."""
    by_spk: Dict[int, List[Utterance]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker, []).append(u)
    train, val = [], []
    for spk in sorted(by_spk):
        group = by_spk[spk]
        n_val = min(len(group) - 1, max(2, int(round(val_fraction * len(group)))))
        perm = rng.permutation(len(group))
        val += [group[i] for i in sorted(perm[:n_val])]
        train += [group[i] for i in sorted(perm[n_val:])]
    return train, val


def make_trials(val: List[Utterance], rng: np.random.Generator) -> List[Trial]:
    """All same-speaker pairs plus an equal number of random different-speaker pairs."""
    targets, by_spk = [], {}
    for u in val:
        by_spk.setdefault(u.speaker, []).append(u.id)
    for ids in by_spk.values():
        targets += [Trial(a, b, True) for a, b in itertools.combinations(ids, 2)]
    spk_of = {u.id: u.speaker for u in val}
    ids = [u.id for u in val]
    nontargets, seen = [], set()
    while len(nontargets) < len(targets):
        a, b = rng.choice(len(ids), size=2, replace=False)
        if spk_of[ids[a]] == spk_of[ids[b]] or (a, b) in seen:
            continue
        seen.add((a, b))
        nontargets.append(Trial(ids[a], ids[b], False))
    trials = targets + nontargets
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def generate(spec: SynthSpec, out_dir) -> Path:
    """Write features, ``manifest.tsv``, ``train.tsv``, ``val.tsv`` and ``val_trials.tsv``.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    utts, _ = synthesize(spec)
    rng = np.random.default_rng(spec.seed + 1)
    train, val = split_utterances(utts, spec.val_fraction, rng)
    rows = {}
    for u in utts:
        rel = f"feats/{u.id}.snf"
        write_features(out / rel, u.features)
        rows[u.id] = f"{rel}\t{u.speaker}\t{u.id}\n"
    (out / "manifest.tsv").write_text("".join(rows[u.id] for u in utts))
    (out / "train.tsv").write_text("".join(rows[u.id] for u in train))
    (out / "val.tsv").write_text("".join(rows[u.id] for u in val))
    write_trials(out / "val_trials.tsv", make_trials(val, rng))
    return out / "manifest.tsv"


def read_manifest(path) -> List[Utterance]:
    """Load every utterance listed in a manifest (paths relative to the manifest)."""
    path = Path(path)
    utts = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns")
        rel, spk, uid = cols
        utts.append(Utterance(uid, read_features(path.parent / rel), int(spk)))
    return utts


@dataclass
class Dataset:
    train: List[Utterance]
    val: List[Utterance]
    trials: List[Trial]

    @property
    def num_speakers(self) -> int:
        return max(u.speaker for u in self.train + self.val) + 1

    @property
    def feat_dim(self) -> int:
        return self.train[0].features.shape[1]

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        from .metrics import read_trials

        d = Path(data_dir)
        train = read_manifest(d / "train.tsv")
        if not train:
            raise ValueError(f"{d}: empty training set")
        return cls(train, read_manifest(d / "val.tsv"), read_trials(d / "val_trials.tsv").trials)


def crop(features: np.ndarray, t_min: int = 200, t_max: int = 400, rng=None,
         length: Optional[int] = None) -> np.ndarray:
    """Random contiguous crop of ``uniform[t_min, min(t_max, T)]`` frames.

    Utterances shorter than ``t_min`` are wrap-padded to exactly ``t_min``.
    ``length`` fixes the crop length instead of drawing it.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    T = features.shape[0]
    if T < t_min:
        reps = -(-t_min // T)
        return np.concatenate([features] * reps)[:t_min]
    if length is None:
        length = int(rng.integers(t_min, min(t_max, T) + 1))
    length = min(length, T)
    start = int(rng.integers(0, T - length + 1))
    return features[start:start + length]


def batches(utts: List[Utterance], batch_size: int, t_min: int, t_max: int, rng: np.random.Generator):
    """Shuffled mini-batches; one crop length is drawn per batch so frames stack."""
    order = rng.permutation(len(utts))
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        if len(idx) < 2:
            continue
        shortest = min(utts[i].features.shape[0] for i in idx)
        length = int(rng.integers(t_min, max(t_min, min(t_max, shortest)) + 1))
        x = np.stack([crop(utts[i].features, length, length, rng, length) for i in idx])
        y = np.array([utts[i].speaker for i in idx])
        yield x, y
