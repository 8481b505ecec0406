"""Verification scoring: cosine similarity, EER and minimum DCF.

Tie convention: a trial is accepted when ``score >= threshold``.  So at
threshold ``t`` the miss rate counts target scores ``< t`` and the false
alarm rate counts non-target scores ``>= t``.  The sweep visits every
distinct score plus one point above the maximum (reject everything).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

NORM_EPS = 1e-12


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError(f"dimension mismatch: {e1.shape} vs {e2.shape}")
    den = max(np.linalg.norm(e1), NORM_EPS) * max(np.linalg.norm(e2), NORM_EPS)
    return float(np.clip(e1 @ e2 / den, -1.0, 1.0))


def cosine_scores(E1: np.ndarray, E2: np.ndarray) -> np.ndarray:
    """Row-wise cosine of two ``(n, D)`` arrays."""
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    n1 = np.maximum(np.linalg.norm(E1, axis=1), NORM_EPS)
    n2 = np.maximum(np.linalg.norm(E2, axis=1), NORM_EPS)
    return np.clip((E1 * E2).sum(axis=1) / (n1 * n2), -1.0, 1.0)


def _split(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    tar, non = scores[labels], scores[~labels]
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one non-target trial")
    return tar, non


def error_rates(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, miss, false_alarm)`` over the full sweep, ascending thresholds."""
    tar, non = _split(scores, labels)
    uniq = np.unique(np.concatenate([tar, non]))
    thresholds = np.append(uniq, np.nextafter(uniq[-1], np.inf))
    tar_sorted, non_sorted = np.sort(tar), np.sort(non)
    miss = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    fa = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, miss, fa


def _crossing(thresholds, miss, fa) -> Tuple[float, float]:
    diff = miss - fa  # non-decreasing; starts <= 0, ends at 1
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0 or j == 0:
        return float(miss[j]), float(thresholds[j])
    d0, d1 = diff[j - 1], diff[j]
    alpha = -d0 / (d1 - d0)
    rate = miss[j - 1] + alpha * (miss[j] - miss[j - 1])
    thr = thresholds[j - 1] + alpha * (thresholds[j] - thresholds[j - 1])
    return float(rate), float(thr)


def eer(scores, labels) -> Tuple[float, float]:
    """Equal error rate and its threshold.

    The rate is linearly interpolated between the two sweep points where
    ``miss - false_alarm`` changes sign, so it is invariant to any strictly
    increasing transform of the scores.
    """
    return _crossing(*error_rates(scores, labels))


def eer_nearest(scores, labels) -> float:
    """Non-interpolated EER: ``max(miss, fa)`` at the sweep point closest to the crossing."""
    _, miss, fa = error_rates(scores, labels)
    return float(np.min(np.maximum(miss, fa)))


def dcf_curve(scores, labels, p_target: float, normalize: bool = True,
              c_miss: float = 1.0, c_fa: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    thresholds, miss, fa = error_rates(scores, labels)
    cost = c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa
    if normalize:
        cost = cost / min(c_miss * p_target, c_fa * (1.0 - p_target))
    return thresholds, cost


def min_dcf(scores, labels, p_target: float = 0.01, normalize: bool = True,
            c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum detection cost over all thresholds (NIST-normalised by default)."""
    _, cost = dcf_curve(scores, labels, p_target, normalize, c_miss, c_fa)
    return float(cost.min())


def dcf_at(scores, labels, threshold: float, p_target: float, normalize: bool = True) -> float:
    tar, non = _split(scores, labels)
    miss = np.mean(tar < threshold)
    fa = np.mean(non >= threshold)
    cost = p_target * miss + (1 - p_target) * fa
    return float(cost / min(p_target, 1 - p_target) if normalize else cost)


# ---------------------------------------------------------------- trial sets and files


@dataclass
class Trial:
    enroll: str
    test: str
    target: bool


@dataclass
class TrialSet:
    trials: List[Trial]
    scores: Optional[np.ndarray] = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.target for t in self.trials], dtype=bool)

    def score_with(self, embeddings: Dict[str, np.ndarray]) -> np.ndarray:
        missing = {i for t in self.trials for i in (t.enroll, t.test)} - embeddings.keys()
        if missing:
            raise KeyError(f"unresolved trial ids: {sorted(missing)[:5]}")
        E1 = np.stack([embeddings[t.enroll] for t in self.trials])
        E2 = np.stack([embeddings[t.test] for t in self.trials])
        self.scores = cosine_scores(E1, E2)
        return self.scores


def read_trials(path) -> TrialSet:
    """Lines ``enroll<TAB>test<TAB>{1|0}``; an optional fourth column is a score."""
    trials, scores = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4) or cols[2] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: malformed trial line {line!r}")
        trials.append(Trial(cols[0], cols[1], cols[2] == "1"))
        if len(cols) == 4:
            scores.append(float(cols[3]))
    if scores and len(scores) != len(trials):
        raise ValueError(f"{path}: score column present on some lines only")
    return TrialSet(trials, np.array(scores) if scores else None)


def write_trials(path, trials: Sequence[Trial], scores: Optional[Sequence[float]] = None) -> None:
    with open(path, "w") as fh:
        for i, t in enumerate(trials):
            row = [t.enroll, t.test, "1" if t.target else "0"]
            if scores is not None:
                row.append(repr(float(scores[i])))
            fh.write("\t".join(row) + "\n")


def evaluate_scores(scores, labels) -> Dict[str, float]:
    """EER, threshold and both DCF operating points, normalised and raw."""
    labels = np.asarray(labels).astype(bool)
    e, thr = eer(scores, labels)
    return {
        "eer": e,
        "threshold": thr,
        "dcf_0.01": min_dcf(scores, labels, 0.01),
        "dcf_0.001": min_dcf(scores, labels, 0.001),
        "dcf_0.01_raw": min_dcf(scores, labels, 0.01, normalize=False),
        "dcf_0.001_raw": min_dcf(scores, labels, 0.001, normalize=False),
        "n_target": int(labels.sum()),
        "n_nontarget": int((~labels).sum()),
    }


def format_report(values: Dict[str, object]) -> str:
    """``key = value`` lines, one per entry, in insertion order."""
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
