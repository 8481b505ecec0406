"""Architecture codes and the block-level search spaces.

An architecture is one ``(b, c, d)`` choice per layer: branch count, D-TDNN
feature width and channel-selection width.  Codes serialise as
``"b,c,d;b,c,d;..."``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

Slot = Tuple[int, int, int]

DEFAULT_LAYERS = 18

_VARIANTS = {
    "space1": ((2,), (64, 96, 128), (32, 64)),
    "space2": ((2, 3), (64, 128, 192), (32,)),
    "space3": ((2, 3), (128, 192), (32, 64)),
    "full": ((2, 3), (64, 96, 128, 192), (32, 64)),
}


@dataclass(frozen=True)
class SearchSpace:
    """Per-layer option sets, identical for every layer."""

    num_layers: int = DEFAULT_LAYERS
    branch_options: Tuple[int, ...] = (2, 3)
    cdim_options: Tuple[int, ...] = (64, 96, 128, 192)
    sdim_options: Tuple[int, ...] = (32, 64)
    name: str = "custom"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        for attr in ("branch_options", "cdim_options", "sdim_options"):
            opts = getattr(self, attr)
            if not opts:
                raise ValueError(f"{attr} is empty")
            if any(int(o) <= 0 for o in opts):
                raise ValueError(f"{attr} must be positive: {opts}")
            object.__setattr__(self, attr, tuple(sorted(set(int(o) for o in opts))))
        if max(self.branch_options) > 3:
            raise ValueError("at most 3 branches are supported (dilations 1, 3, 5)")

    @property
    def options(self) -> Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]:
        return self.branch_options, self.cdim_options, self.sdim_options

    @property
    def slot_choices(self) -> List[Slot]:
        """All per-slot candidates in lexicographic order."""
        return list(itertools.product(*self.options))

    @property
    def candidates_per_slot(self) -> int:
        return len(self.branch_options) * len(self.cdim_options) * len(self.sdim_options)

    @property
    def size(self) -> int:
        """Total number of architectures (exact integer)."""
        return self.candidates_per_slot ** self.num_layers

    @property
    def max_slot(self) -> Slot:
        return max(self.branch_options), max(self.cdim_options), max(self.sdim_options)


def make_space(variant: str, num_layers: int = DEFAULT_LAYERS) -> SearchSpace:
    """One of ``space1``, ``space2``, ``space3`` or ``full``."""
    try:
        b, c, d = _VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown search-space variant {variant!r}; "
                         f"expected one of {sorted(_VARIANTS)}") from None
    return SearchSpace(num_layers, b, c, d, name=variant)


@dataclass(frozen=True)
class ArchCode:
    slots: Tuple[Slot, ...]

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(tuple(int(v) for v in s) for s in self.slots))
        if any(len(s) != 3 for s in self.slots):
            raise ValueError("every slot must be a (b, c, d) triple")

    def __len__(self) -> int:
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, i) -> Slot:
        return self.slots[i]

    def __str__(self) -> str:
        return serialize(self)

    @property
    def branches(self) -> List[int]:
        return [s[0] for s in self.slots]

    @property
    def cdims(self) -> List[int]:
        return [s[1] for s in self.slots]

    @property
    def sdims(self) -> List[int]:
        return [s[2] for s in self.slots]

    def as_array(self) -> np.ndarray:
        """``(L, 3)`` integer array."""
        return np.array(self.slots, dtype=np.int64).reshape(len(self.slots), 3)


def serialize(arch: ArchCode) -> str:
    return ";".join(f"{b},{c},{d}" for b, c, d in arch.slots)


def parse(text: str) -> ArchCode:
    text = text.strip()
    if not text:
        raise ValueError("empty architecture string")
    slots = []
    for i, part in enumerate(text.split(";")):
        fields = part.split(",")
        if len(fields) != 3:
            raise ValueError(f"slot {i} {part!r} is not 'b,c,d'")
        try:
            slots.append(tuple(int(f) for f in fields))
        except ValueError:
            raise ValueError(f"slot {i} {part!r} has a non-integer field") from None
    return ArchCode(tuple(slots))


def validate(arch: ArchCode, space: SearchSpace) -> List[str]:
    """Violations of ``arch`` against ``space``; an empty list means valid."""
    problems = []
    if len(arch) != space.num_layers:
        problems.append(f"length {len(arch)} != num_layers {space.num_layers}")
    for i, (b, c, d) in enumerate(arch.slots):
        if b not in space.branch_options:
            problems.append(f"slot {i}: b={b} not in {space.branch_options}")
        if c not in space.cdim_options:
            problems.append(f"slot {i}: c={c} not in {space.cdim_options}")
        if d not in space.sdim_options:
            problems.append(f"slot {i}: d={d} not in {space.sdim_options}")
    return problems


def check(arch: ArchCode, space: SearchSpace) -> None:
    problems = validate(arch, space)
    if problems:
        raise ValueError("invalid architecture: " + "; ".join(problems))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_uniform(space: SearchSpace, rng_seed=None) -> ArchCode:
    """Each slot's ``b``, ``c`` and ``d`` drawn independently and uniformly."""
    rng = _rng(rng_seed)
    idx = [rng.integers(0, len(opts), size=space.num_layers) for opts in space.options]
    return ArchCode(tuple(
        (space.branch_options[i], space.cdim_options[j], space.sdim_options[k])
        for i, j, k in zip(*idx)))


def sample_many(space: SearchSpace, n: int, rng_seed=None) -> List[ArchCode]:
    rng = _rng(rng_seed)
    return [sample_uniform(space, rng) for _ in range(n)]


def mutate(arch: ArchCode, per_slot_rate: float, rng_seed, space: SearchSpace) -> ArchCode:
    """Resample each slot with probability ``per_slot_rate``.

    A selected slot is redrawn uniformly among the *other* candidates of the
    slot, so every selected slot actually changes (unless the slot has a
    single candidate).
    """
    if not 0.0 <= per_slot_rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {per_slot_rate}")
    rng = _rng(rng_seed)
    choices = space.slot_choices
    selected = rng.random(len(arch)) < per_slot_rate
    slots = list(arch.slots)
    for i in np.flatnonzero(selected):
        others = [s for s in choices if s != slots[i]]
        if others:
            slots[i] = others[rng.integers(len(others))]
    return ArchCode(tuple(slots))


def hamming_distance(a1: ArchCode, a2: ArchCode) -> float:
    """Fraction of differing components among the ``3 * L`` entries."""
    if len(a1) != len(a2):
        raise ValueError(f"length mismatch: {len(a1)} vs {len(a2)}")
    x, y = a1.as_array(), a2.as_array()
    return float(np.mean(x != y))


class CodeEncoder:
    """One-hot encoding of codes so that match counts become a matrix product.

    ``hamming_matrix(A, B)[i, j] == hamming_distance(A[i], B[j])``.
    """

    def __init__(self, space: SearchSpace):
        self.space = space
        self._lookup = [{v: k for k, v in enumerate(opts)} for opts in space.options]
        self._offsets = np.cumsum([0] + [len(o) for o in space.options])[:-1]
        self.width = space.num_layers * sum(len(o) for o in space.options)

    def encode(self, archs: Sequence[ArchCode]) -> np.ndarray:
        n, L = len(archs), self.space.num_layers
        per_slot = self.width // L
        X = np.zeros((n, L, per_slot), dtype=np.float64)
        for r, arch in enumerate(archs):
            for l, slot in enumerate(arch.slots):
                for comp, v in enumerate(slot):
                    X[r, l, self._offsets[comp] + self._lookup[comp][v]] = 1.0
        return X.reshape(n, self.width)

    def hamming_matrix(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        matches = A @ B.T
        return 1.0 - matches / (3.0 * self.space.num_layers)


# Layer-by-layer transcription of the searched networks; SpeechNAS-3 has b=2
# throughout, SpeechNAS-4 has d=32 throughout.
_PRESET_ROWS = {
    "speechnas3": [(2, c, d) for c, d in [
        (96, 64), (128, 32), (96, 32), (96, 32), (96, 32), (64, 64), (64, 64), (96, 64), (64, 64),
        (64, 32), (64, 32), (96, 64), (96, 64), (96, 32), (128, 32), (128, 32), (96, 64), (96, 64)]],
    "speechnas4": [(b, c, 32) for b, c in [
        (3, 128), (3, 64), (3, 128), (3, 192), (2, 192), (2, 64), (3, 64), (2, 64), (3, 64),
        (3, 64), (3, 128), (3, 192), (3, 64), (2, 192), (2, 128), (3, 128), (2, 128), (3, 192)]],
    "speechnas5": [
        (3, 128, 64), (3, 192, 32), (3, 192, 64), (3, 192, 64), (2, 192, 32), (2, 192, 64),
        (3, 192, 32), (3, 128, 32), (3, 192, 64), (2, 128, 64), (3, 128, 64), (2, 192, 64),
        (2, 192, 32), (2, 128, 64), (2, 192, 32), (2, 192, 64), (3, 192, 32), (2, 192, 64)],
}

PRESET_SPACES = {"speechnas3": "space1", "speechnas4": "space2", "speechnas5": "space3"}


def preset(name: str) -> ArchCode:
    try:
        return ArchCode(tuple(_PRESET_ROWS[name]))
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(_PRESET_ROWS)}") from None


def resolve(text: str) -> ArchCode:
    """A preset name or a serialised code."""
    return preset(text) if text in _PRESET_ROWS else parse(text)


def space_for_preset(name: str) -> Optional[SearchSpace]:
    variant = PRESET_SPACES.get(name)
    return None if variant is None else make_space(variant)
