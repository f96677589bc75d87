from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from ..exceptions import DimensionError, NonFiniteStateError


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PhaseState:
    """Momentum/position pair (p, q) of a d-dimensional system. Immutable."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = _frozen(self.p)
        q = _frozen(self.q)
        if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape or p.size < 1:
            raise DimensionError(f"p and q must be 1-d of equal length >= 1, got {p.shape} and {q.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise NonFiniteStateError("phase state has non-finite entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def d(self) -> int:
        return self.p.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_vector(cls, u: Sequence[float]) -> "PhaseState":
        u = np.asarray(u, dtype=np.float64)
        if u.ndim != 1 or u.size % 2 or u.size == 0:
            raise DimensionError(f"flat state must have even positive length, got {u.shape}")
        d = u.size // 2
        return cls(u[:d], u[d:])

    @classmethod
    def zeros(cls, d: int) -> "PhaseState":
        return cls(np.zeros(d), np.zeros(d))

    def flipped(self) -> "PhaseState":
        """Same positions, negated momenta (time reversal)."""
        return PhaseState(-self.p, self.q)

    def to_row(self) -> List[str]:
        return [format_real(x) for x in self.as_vector()]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhaseState):
            return NotImplemented
        return np.array_equal(self.p, other.p) and np.array_equal(self.q, other.q)

    def __repr__(self):
        return f"<PhaseState(d={self.d}, p={self.p.tolist()}, q={self.q.tolist()})>"


def format_real(x: float) -> str:
    """Decimal with 17 significant digits, enough to round-trip a double."""
    return f"{float(x):.17g}"


def check_same_dim(*states: PhaseState) -> int:
    dims = {s.d for s in states}
    if len(dims) != 1:
        raise DimensionError(f"state dimensions differ: {sorted(dims)}")
    return dims.pop()


def stack_states(states: Iterable[PhaseState]) -> np.ndarray:
    """Rows [p_1..p_d, q_1..q_d], one per state."""
    rows = [s.as_vector() for s in states]
    if not rows:
        return np.zeros((0, 0))
    return np.vstack(rows)


def is_finite_vector(u: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(u)))
