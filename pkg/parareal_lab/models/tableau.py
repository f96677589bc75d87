from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..exceptions import DimensionError
from .phase import PhaseState

LOG10_ZERO_SENTINEL = -16.0


@dataclass
class PararealTableau:
    """
    Grid of parareal iterates u_n^(k), rows k = 0..K, columns n = 0..N.
    Metric grids hold NaN where nothing was measured (no reference, or
    trajectory errors past the trust horizon).
    """

    N: int
    K: int
    mode: str = "plain"
    states: List[List[Optional[PhaseState]]] = field(default_factory=list)
    correctors: list = field(default_factory=list)
    traj_error: Optional[np.ndarray] = None
    energy_error: Optional[np.ndarray] = None
    n_trust: Optional[int] = None
    pinv_stats: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [[None] * (self.N + 1) for _ in range(self.K + 1)]
        if len(self.states) != self.K + 1 or any(len(r) != self.N + 1 for r in self.states):
            raise DimensionError(f"tableau must be {self.K + 1} x {self.N + 1}")

    def __getitem__(self, index):
        k, n = index
        return self.states[k][n]

    def __setitem__(self, index, value: PhaseState):
        k, n = index
        self.states[k][n] = value

    def row(self, k: int) -> List[PhaseState]:
        return list(self.states[k])

    @property
    def final_row(self) -> List[PhaseState]:
        return self.row(self.K)

    def log10_grid(self, which: str = "traj") -> np.ndarray:
        """log10 of a metric grid; exact zeros map to the -16 sentinel, unmeasured cells stay NaN."""
        grid = self.traj_error if which == "traj" else self.energy_error
        if grid is None:
            return np.full((self.K + 1, self.N + 1), np.nan)
        out = np.full(grid.shape, np.nan)
        measured = ~np.isnan(grid)
        zero = measured & (grid == 0.0)
        positive = measured & (grid > 0.0)
        out[zero] = LOG10_ZERO_SENTINEL
        out[positive] = np.log10(grid[positive])
        return out

    def __repr__(self):
        return f"<PararealTableau(mode={self.mode}, K={self.K}, N={self.N})>"
