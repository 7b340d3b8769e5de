"""Seeded Brownian drivers: scalar Wiener paths and sine-mode noise fields.

Scalar paths are stored at their generation resolution and coarsened by
exact block sums of the stored increments, so every coarser time grid sees
bit-identical cumulative Brownian motion.  Field noise is a truncated
expansion over the sine eigenfunctions sqrt(2) sin(j pi x) with per-mode
amplitudes, covering both trace-class covariances (amplitudes decaying in
j) and truncated space-time white noise (all amplitudes one).

All randomness flows through counter-based Philox generators keyed by
(master seed, sample index), so ensembles are reproducible independent of
execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScalarPath",
    "NoiseModel",
    "FieldIncrement",
    "FieldPath",
    "sample_rng",
    "generate_scalar_path",
    "coarsen",
    "generate_field_path",
    "dump_path_csv",
]


def sample_rng(master_seed: int, sample_index: int = 0) -> np.random.Generator:
    """Independent generator for one Monte Carlo sample.

    Streams for distinct sample indices are disjoint and do not depend on
    the order in which they are created.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=(sample_index,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ScalarPath:
    """Brownian increments on a uniform grid, coarsenable without resampling.

    ``root_increments`` are the increments at the finest (generation)
    resolution; ``factor`` says how many fine steps one increment of this
    path aggregates.  Aggregation is by block sums of the root array, so
    coarsening commutes exactly: coarsen(coarsen(p, a), b) and
    coarsen(p, a*b) produce bit-identical increments.
    """

    tau_fine: float
    root_increments: np.ndarray
    seed: int | None = None
    factor: int = 1
    _increments: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def tau(self) -> float:
        """Time step of this path's grid."""
        return self.tau_fine * self.factor

    @property
    def num_steps(self) -> int:
        return self.root_increments.size // self.factor

    @property
    def t_final(self) -> float:
        return self.root_increments.size * self.tau_fine

    @property
    def increments(self) -> np.ndarray:
        if self._increments is None:
            if self.factor == 1:
                self._increments = self.root_increments
            else:
                self._increments = self.root_increments.reshape(-1, self.factor).sum(axis=1)
        return self._increments


def generate_scalar_path(seed, num_fine_steps: int, tau_fine: float) -> ScalarPath:
    """Fresh scalar Wiener path with i.i.d. N(0, tau_fine) increments.

    ``seed`` is an integer master seed or a numpy Generator (the latter is
    what the ensemble driver passes for per-sample streams).
    """
    if num_fine_steps < 1:
        raise ValueError("num_fine_steps must be >= 1")
    if tau_fine <= 0:
        raise ValueError("tau_fine must be positive")
    if isinstance(seed, np.random.Generator):
        rng, seed_val = seed, None
    else:
        rng, seed_val = sample_rng(int(seed)), int(seed)
    inc = rng.normal(0.0, np.sqrt(tau_fine), size=num_fine_steps)
    return ScalarPath(tau_fine, inc, seed=seed_val)


def coarsen(path: ScalarPath, factor: int) -> ScalarPath:
    """Aggregate ``factor`` consecutive increments into one; no resampling."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if path.num_steps % factor != 0:
        raise ValueError(f"factor {factor} does not divide {path.num_steps} steps")
    return ScalarPath(path.tau_fine, path.root_increments, seed=path.seed,
                      factor=path.factor * factor)


@dataclass(frozen=True)
class NoiseModel:
    """Which Brownian driver the scheme uses.

    ``kind`` is "scalar" (one Wiener process multiplying the whole load),
    "q_wiener" (sine-mode expansion with trace-class amplitudes) or "white"
    (all mode amplitudes one, truncated at the mesh resolution).  For field
    models ``amplitudes`` holds the per-mode weights q_j^(1/2), j = 1..J.
    """

    kind: str
    num_modes: int = 0
    amplitudes: tuple = ()
    amplitude_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("scalar", "q_wiener", "white"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "scalar":
            if self.num_modes < 1:
                raise ValueError("field noise needs num_modes >= 1")
            if len(self.amplitudes) != self.num_modes:
                raise ValueError("amplitudes length must equal num_modes")
            if any(a < 0 for a in self.amplitudes):
                raise ValueError("amplitudes must be nonnegative")

    @staticmethod
    def scalar() -> "NoiseModel":
        return NoiseModel("scalar")

    @staticmethod
    def q_wiener(num_modes: int, decay: float) -> "NoiseModel":
        """Amplitudes q_j^(1/2) = j^-decay for j = 1..num_modes."""
        amps = tuple(float(j) ** -decay for j in range(1, num_modes + 1))
        return NoiseModel("q_wiener", num_modes, amps, decay)

    @staticmethod
    def white(num_modes: int) -> "NoiseModel":
        return NoiseModel("white", num_modes, (1.0,) * num_modes, 0.0)

    @property
    def is_field(self) -> bool:
        return self.kind != "scalar"

    def amplitude_array(self) -> np.ndarray:
        return np.asarray(self.amplitudes, dtype=float)


@dataclass
class FieldIncrement:
    """One time increment of the sine-expanded noise field.

    ``mode_increments`` are the Delta beta_j ~ N(0, tau); evaluation sums
    amplitudes[j-1] * Delta beta_j * sqrt(2) sin(j pi x) over j = 1..J, so
    the field vanishes at x = 0 and x = 1 exactly.
    """

    amplitudes: np.ndarray
    mode_increments: np.ndarray

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        j = np.arange(1, self.amplitudes.size + 1)
        modes = np.sqrt(2.0) * np.sin(np.multiply.outer(x, j * np.pi))
        return modes @ (self.amplitudes * self.mode_increments)

    __call__ = evaluate


@dataclass
class FieldPath:
    """All mode increments of a field-noise trajectory, shape (steps, modes)."""

    tau: float
    amplitudes: np.ndarray
    mode_increments: np.ndarray

    @property
    def num_steps(self) -> int:
        return self.mode_increments.shape[0]

    def step_increment(self, n: int) -> FieldIncrement:
        return FieldIncrement(self.amplitudes, self.mode_increments[n])


def generate_field_path(model: NoiseModel, rng: np.random.Generator,
                        num_steps: int, tau: float) -> FieldPath:
    """Independent N(0, tau) increments for every mode and time step."""
    if not model.is_field:
        raise ValueError("scalar noise has no mode increments")
    inc = rng.normal(0.0, np.sqrt(tau), size=(num_steps, model.num_modes))
    return FieldPath(tau, model.amplitude_array(), inc)


def dump_path_csv(path: ScalarPath, fileobj) -> None:
    """Write the increments with a provenance header for cross-checking."""
    fileobj.write(f"# seed={path.seed} tau={path.tau!r} count={path.num_steps}\n")
    fileobj.write("increment\n")
    for v in path.increments:
        fileobj.write(f"{v!r}\n")
