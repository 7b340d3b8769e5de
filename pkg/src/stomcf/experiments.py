"""Monte Carlo ensembles and the reference numerical studies.

Four studies sit on top of the ensemble engine: the strong time-
discretization rate table (coarse solves coupled to one fine Brownian path
per sample), the regularization-parameter scaling of the gap to a
small-delta reference, the noise-intensity thresholding scan for colored
and truncated white noise, and the dissipation of the energy
J(t) = 0.5 E[|u_x|^2].

Samples are independent work items: sample s always draws from the stream
keyed by (master seed, s), chunks of samples may run on a thread pool, and
results are merged in sample order, so output is identical for any thread
count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .fem import FemSpace, FeFunction, l2_project
from .noise import FieldIncrement, NoiseModel, sample_rng
from .stepper import BatchResult, SolverConfig, run_batch, step

__all__ = [
    "InitialProfile",
    "EnsembleStats",
    "RateTable",
    "DeltaScalingTable",
    "ThresholdCase",
    "EnergySeries",
    "run_ensemble",
    "run_ensemble_states",
    "convergence_study",
    "delta_scaling_study",
    "threshold_study",
    "energy_study",
    "classify_growth",
]

# Growth-regime thresholds on the final/initial H1 energy ratio.
DECAY_RATIO = 0.5
RAPID_RATIO = 1e2


@dataclass(frozen=True)
class InitialProfile:
    """Initial graph: sine arch, piecewise-linear zigzag, or |0.5-x|^kappa."""

    kind: str
    kappa: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sine", "zigzag", "frac_power"):
            raise ValueError(f"unknown profile {self.kind!r}")
        if self.kind == "frac_power" and not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "sine":
            return np.sin(np.pi * x)
        if self.kind == "zigzag":
            return np.select(
                [x <= 0.25, x <= 0.5, x <= 0.75],
                [10.0 * x, 5.0 - 10.0 * x, 10.0 * x - 5.0],
                default=10.0 - 10.0 * x)
        return np.abs(0.5 - x) ** self.kappa

    @staticmethod
    def sine() -> "InitialProfile":
        return InitialProfile("sine")

    @staticmethod
    def zigzag() -> "InitialProfile":
        return InitialProfile("zigzag")

    @staticmethod
    def frac_power(kappa: float = 0.1) -> "InitialProfile":
        return InitialProfile("frac_power", kappa)


@dataclass
class EnsembleStats:
    """Per-time-point means and standard errors of ensemble functionals."""

    num_samples: int
    times: np.ndarray
    means: dict
    ses: dict
    blowup_count: int


def _mean_se(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard errors ignoring NaN (blown-up) entries."""
    finite = np.isfinite(arr)
    cnt = finite.sum(axis=0)
    safe = np.where(finite, arr, 0.0)
    mean = np.divide(safe.sum(axis=0), cnt, out=np.full(arr.shape[1], np.nan),
                     where=cnt > 0)
    dev = np.where(finite, arr - mean, 0.0)
    var = np.divide((dev * dev).sum(axis=0), np.maximum(cnt - 1, 1),
                    out=np.zeros(arr.shape[1]), where=cnt > 1)
    se = np.sqrt(np.divide(var, cnt, out=np.zeros(arr.shape[1]), where=cnt > 0))
    return mean, se


def _scalar_increments(cfg: SolverConfig, indices: np.ndarray) -> np.ndarray:
    n = cfg.num_steps
    out = np.empty((len(indices), n))
    sd = np.sqrt(cfg.tau)
    for row, s in enumerate(indices):
        out[row] = sample_rng(cfg.seed, int(s)).normal(0.0, sd, n)
    return out


def _field_increments(cfg: SolverConfig, indices: np.ndarray) -> np.ndarray:
    n = cfg.num_steps
    out = np.empty((len(indices), n, cfg.noise.num_modes))
    sd = np.sqrt(cfg.tau)
    for row, s in enumerate(indices):
        out[row] = sample_rng(cfg.seed, int(s)).normal(0.0, sd, (n, cfg.noise.num_modes))
    return out


def _run_batch_generic(cfg: SolverConfig, space: FemSpace, u0: np.ndarray,
                       increments: np.ndarray, record_steps=(),
                       record_norms: bool = True) -> BatchResult:
    """Sample-by-sample fallback with the generic assembly (any degree)."""
    nb = u0.shape[0]
    n_steps = cfg.num_steps
    record_steps = set(int(s) for s in record_steps)
    times = np.arange(n_steps + 1) * cfg.tau
    l2_sq = np.full((nb, n_steps + 1), np.nan)
    h1_sq = np.full((nb, n_steps + 1), np.nan)
    blow = np.full(nb, -1, dtype=int)
    snapshots = {s: np.full((nb, space.dof_count), np.nan) for s in record_steps}
    amps = cfg.noise.amplitude_array() if cfg.noise.is_field else None
    for b in range(nb):
        u = FeFunction(space, u0[b].copy())
        l2_sq[b, 0] = space.mass.quadform(u.coeffs)
        h1_sq[b, 0] = space.stiffness.quadform(u.coeffs)
        if 0 in record_steps:
            snapshots[0][b] = u.coeffs
        for nstep in range(n_steps):
            if cfg.noise.is_field:
                dw = FieldIncrement(amps, increments[b, nstep])
            else:
                dw = increments[b, nstep]
            u, rep = step(cfg, space, u, dw)
            if rep.blowup:
                blow[b] = nstep + 1
                break
            l2_sq[b, nstep + 1] = space.mass.quadform(u.coeffs)
            h1_sq[b, nstep + 1] = space.stiffness.quadform(u.coeffs)
            if nstep + 1 in record_steps:
                snapshots[nstep + 1][b] = u.coeffs
    if not record_norms:
        l2_sq[:] = np.nan
        h1_sq[:] = np.nan
    return BatchResult(times, l2_sq, h1_sq, blow, snapshots)


def _merge_results(parts: list[BatchResult]) -> BatchResult:
    if len(parts) == 1:
        return parts[0]
    times = parts[0].times
    l2 = np.concatenate([p.l2_sq for p in parts], axis=0)
    h1 = np.concatenate([p.h1_sq for p in parts], axis=0)
    blow = np.concatenate([p.blow_step for p in parts], axis=0)
    snaps = {}
    for s in parts[0].snapshots:
        snaps[s] = np.concatenate([p.snapshots[s] for p in parts], axis=0)
    return BatchResult(times, l2, h1, blow, snaps)


def run_ensemble_states(cfg: SolverConfig, profile, num_samples: int,
                        threads: int = 1, record_steps=(),
                        record_norms: bool = True,
                        chunk_size: int | None = None) -> BatchResult:
    """Run ``num_samples`` independent trajectories and keep raw arrays.

    The initial state is the L2 projection of ``profile``; sample s uses
    the noise stream keyed by (cfg.seed, s).  Per-sample results do not
    depend on the chunking, so any ``threads`` value yields identical
    output.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    space = cfg.build_space()
    u0 = l2_project(space, profile).coeffs
    n_chunks = max(1, min(threads, num_samples))
    if chunk_size is not None:
        n_chunks = max(n_chunks, math.ceil(num_samples / chunk_size))
    chunks = np.array_split(np.arange(num_samples), n_chunks)
    engine = run_batch if cfg.degree == 1 and space.dof_count >= 4 else _run_batch_generic

    def work(idx: np.ndarray) -> BatchResult:
        if cfg.noise.is_field:
            inc = _field_increments(cfg, idx)
        else:
            inc = _scalar_increments(cfg, idx)
        u0b = np.tile(u0, (len(idx), 1))
        return engine(cfg, space, u0b, inc, record_steps, record_norms)

    if threads <= 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    return _merge_results(parts)


def run_ensemble(cfg: SolverConfig, profile, num_samples: int,
                 threads: int = 1) -> EnsembleStats:
    """Ensemble means and standard errors of |u|^2 and |u_x|^2 per step."""
    res = run_ensemble_states(cfg, profile, num_samples, threads)
    m2, s2 = _mean_se(res.l2_sq)
    mg, sg = _mean_se(res.h1_sq)
    return EnsembleStats(
        num_samples, res.times,
        {"l2_sq": m2, "h1_sq": mg}, {"l2_sq": s2, "h1_sq": sg},
        int((res.blow_step >= 0).sum()))


# ---------------------------------------------------------------------------
# Time-discretization rate study
# ---------------------------------------------------------------------------


@dataclass
class RateTable:
    """Strong errors against the fine-step reference, per time step size."""

    tau_values: np.ndarray
    errors: np.ndarray
    orders: np.ndarray
    errors_se: np.ndarray
    num_samples: int

    def __post_init__(self):
        r = self.tau_values[1:] / self.tau_values[:-1]
        if np.any(np.abs(r - 2.0) > 1e-9):
            raise ValueError("tau_values must increase by factors of 2")


def convergence_study(base_cfg: SolverConfig, tau_ref: float, tau_values,
                      num_samples: int, profile, threads: int = 1) -> RateTable:
    """Coupled strong-error measurement of the time discretization.

    Every sample draws one Brownian path at the reference step ``tau_ref``;
    the reference solution uses it directly and each coarse solution uses
    its exact block sums, so all levels see the same cumulative noise.  The
    per-sample error at step size tau is the maximum over that level's grid
    points of the L2 distance to the reference, and the table reports its
    ensemble mean together with the dyadic convergence orders.
    """
    if base_cfg.noise.is_field:
        raise ValueError("the coupled rate study is defined for scalar noise")
    taus = np.sort(np.asarray(tau_values, dtype=float))
    factors = []
    for t in taus:
        k = round(t / tau_ref)
        if k < 1 or abs(t / tau_ref - k) > 1e-9 * k:
            raise ValueError(f"tau={t} is not an integer multiple of tau_ref={tau_ref}")
        factors.append(k)
        replace(base_cfg, tau=t)  # validates that tau divides T
    ref_cfg = replace(base_cfg, tau=tau_ref)
    space = ref_cfg.build_space()
    u0 = l2_project(space, profile).coeffs
    n_fine = ref_cfg.num_steps
    g = math.gcd(*factors) if len(factors) > 1 else factors[0]
    ref_steps = range(0, n_fine + 1, g)
    engine = run_batch if base_cfg.degree == 1 and space.dof_count >= 4 else _run_batch_generic
    mass = space.mass

    def work(idx: np.ndarray) -> np.ndarray:
        fine = _scalar_increments(ref_cfg, idx)
        u0b = np.tile(u0, (len(idx), 1))
        ref = engine(ref_cfg, space, u0b, fine, ref_steps, record_norms=False)
        errs = np.empty((len(idx), len(taus)))
        for j, (tau, k) in enumerate(zip(taus, factors)):
            cfg = replace(base_cfg, tau=tau)
            coarse_inc = fine.reshape(len(idx), -1, k).sum(axis=2)
            nc = cfg.num_steps
            out = engine(cfg, space, u0b, coarse_inc, range(nc + 1), record_norms=False)
            worst = np.zeros(len(idx))
            for n in range(1, nc + 1):
                diff = ref.snapshots[n * k] - out.snapshots[n]
                worst = np.maximum(worst, mass.quadform(diff))
            errs[:, j] = np.sqrt(worst)
        return errs

    chunks = np.array_split(np.arange(num_samples), max(1, min(threads, num_samples)))
    if threads <= 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    errs = np.concatenate(parts, axis=0)
    mean = errs.mean(axis=0)
    se = errs.std(axis=0, ddof=1) / np.sqrt(num_samples) if num_samples > 1 else np.zeros(len(taus))
    orders = np.log2(mean[1:] / mean[:-1])
    return RateTable(taus, mean, orders, se, num_samples)


# ---------------------------------------------------------------------------
# Regularization-parameter scaling study
# ---------------------------------------------------------------------------


@dataclass
class DeltaScalingTable:
    """Gap to the small-delta reference solution, per delta."""

    delta_values: np.ndarray
    gaps: np.ndarray          # E[sup_n |u_delta - u_floor|^2]
    gaps_se: np.ndarray
    slope: float              # d log(gap) / d log(delta)
    delta_floor: float
    num_samples: int


def delta_scaling_study(base_cfg: SolverConfig, delta_values, delta_floor: float,
                        num_samples: int, profile, threads: int = 1) -> DeltaScalingTable:
    """Pathwise-coupled gap between delta-regularized runs and a floor run.

    All runs of one sample share the Brownian path and initial state; only
    the regularization parameter changes.  Reports the ensemble mean of
    sup over time steps of the squared L2 gap and the log-log slope of
    that mean against delta.
    """
    deltas = np.sort(np.asarray(delta_values, dtype=float))[::-1]
    if delta_floor > deltas.min():
        raise ValueError("delta_floor must not exceed any tested delta")
    space = base_cfg.build_space()
    u0 = l2_project(space, profile).coeffs
    n_steps = base_cfg.num_steps
    engine = run_batch if base_cfg.degree == 1 and space.dof_count >= 4 else _run_batch_generic
    mass = space.mass
    all_steps = range(n_steps + 1)

    def work(idx: np.ndarray) -> np.ndarray:
        floor_cfg = replace(base_cfg, delta=delta_floor)
        if base_cfg.noise.is_field:
            inc = _field_increments(base_cfg, idx)
        else:
            inc = _scalar_increments(base_cfg, idx)
        u0b = np.tile(u0, (len(idx), 1))
        ref = engine(floor_cfg, space, u0b, inc, all_steps, record_norms=False)
        out = np.empty((len(idx), len(deltas)))
        for j, d in enumerate(deltas):
            run = engine(replace(base_cfg, delta=d), space, u0b, inc, all_steps,
                         record_norms=False)
            worst = np.zeros(len(idx))
            for n in range(1, n_steps + 1):
                diff = run.snapshots[n] - ref.snapshots[n]
                worst = np.maximum(worst, mass.quadform(diff))
            out[:, j] = worst
        return out

    n_chunks = max(1, min(threads, num_samples), math.ceil(num_samples / 128))
    chunks = np.array_split(np.arange(num_samples), n_chunks)
    if threads <= 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    sups = np.concatenate(parts, axis=0)
    gaps = sups.mean(axis=0)
    se = sups.std(axis=0, ddof=1) / np.sqrt(num_samples) if num_samples > 1 else np.zeros(len(deltas))
    # a delta equal to the floor reproduces the reference exactly (gap 0);
    # only strictly positive gaps enter the log-log fit
    pos = gaps > 0
    slope = float(np.polyfit(np.log(deltas[pos]), np.log(gaps[pos]), 1)[0]) if pos.sum() > 1 else np.nan
    return DeltaScalingTable(deltas, gaps, se, slope, delta_floor, num_samples)


# ---------------------------------------------------------------------------
# Noise thresholding and energy dissipation
# ---------------------------------------------------------------------------


def classify_growth(energy_ratio: float, blowup_count: int = 0) -> str:
    """Growth regime from the final/initial H1 energy ratio."""
    if blowup_count > 0 or not np.isfinite(energy_ratio) or energy_ratio > RAPID_RATIO:
        return "rapid-growth"
    if energy_ratio < DECAY_RATIO:
        return "decay"
    return "bounded"


@dataclass
class ThresholdCase:
    """One (noise model, epsilon) cell of the thresholding scan."""

    noise_label: str
    epsilon: float
    classification: str
    energy_ratio: float
    initial_energy: float
    final_energy: float
    blowup_count: int
    num_samples: int
    times: np.ndarray
    single_h1_sq: np.ndarray
    mean_h1_sq: np.ndarray
    se_h1_sq: np.ndarray


def _noise_label(model: NoiseModel) -> str:
    if model.kind == "scalar":
        return "scalar"
    if model.kind == "white":
        return f"white(J={model.num_modes})"
    return f"q_wiener(J={model.num_modes},decay={model.amplitude_decay})"


def threshold_study(base_cfg: SolverConfig, profile, noise_models,
                    epsilon_values, num_samples: int,
                    threads: int = 1) -> list[ThresholdCase]:
    """Scan noise intensities for each driver and classify the growth regime.

    For every (model, epsilon) pair the ensemble of gradient energies
    |u_x(t)|^2 is recorded; the regime is classified from the ratio of the
    ensemble-mean final to initial energy, with any blow-up counting as
    rapid growth.  The first sample's trajectory is kept alongside the
    mean, mirroring the single-path/expectation comparison plots.
    """
    cases = []
    for model in noise_models:
        for eps in epsilon_values:
            cfg = replace(base_cfg, epsilon=float(eps), noise=model)
            res = run_ensemble_states(cfg, profile, num_samples, threads)
            mean, se = _mean_se(res.h1_sq)
            blow = int((res.blow_step >= 0).sum())
            initial = float(mean[0])
            final = float(mean[-1])
            ratio = final / initial if initial > 0 else np.inf
            cases.append(ThresholdCase(
                _noise_label(model), float(eps), classify_growth(ratio, blow),
                ratio, initial, final, blow, num_samples,
                res.times, res.h1_sq[0], mean, se))
    return cases


@dataclass
class EnergySeries:
    """Estimated energy J(t) = 0.5 E[|u_x(t)|^2] with standard errors."""

    times: np.ndarray
    j_mean: np.ndarray
    j_se: np.ndarray
    num_samples: int
    blowup_count: int


def energy_study(cfg: SolverConfig, profile, num_samples: int,
                 threads: int = 1) -> EnergySeries:
    """Time series of the ensemble energy for one configuration."""
    res = run_ensemble_states(cfg, profile, num_samples, threads)
    mean, se = _mean_se(res.h1_sq)
    return EnergySeries(res.times, 0.5 * mean, 0.5 * se, num_samples,
                        int((res.blow_step >= 0).sum()))
