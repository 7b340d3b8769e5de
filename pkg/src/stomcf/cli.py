"""Command-line front end: configs, presets, CSV emission, manifests.

Experiments are described by flat INI documents (sections and key=value
pairs); unknown sections or keys are hard errors so parameter typos cannot
silently change an experiment.  Every reference experiment ships as a
named preset.  A run writes its CSV tables plus a ``manifest.json``
holding the fully resolved config text, which is enough to reproduce every
number byte-for-byte (floats are printed with 17 significant digits, and
results do not depend on the thread count).
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .fem import l2_project
from .noise import NoiseModel, generate_field_path, generate_scalar_path, sample_rng
from .stepper import SolverConfig, run_trajectory
from .experiments import (
    InitialProfile,
    convergence_study,
    delta_scaling_study,
    energy_study,
    run_ensemble,
    threshold_study,
)

__all__ = ["ExperimentSpec", "ConfigError", "parse_config", "serialize_spec",
           "PRESETS", "run", "main"]

ENV_PREFIX = "STOMCF_"

KINDS = ("trajectory", "ensemble", "rate-table", "delta-scaling", "threshold", "energy")


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully validated description of one experiment run."""

    kind: str
    solver: SolverConfig
    profile: InitialProfile
    samples: int = 1
    threads: int = 1
    out_dir: str | None = None
    snapshot_stride: int | None = None
    tau_ref: float | None = None
    tau_values: tuple = ()
    delta_values: tuple = ()
    delta_floor: float | None = None
    epsilon_values: tuple = ()


def _parse_float_list(raw: str, where: str) -> tuple:
    try:
        vals = tuple(float(tok) for tok in raw.split())
    except ValueError as exc:
        raise ConfigError(f"{where}: expected space-separated numbers, got {raw!r}") from exc
    if not vals:
        raise ConfigError(f"{where}: empty list")
    return vals


# section -> key -> converter; keys absent here are rejected
_SCHEMA = {
    "experiment": {"kind": str, "samples": int, "seed": int, "threads": int},
    "solver": {"delta": float, "epsilon": float, "tau": float, "t_final": float,
               "num_intervals": int, "degree": int, "newton_tol": float,
               "newton_max_iter": int, "blowup_threshold": float},
    "noise": {"kind": str, "num_modes": int, "amplitude_decay": float},
    "profile": {"kind": str, "kappa": float},
    "rate_table": {"tau_ref": float, "tau_values": None},
    "delta_scaling": {"delta_values": None, "delta_floor": float},
    "threshold": {"epsilon_values": None},
    "output": {"dir": str, "snapshot_stride": int},
}

_REQUIRED = [("experiment", "kind"), ("experiment", "seed"),
             ("solver", "delta"), ("solver", "epsilon"), ("solver", "tau"),
             ("solver", "t_final"), ("solver", "num_intervals"),
             ("profile", "kind")]

# kind-specific sections (forbidden elsewhere) and their required keys
_KIND_SECTIONS = {
    "rate-table": ("rate_table", ("tau_ref", "tau_values")),
    "delta-scaling": ("delta_scaling", ("delta_values", "delta_floor")),
    "threshold": ("threshold", ("epsilon_values",)),
}


def parse_config(text: str) -> ExperimentSpec:
    """Parse and validate an INI experiment document.

    Raises :class:`ConfigError` identifying the offending line, key or
    constraint; an empty document reports every missing required field.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    missing = [f"{s}.{k}" for s, k in _REQUIRED
               if not parser.has_option(s, k)]
    if missing:
        raise ConfigError("missing required field(s): " + ", ".join(missing))

    def get(section, key, default=None):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        conv = _SCHEMA[section][key]
        if conv is None:
            return _parse_float_list(raw, f"{section}.{key}")
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {conv.__name__}") from exc

    kind = get("experiment", "kind")
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind must be one of {', '.join(KINDS)}; got {kind!r}")

    for owner, (section, keys) in _KIND_SECTIONS.items():
        if kind == owner:
            missing = [f"{section}.{k}" for k in keys if not parser.has_option(section, k)]
            if missing:
                raise ConfigError("missing required field(s): " + ", ".join(missing))
        elif parser.has_section(section):
            raise ConfigError(f"section [{section}] is only valid for kind={owner}")

    degree = get("solver", "degree", 1)
    num_intervals = get("solver", "num_intervals")
    noise_kind = get("noise", "kind", "scalar")
    if noise_kind == "scalar":
        for key in ("num_modes", "amplitude_decay"):
            if parser.has_option("noise", key):
                raise ConfigError(f"noise.{key} is not valid for scalar noise")
        noise = NoiseModel.scalar()
    elif noise_kind == "q_wiener":
        modes = get("noise", "num_modes")
        decay = get("noise", "amplitude_decay")
        if modes is None or decay is None:
            raise ConfigError("q_wiener noise needs noise.num_modes and noise.amplitude_decay")
        noise = NoiseModel.q_wiener(modes, decay)
    elif noise_kind == "white":
        if parser.has_option("noise", "amplitude_decay"):
            raise ConfigError("noise.amplitude_decay is not valid for white noise")
        modes = get("noise", "num_modes", degree * num_intervals)
        noise = NoiseModel.white(modes)
    else:
        raise ConfigError(f"noise.kind must be scalar, q_wiener or white; got {noise_kind!r}")

    profile_kind = get("profile", "kind")
    try:
        if profile_kind == "frac_power":
            profile = InitialProfile.frac_power(get("profile", "kappa", 0.1))
        else:
            if parser.has_option("profile", "kappa"):
                raise ConfigError("profile.kappa is only valid for frac_power")
            profile = InitialProfile(profile_kind)
    except ValueError as exc:
        raise ConfigError(f"profile: {exc}") from exc

    try:
        solver = SolverConfig(
            delta=get("solver", "delta"),
            epsilon=get("solver", "epsilon"),
            tau=get("solver", "tau"),
            t_final=get("solver", "t_final"),
            num_intervals=num_intervals,
            degree=degree,
            noise=noise,
            newton_tol=get("solver", "newton_tol", 1e-10),
            newton_max_iter=get("solver", "newton_max_iter", 50),
            blowup_threshold=get("solver", "blowup_threshold", 1e12),
            seed=get("experiment", "seed"),
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc

    samples = get("experiment", "samples", 1)
    threads = get("experiment", "threads", 1)
    if samples < 1 or threads < 1:
        raise ConfigError("experiment.samples and experiment.threads must be >= 1")

    return ExperimentSpec(
        kind=kind,
        solver=solver,
        profile=profile,
        samples=samples,
        threads=threads,
        out_dir=get("output", "dir"),
        snapshot_stride=get("output", "snapshot_stride"),
        tau_ref=get("rate_table", "tau_ref"),
        tau_values=get("rate_table", "tau_values", ()),
        delta_values=get("delta_scaling", "delta_values", ()),
        delta_floor=get("delta_scaling", "delta_floor"),
        epsilon_values=get("threshold", "epsilon_values", ()),
    )


def serialize_spec(spec: ExperimentSpec) -> str:
    """Render a spec back to config text; parse(serialize(s)) == s."""
    parser = configparser.ConfigParser(interpolation=None)
    f = repr
    parser["experiment"] = {"kind": spec.kind, "samples": str(spec.samples),
                            "seed": str(spec.solver.seed), "threads": str(spec.threads)}
    s = spec.solver
    parser["solver"] = {"delta": f(s.delta), "epsilon": f(s.epsilon), "tau": f(s.tau),
                        "t_final": f(s.t_final), "num_intervals": str(s.num_intervals),
                        "degree": str(s.degree), "newton_tol": f(s.newton_tol),
                        "newton_max_iter": str(s.newton_max_iter),
                        "blowup_threshold": f(s.blowup_threshold)}
    if s.noise.kind == "scalar":
        parser["noise"] = {"kind": "scalar"}
    elif s.noise.kind == "q_wiener":
        parser["noise"] = {"kind": "q_wiener", "num_modes": str(s.noise.num_modes),
                           "amplitude_decay": f(s.noise.amplitude_decay)}
    else:
        parser["noise"] = {"kind": "white", "num_modes": str(s.noise.num_modes)}
    parser["profile"] = {"kind": spec.profile.kind}
    if spec.profile.kind == "frac_power":
        parser["profile"]["kappa"] = f(spec.profile.kappa)
    if spec.kind == "rate-table":
        parser["rate_table"] = {"tau_ref": f(spec.tau_ref),
                                "tau_values": " ".join(f(v) for v in spec.tau_values)}
    if spec.kind == "delta-scaling":
        parser["delta_scaling"] = {"delta_values": " ".join(f(v) for v in spec.delta_values),
                                   "delta_floor": f(spec.delta_floor)}
    if spec.kind == "threshold":
        parser["threshold"] = {"epsilon_values": " ".join(f(v) for v in spec.epsilon_values)}
    out = {}
    if spec.out_dir is not None:
        out["dir"] = spec.out_dir
    if spec.snapshot_stride is not None:
        out["snapshot_stride"] = str(spec.snapshot_stride)
    if out:
        parser["output"] = out
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


_SQRT2 = repr(math.sqrt(2.0))

PRESETS = {
    # time-discretization rate verification
    "table1": f"""
[experiment]
kind = rate-table
samples = 500
seed = 31415
threads = 1
[solver]
delta = 1e-05
epsilon = 1.0
tau = 0.001
t_final = 0.1
num_intervals = 50
[profile]
kind = sine
[rate_table]
tau_ref = 1e-05
tau_values = 0.0005 0.001 0.002 0.004
""",
    # ensemble used by the discrete stability bound
    "stability": """
[experiment]
kind = ensemble
samples = 200
seed = 2718
threads = 1
[solver]
delta = 1e-05
epsilon = 1.0
tau = 0.001
t_final = 0.1
num_intervals = 50
[profile]
kind = sine
""",
    # energy dissipation of J(t)
    "energy": """
[experiment]
kind = energy
samples = 500
seed = 1618
threads = 1
[solver]
delta = 1e-05
epsilon = 1.0
tau = 0.001
t_final = 0.1
num_intervals = 50
[profile]
kind = sine
""",
    # regularization-parameter scaling
    "delta-scaling": """
[experiment]
kind = delta-scaling
samples = 200
seed = 995
threads = 1
[solver]
delta = 0.01
epsilon = 1.0
tau = 0.0001
t_final = 0.1
num_intervals = 50
[profile]
kind = sine
[delta_scaling]
delta_values = 0.01 0.005 0.0025
delta_floor = 1e-05
""",
    # colored-noise thresholding scan
    "threshold-colored": f"""
[experiment]
kind = threshold
samples = 100
seed = 4640
threads = 1
[solver]
delta = 1e-05
epsilon = 0.1
tau = 0.01
t_final = 0.5
num_intervals = 50
[noise]
kind = q_wiener
num_modes = 20
amplitude_decay = 0.6
[profile]
kind = frac_power
kappa = 0.1
[threshold]
epsilon_values = 0.1 0.5 {_SQRT2}
""",
    # colored noise with faster amplitude decay, more modes
    "threshold-colored-j50": f"""
[experiment]
kind = threshold
samples = 100
seed = 4641
threads = 1
[solver]
delta = 1e-05
epsilon = 0.1
tau = 0.01
t_final = 0.5
num_intervals = 50
[noise]
kind = q_wiener
num_modes = 50
amplitude_decay = 1.0
[profile]
kind = frac_power
kappa = 0.1
[threshold]
epsilon_values = 0.1 0.5 {_SQRT2}
""",
    # truncated space-time white noise
    "threshold-white": f"""
[experiment]
kind = threshold
samples = 100
seed = 4642
threads = 1
[solver]
delta = 1e-05
epsilon = 0.1
tau = 0.01
t_final = 0.5
num_intervals = 50
[noise]
kind = white
[profile]
kind = frac_power
kappa = 0.1
[threshold]
epsilon_values = 0.1 0.5 {_SQRT2}
""",
}

# single-sample surface-plot runs for both reference profiles
for _prof in ("sine", "zigzag"):
    for _tag, _eps in [("eps01", "0.1"), ("eps1", "1.0"),
                       ("eps-sqrt2", _SQRT2), ("eps5", "5.0")]:
        PRESETS[f"dynamics-{_prof}-{_tag}"] = f"""
[experiment]
kind = trajectory
seed = 271828
threads = 1
[solver]
delta = 1e-05
epsilon = {_eps}
tau = 1e-05
t_final = 0.1
num_intervals = 50
[profile]
kind = {_prof}
"""


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def run(spec: ExperimentSpec, out_dir: str) -> dict:
    """Execute the experiment, write CSVs and a manifest into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.perf_counter()
    stats: dict = {}
    cfg = spec.solver

    if spec.kind == "trajectory":
        space = cfg.build_space()
        u0 = l2_project(space, spec.profile)
        rng = sample_rng(cfg.seed, 0)
        if cfg.noise.is_field:
            path = generate_field_path(cfg.noise, rng, cfg.num_steps, cfg.tau)
        else:
            path = generate_scalar_path(rng, cfg.num_steps, cfg.tau)
        traj = run_trajectory(cfg, u0, path, spec.snapshot_stride)
        _write_csv(os.path.join(out_dir, "trajectory.csv"),
                   ["t", "l2_norm", "h1_seminorm"],
                   ([_fmt(t), _fmt(a), _fmt(b)] for t, a, b in
                    zip(traj.times, traj.l2_norms, traj.h1_seminorms)))
        xs = np.append(space.dof_coordinates, 1.0)
        rows = []
        for n in sorted(traj.snapshots):
            c = traj.snapshots[n]
            vals = np.append(c, c[0])
            t = traj.times[n]
            rows.extend([_fmt(t), _fmt(x), _fmt(v)] for x, v in zip(xs, vals))
        _write_csv(os.path.join(out_dir, "snapshots.csv"), ["t", "x", "u"], rows)
        stats["blowup_step"] = traj.blowup_step
        stats["max_newton_iterations"] = max((r.newton_iterations for r in traj.reports),
                                             default=0)

    elif spec.kind == "ensemble":
        st = run_ensemble(cfg, spec.profile, spec.samples, spec.threads)
        _write_csv(os.path.join(out_dir, "ensemble.csv"),
                   ["t", "mean_l2_sq", "se_l2_sq", "mean_h1_sq", "se_h1_sq"],
                   ([_fmt(t), _fmt(a), _fmt(b), _fmt(c), _fmt(d)] for t, a, b, c, d in
                    zip(st.times, st.means["l2_sq"], st.ses["l2_sq"],
                        st.means["h1_sq"], st.ses["h1_sq"])))
        stats["blowup_count"] = st.blowup_count

    elif spec.kind == "rate-table":
        rt = convergence_study(cfg, spec.tau_ref, spec.tau_values, spec.samples,
                               spec.profile, spec.threads)
        rows = []
        for i in range(len(rt.tau_values) - 1, -1, -1):  # descending tau
            order = _fmt(rt.orders[i]) if i < len(rt.orders) else ""
            rows.append([_fmt(rt.tau_values[i]), _fmt(rt.errors[i]),
                         _fmt(rt.errors_se[i]), order])
        _write_csv(os.path.join(out_dir, "rate_table.csv"),
                   ["tau", "error", "se", "order"], rows)
        stats["orders"] = [float(o) for o in rt.orders]

    elif spec.kind == "delta-scaling":
        ds = delta_scaling_study(cfg, spec.delta_values, spec.delta_floor,
                                 spec.samples, spec.profile, spec.threads)
        _write_csv(os.path.join(out_dir, "delta_scaling.csv"),
                   ["delta", "gap_mean_sq", "se"],
                   ([_fmt(d), _fmt(g), _fmt(e)] for d, g, e in
                    zip(ds.delta_values, ds.gaps, ds.gaps_se)))
        stats["slope"] = ds.slope

    elif spec.kind == "threshold":
        cases = threshold_study(cfg, spec.profile, [cfg.noise],
                                spec.epsilon_values, spec.samples, spec.threads)
        _write_csv(os.path.join(out_dir, "threshold.csv"),
                   ["epsilon", "noise", "classification", "initial_energy",
                    "final_energy", "energy_ratio", "blowup_count"],
                   ([_fmt(c.epsilon), c.noise_label, c.classification,
                     _fmt(c.initial_energy), _fmt(c.final_energy),
                     _fmt(c.energy_ratio), str(c.blowup_count)] for c in cases))
        rows = []
        for c in cases:
            rows.extend([_fmt(c.epsilon), _fmt(t), _fmt(s), _fmt(m), _fmt(e)]
                        for t, s, m, e in zip(c.times, c.single_h1_sq,
                                              c.mean_h1_sq, c.se_h1_sq))
        _write_csv(os.path.join(out_dir, "threshold_series.csv"),
                   ["epsilon", "t", "single_h1_sq", "mean_h1_sq", "se_h1_sq"], rows)
        stats["classifications"] = {f"{c.epsilon:g}": c.classification for c in cases}

    elif spec.kind == "energy":
        es = energy_study(cfg, spec.profile, spec.samples, spec.threads)
        _write_csv(os.path.join(out_dir, "energy.csv"), ["t", "j_mean", "j_se"],
                   ([_fmt(t), _fmt(j), _fmt(e)] for t, j, e in
                    zip(es.times, es.j_mean, es.j_se)))
        stats["blowup_count"] = es.blowup_count

    else:  # pragma: no cover - parse_config rejects unknown kinds
        raise ConfigError(f"unknown kind {spec.kind!r}")

    manifest = {
        "version": __version__,
        "kind": spec.kind,
        "master_seed": cfg.seed,
        "samples": spec.samples,
        "config": serialize_spec(spec),
        "stats": stats,
        "wall_time_s": time.perf_counter() - t_start,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    def pick(flag_value, env_key, conv):
        if flag_value is not None:
            return flag_value
        raw = os.environ.get(ENV_PREFIX + env_key)
        return conv(raw) if raw is not None else None

    seed = pick(args.seed, "SEED", int)
    samples = pick(args.samples, "SAMPLES", int)
    threads = pick(args.threads, "THREADS", int)
    out = pick(args.out, "OUT", str)
    if seed is not None:
        spec = replace(spec, solver=replace(spec.solver, seed=seed))
    if samples is not None:
        spec = replace(spec, samples=samples)
    if threads is not None:
        spec = replace(spec, threads=threads)
    if out is not None:
        spec = replace(spec, out_dir=out)
    return spec


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="stomcf",
        description="Stochastic mean curvature flow experiments (graphs on the periodic unit interval).")
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--config", help="path to an INI experiment config")
    src.add_argument("--preset", help="name of a shipped experiment preset")
    ap.add_argument("--list-presets", action="store_true", help="list preset names and exit")
    ap.add_argument("--out", help=f"output directory (env {ENV_PREFIX}OUT)")
    ap.add_argument("--seed", type=int, help=f"master seed override (env {ENV_PREFIX}SEED)")
    ap.add_argument("--samples", type=int, help=f"Monte Carlo sample override (env {ENV_PREFIX}SAMPLES)")
    ap.add_argument("--threads", type=int, help=f"worker thread cap (env {ENV_PREFIX}THREADS)")
    args = ap.parse_args(argv)

    if args.list_presets:
        for name in sorted(PRESETS):
            print(name)
        return 0
    try:
        if args.preset:
            if args.preset not in PRESETS:
                raise ConfigError(f"unknown preset {args.preset!r}; see --list-presets")
            text = PRESETS[args.preset]
        elif args.config:
            with open(args.config) as fh:
                text = fh.read()
        else:
            ap.error("one of --config or --preset is required")
        spec = _apply_overrides(parse_config(text), args)
        out_dir = spec.out_dir or "stomcf_out"
        manifest = run(spec, out_dir)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{spec.kind} run complete in {manifest['wall_time_s']:.2f}s -> {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
