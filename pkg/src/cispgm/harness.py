"""Run orchestration: config files, output artifacts, and run comparison.

A run produces flat files only: truth/measurement/track/entropy CSVs with
17-significant-digit floats (byte-reproducible from config + seed), a JSON
summary, and a vector rendering of the entropy curve.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import gmm as gm
from .dynamics import SystemParams
from .hybrid import HybridConfig, RunResult, run_hybrid, run_pgm1_only
from .observation import ARCSEC_RAD, VisibilityPolicy
from .pgm1 import Pgm1Config
from .pgm2 import McmcConfig
from .pgm_core import ProcessNoise
from .scenario import (
    ScenarioConfig,
    ScenarioData,
    build_scenario,
    cluster_box_prior,
    default_box,
)

__all__ = [
    "ConfigError",
    "RunConfig",
    "RunSummary",
    "load_config",
    "config_from_dict",
    "dump_config",
    "config_hash",
    "run",
    "compare",
    "MODES",
]

MODES = ("hybrid", "pgm1-only")

_FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Bad run configuration: unknown key, parse failure, or range violation."""


# section -> key -> (default, validator); validators raise ConfigError.
def _positive(name):
    def check(v):
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"{name} must be a positive number, got {v!r}")
        return float(v)
    return check


def _nonneg(name):
    def check(v):
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
            raise ConfigError(f"{name} must be >= 0, got {v!r}")
        return float(v)
    return check


def _int_min(name, lo):
    def check(v):
        if not isinstance(v, int) or isinstance(v, bool) or v < lo:
            raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")
        return v
    return check


def _number(name):
    def check(v):
        if not (isinstance(v, (int, float)) and math.isfinite(v)):
            raise ConfigError(f"{name} must be a finite number, got {v!r}")
        return float(v)
    return check


def _optional_number(name):
    def check(v):
        if v is None:
            return None
        return _number(name)(v)
    return check


def _mode(name):
    def check(v):
        if v not in MODES:
            raise ConfigError(f"{name} must be one of {MODES}, got {v!r}")
        return v
    return check


def _unit_interval(name):
    def check(v):
        if not (isinstance(v, (int, float)) and 0.0 <= v <= 0.1):
            raise ConfigError(f"{name} must lie in [0, 0.1], got {v!r}")
        return float(v)
    return check


_SCHEMA = {
    "run": {
        "seed": (20260810, _int_min("run.seed", 0)),
        "mode": ("hybrid", _mode("run.mode")),
        "threads": (1, _int_min("run.threads", 1)),
    },
    "system": {
        "mu": (SystemParams().mu, _positive("system.mu")),
        "l_star_km": (SystemParams().l_star_km, _positive("system.l_star_km")),
        "t_star_s": (SystemParams().t_star_s, _positive("system.t_star_s")),
        "omega_earth_rad_s": (7.2921159e-5,
                              _positive("system.omega_earth_rad_s")),
        "observer_lat_deg": (30.62, _number("system.observer_lat_deg")),
        "observer_lon_deg": (-96.34, _number("system.observer_lon_deg")),
        "observer_alt_km": (0.1, _nonneg("system.observer_alt_km")),
        "earth_spin_angle0_deg": (
            None, _optional_number("system.earth_spin_angle0_deg")),
    },
    "scenario": {
        "cadence_minutes": (40.0, _positive("scenario.cadence_minutes")),
        "max_steps": (20, _int_min("scenario.max_steps", 1)),
        "min_elevation_deg": (15.0, _nonneg("scenario.min_elevation_deg")),
        "sigma_az_arcsec": (1.0, _positive("scenario.sigma_az_arcsec")),
        "sigma_el_arcsec": (1.0, _positive("scenario.sigma_el_arcsec")),
    },
    "box": {
        "position_halfwidth_km": (550000.0,
                                  _positive("box.position_halfwidth_km")),
        "velocity_halfwidth_km_s": (100.0,
                                    _positive("box.velocity_halfwidth_km_s")),
    },
    "filter": {
        "n_particles": (5000, _int_min("filter.n_particles", 2)),
        "switch_step": (2, _int_min("filter.switch_step", 2)),
        "n_prior_clusters": (6, _int_min("filter.n_prior_clusters", 1)),
        "pgm1_n_clusters": (12, _int_min("filter.pgm1_n_clusters", 1)),
        "min_component_weight": (1e-6,
                                 _unit_interval("filter.min_component_weight")),
        "process_noise_pos_nondim": (
            1e-8, _nonneg("filter.process_noise_pos_nondim")),
        "process_noise_vel_nondim": (
            1e-8, _nonneg("filter.process_noise_vel_nondim")),
        "baseline_prior_clusters": (
            6, _int_min("filter.baseline_prior_clusters", 1)),
        "baseline_prior_samples": (
            100000, _int_min("filter.baseline_prior_samples", 10)),
    },
    "mcmc": {
        "n_chains": (24, _int_min("mcmc.n_chains", 1)),
        "chain_length": (20000, _int_min("mcmc.chain_length", 2)),
        "burn_in": (5000, _int_min("mcmc.burn_in", 0)),
        "thin": (500, _int_min("mcmc.thin", 1)),
        "proposal_scale": (2.38**2 / 6.0, _positive("mcmc.proposal_scale")),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated nested run configuration (plain dict of sections)."""

    sections: dict

    def __getitem__(self, key):
        return self.sections[key]

    def system_params(self) -> SystemParams:
        s = self.sections["system"]
        spin = s["earth_spin_angle0_deg"]
        return SystemParams(
            mu=s["mu"],
            l_star_km=s["l_star_km"],
            t_star_s=s["t_star_s"],
            omega_earth_rad_s=s["omega_earth_rad_s"],
            observer_lat_rad=math.radians(s["observer_lat_deg"]),
            observer_lon_rad=math.radians(s["observer_lon_deg"]),
            observer_alt_km=s["observer_alt_km"],
            earth_spin_angle0_rad=(None if spin is None
                                   else math.radians(spin)),
        )

    def scenario_config(self) -> ScenarioConfig:
        s = self.sections["scenario"]
        t_star = self.sections["system"]["t_star_s"]
        sig_az = s["sigma_az_arcsec"] * ARCSEC_RAD
        sig_el = s["sigma_el_arcsec"] * ARCSEC_RAD
        return ScenarioConfig(
            cadence=s["cadence_minutes"] * 60.0 / t_star,
            max_steps=s["max_steps"],
            visibility=VisibilityPolicy(
                min_elevation_rad=math.radians(s["min_elevation_deg"])),
            noise_cov=np.diag([sig_az**2, sig_el**2]),
        )

    def box(self) -> gm.UniformBox:
        b = self.sections["box"]
        return default_box(b["position_halfwidth_km"],
                           b["velocity_halfwidth_km_s"])

    def hybrid_config(self) -> HybridConfig:
        f = self.sections["filter"]
        m = self.sections["mcmc"]
        return HybridConfig(
            box=self.box(),
            switch_step=f["switch_step"],
            n_particles=f["n_particles"],
            n_prior_clusters=f["n_prior_clusters"],
            pgm1=Pgm1Config(n_clusters=f["pgm1_n_clusters"],
                            min_component_weight=f["min_component_weight"]),
            mcmc=McmcConfig(n_chains=m["n_chains"],
                            chain_length=m["chain_length"],
                            burn_in=m["burn_in"], thin=m["thin"],
                            proposal_scale=m["proposal_scale"]),
            process_noise=ProcessNoise(
                pos_sigma=f["process_noise_pos_nondim"],
                vel_sigma=f["process_noise_vel_nondim"]),
            threads=self.sections["run"]["threads"],
        )


def config_from_dict(raw: dict | None, overrides: dict | None = None
                     ) -> RunConfig:
    """Validate a nested dict against the schema; unknown keys are errors."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw)}")
    out: dict = {}
    for section, keys in _SCHEMA.items():
        given = raw.get(section, {})
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        unknown = set(given) - set(keys)
        if unknown:
            raise ConfigError(
                f"unknown key(s) in section {section!r}: {sorted(unknown)}"
            )
        out[section] = {
            k: (check(given[k]) if k in given else default)
            for k, (default, check) in keys.items()
        }
    unknown_sections = set(raw) - set(_SCHEMA)
    if unknown_sections:
        raise ConfigError(f"unknown section(s): {sorted(unknown_sections)}")

    for path, value in (overrides or {}).items():
        section, key = path.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {path!r}")
        out[section][key] = _SCHEMA[section][key][1](value)

    cfg = RunConfig(out)
    # Cross-field checks that single-key validators cannot express.
    if out["mcmc"]["chain_length"] <= out["mcmc"]["burn_in"]:
        raise ConfigError("mcmc.chain_length must exceed mcmc.burn_in")
    return cfg


def load_config(path: str | Path | None,
                overrides: dict | None = None) -> RunConfig:
    """Load a YAML config file; an empty or missing file means all defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if raw is None:
            raw = {}
    return config_from_dict(raw, overrides)


def dump_config(cfg: RunConfig) -> str:
    """Canonical YAML text for a configuration (round-trips exactly)."""
    return yaml.safe_dump(cfg.sections, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunSummary:
    """Machine-readable results of one run."""

    mode: str
    seed: int
    config_hash: str
    n_steps: int
    initial_std: list[float]
    final_std: list[float]
    entropy: list[float]
    consistent: list[bool]
    diverged: bool
    divergence_step: int | None
    runtime_s: float
    exit_code: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "n_steps": self.n_steps,
            "initial_std_km_kms": self.initial_std,
            "final_std_km_kms": self.final_std,
            "entropy_nats": self.entropy,
            "consistent": self.consistent,
            "diverged": self.diverged,
            "divergence_step": self.divergence_step,
            "runtime_s": self.runtime_s,
            "exit_code": self.exit_code,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(
            mode=d["mode"], seed=d["seed"], config_hash=d["config_hash"],
            n_steps=d["n_steps"], initial_std=d["initial_std_km_kms"],
            final_std=d["final_std_km_kms"], entropy=d["entropy_nats"],
            consistent=d["consistent"], diverged=d["diverged"],
            divergence_step=d["divergence_step"], runtime_s=d["runtime_s"],
            exit_code=d["exit_code"],
        )


def _fmt(x: float) -> str:
    return _FLOAT_FMT % float(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            _fmt(v) if isinstance(v, float) else str(v) for v in row
        ))
    path.write_text("\n".join(lines) + "\n")


def _write_scenario(out: Path, scen: ScenarioData) -> None:
    _write_csv(
        out / "truth.csv",
        ["epoch_nondim", "x", "y", "z", "vx", "vy", "vz"],
        [[float(t), *map(float, s)] for t, s in zip(scen.epochs, scen.truth)],
    )
    _write_csv(
        out / "measurements.csv",
        ["epoch_nondim", "az_rad", "el_rad", "sigma_az_rad", "sigma_el_rad"],
        [
            [float(z.epoch), float(z.az), float(z.el),
             float(math.sqrt(z.noise_cov[0, 0])),
             float(math.sqrt(z.noise_cov[1, 1]))]
            for z in scen.measurements
        ],
    )


def _write_track(out: Path, result: RunResult) -> None:
    rows = []
    for r in result.records:
        rows.append([
            r.step, float(r.epoch), float(r.entropy),
            *[float(v) for v in r.std_devs],
            int(r.consistent), r.filter_kind, r.posterior.n_components,
        ])
    _write_csv(
        out / "track.csv",
        ["step", "epoch_nondim", "entropy_nats",
         "std_x_km", "std_y_km", "std_z_km",
         "std_vx_km_s", "std_vy_km_s", "std_vz_km_s",
         "consistent", "filter", "n_components"],
        rows,
    )
    _write_csv(
        out / "entropy.csv",
        ["step", "epoch_nondim", "entropy_nats"],
        [[r.step, float(r.epoch), float(r.entropy)] for r in result.records],
    )


def _write_gmm(path: Path, g: gm.Gmm) -> None:
    header = (["component", "weight"]
              + [f"mean_{i}" for i in range(6)]
              + [f"cov_{i}_{j}" for i in range(6) for j in range(i + 1)])
    rows = []
    for c in range(g.n_components):
        tri = [float(g.covs[c][i, j]) for i in range(6) for j in range(i + 1)]
        rows.append([c, float(g.weights[c]), *map(float, g.means[c]), *tri])
    _write_csv(path, header, rows)


def _write_diagnostics(out: Path, result: RunResult) -> None:
    if result.pgm1_diagnostics:
        _write_csv(
            out / "diagnostics_pgm1.csv",
            ["step", "component", "weight", "n_members",
             "innovation_norm_rad", "log_likelihood"],
            [[s, d.component, float(d.weight), d.n_members,
              float(d.innovation_norm), float(d.loglik)]
             for s, d in result.pgm1_diagnostics],
        )
    if result.pgm2_diagnostics:
        _write_csv(
            out / "diagnostics_pgm2.csv",
            ["step", "component", "acceptance_rate", "retained_samples",
             "log_likelihood", "n_clusters"],
            [[s, d.component, float(d.acceptance_rate), d.retained_samples,
              float(d.log_likelihood), d.n_clusters]
             for s, d in result.pgm2_diagnostics],
        )


def _render_entropy(out: Path, curves: list[tuple[str, list[int], list[float]]],
                    name: str = "entropy.svg") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for label, steps, values in curves:
        ax.plot(steps, values, marker="o", lw=1.2, ms=3.5, label=label)
    ax.set_xlabel("measurement update")
    ax.set_ylabel("entropy (nondim nats)")
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    target = out / name
    fig.savefig(target)
    plt.close(fig)
    return target


def run(mode: str, cfg: RunConfig, out_dir: str | Path,
        scenario: ScenarioData | None = None) -> RunSummary:
    """Execute one full run and write all artifacts to ``out_dir``.

    Exit code 0 means the truth stayed consistent to pass end; nonzero
    reports the first divergence step.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.system_params()
    t0 = time.perf_counter()

    root = np.random.default_rng(
        np.random.SeedSequence(cfg["run"]["seed"])
    )
    scen_rng, prior_rng, run_rng = root.spawn(3)
    if scenario is None:
        scenario = build_scenario(cfg.scenario_config(), p, scen_rng)
    hy = cfg.hybrid_config()

    if mode == "hybrid":
        result = run_hybrid(scenario.measurements, scenario.truth, hy, p,
                            run_rng)
    else:
        prior0 = cluster_box_prior(
            hy.box, p, float(scenario.epochs[0]),
            k=cfg["filter"]["baseline_prior_clusters"],
            n=cfg["filter"]["baseline_prior_samples"], rng=prior_rng,
        )
        result = run_pgm1_only(scenario.measurements, scenario.truth, prior0,
                               hy, p, run_rng)

    runtime = time.perf_counter() - t0
    _write_scenario(out, scenario)
    _write_track(out, result)
    _write_diagnostics(out, result)
    if result.records:
        _write_gmm(out / "gmm_final.csv", result.records[-1].posterior)
        _render_entropy(out, [(mode, [r.step for r in result.records],
                               [r.entropy for r in result.records])])

    box = hy.box
    initial_std = list(box.widths / math.sqrt(12.0))
    final_std = (list(map(float, result.records[-1].std_devs))
                 if result.records else initial_std)
    first_bad = result.first_inconsistent_step
    exit_code = 0 if (result.records and first_bad is None) else 2
    summary = RunSummary(
        mode=mode,
        seed=cfg["run"]["seed"],
        config_hash=config_hash(cfg),
        n_steps=len(result.records),
        initial_std=[float(v) for v in initial_std],
        final_std=[float(v) for v in final_std],
        entropy=[float(r.entropy) for r in result.records],
        consistent=[bool(r.consistent) for r in result.records],
        diverged=result.diverged,
        divergence_step=first_bad,
        runtime_s=runtime,
        exit_code=exit_code,
    )
    (out / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    (out / "config.yaml").write_text(dump_config(cfg))
    return summary


def compare(a: RunSummary, b: RunSummary, out_dir: str | Path | None = None,
            truncate: bool = False) -> dict:
    """Per-step entropy deltas and start/end standard-deviation ratios.

    Raises on unequal pass lengths unless ``truncate`` is set. Component
    rows are ordered x, y, z, vx, vy, vz.
    """
    na, nb = len(a.entropy), len(b.entropy)
    if na != nb and not truncate:
        raise ValueError(
            f"pass lengths differ ({na} vs {nb}); pass truncate=True"
        )
    n = min(na, nb)
    deltas = [a.entropy[i] - b.entropy[i] for i in range(n)]
    components = ["x_km", "y_km", "z_km", "vx_km_s", "vy_km_s", "vz_km_s"]
    table = {
        "components": components,
        "a_start": a.initial_std,
        "a_end": a.final_std,
        "a_reduction": [s / e for s, e in zip(a.initial_std, a.final_std)],
        "b_start": b.initial_std,
        "b_end": b.final_std,
        "b_reduction": [s / e for s, e in zip(b.initial_std, b.final_std)],
        "entropy_delta": deltas,
        "final_entropy_a": a.entropy[n - 1] if n else None,
        "final_entropy_b": b.entropy[n - 1] if n else None,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [
            [components[i], float(a.initial_std[i]), float(a.final_std[i]),
             float(table["a_reduction"][i]), float(b.initial_std[i]),
             float(b.final_std[i]), float(table["b_reduction"][i])]
            for i in range(6)
        ]
        _write_csv(out / "comparison.csv",
                   ["component", "a_start", "a_end", "a_reduction",
                    "b_start", "b_end", "b_reduction"], rows)
        _write_csv(out / "entropy_delta.csv",
                   ["step", "entropy_a", "entropy_b", "delta"],
                   [[i + 1, float(a.entropy[i]), float(b.entropy[i]),
                     float(deltas[i])] for i in range(n)])
        _render_entropy(
            out,
            [(a.mode, list(range(1, na + 1)), a.entropy),
             (b.mode, list(range(1, nb + 1)), b.entropy)],
            name="entropy_compare.svg",
        )
    return table
