"""Command-line interface: run ensembles, verify identities, describe models.

Configuration files are TOML with a mandatory top-level `schema = 1`;
unknown keys or sections are rejected so typos cannot silently change an
experiment. Exit codes: 0 success, 1 a verification outcome differed from
expectation, 2 configuration error, 3 runtime failure.

Output files are written with 17 significant digits and fixed key order, so
identical configurations reproduce them byte for byte (wall-clock fields
live only in summary.json, which is excluded from that guarantee).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import _backend, model as model_mod, verify as verify_mod
from .errors import ConfigError, ConfigParseError, ConfigValidationError, FlashSimError
from .model import (
    DeltaProfile,
    FlashModel,
    GaussianProfile,
    HamiltonianSpec,
    Lattice,
    build_fock_model,
    build_grw_model,
    build_identical_model,
    one_particle_hamiltonian,
    one_particle_rate_family,
)
from .sampler import EnsembleResult, SamplerConfig, run_ensemble
from .verify import CheckReport, QuadratureGrid

SCHEMA_VERSION = 1

KNOWN_CHECKS = (
    "normalization",
    "consistency",
    "constants",
    "second_quantization",
    "master_vs_ensemble",
    "no_signalling",
)


@dataclass
class ExperimentConfig:
    """Validated contents of a configuration file."""

    path: str
    model: dict
    initial_state: dict
    run: dict
    verify: dict


class _Section:
    """Typed key extraction with strict unknown-key rejection."""

    def __init__(self, name: str, data: dict):
        if not isinstance(data, dict):
            raise ConfigValidationError(f"[{name}] must be a table")
        self.name = name
        self.data = dict(data)

    def take(self, key, kind, default=None, required=False):
        if key not in self.data:
            if required:
                raise ConfigValidationError(f"[{self.name}] is missing required key {key!r}")
            return default
        value = self.data.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and not isinstance(value, kind):
            raise ConfigValidationError(
                f"[{self.name}] key {key!r} must be {getattr(kind, '__name__', kind)}, got {type(value).__name__}"
            )
        return value

    def finish(self):
        if self.data:
            extra = ", ".join(sorted(self.data))
            raise ConfigValidationError(f"[{self.name}] has unknown keys: {extra}")


def parse_config(path) -> ExperimentConfig:
    """Load and structurally validate a configuration file."""
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except OSError as exc:
        raise ConfigParseError(f"cannot read {p}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"{p} is not valid TOML: {exc}") from exc
    top = _Section("top level", raw)
    schema = top.take("schema", int, required=True)
    if schema != SCHEMA_VERSION:
        raise ConfigValidationError(f"schema {schema} is not supported (expected {SCHEMA_VERSION})")
    model_tbl = top.take("model", dict, required=True)
    state_tbl = top.take("initial_state", dict, default={})
    run_tbl = top.take("run", dict, default={})
    verify_tbl = top.take("verify", dict, default={})
    top.finish()
    return ExperimentConfig(
        path=str(p), model=model_tbl, initial_state=state_tbl, run=run_tbl, verify=verify_tbl
    )


def _parse_parity(value: str) -> int:
    if value in ("boson", "+", "+1"):
        return 1
    if value in ("fermion", "-", "-1"):
        return -1
    raise ConfigValidationError(f"parity must be 'boson' or 'fermion', got {value!r}")


def build_model(cfg: ExperimentConfig) -> FlashModel:
    """Construct the model described by [model]."""
    sec = _Section("model", cfg.model)
    builder = sec.take("builder", str, required=True)
    shape = sec.take("lattice_shape", list, required=True)
    spacing = sec.take("spacing", float, default=1.0)
    lattice = Lattice(shape=tuple(shape), spacing=spacing)
    profile_kind = sec.take("profile", str, required=True)
    strength = sec.take("strength", float, required=True)
    if profile_kind == "gaussian":
        width = sec.take("width", float, required=True)
        profile = GaussianProfile(strength=strength, width=width)
    elif profile_kind == "delta":
        profile = DeltaProfile(strength=strength)
    else:
        raise ConfigValidationError(f"profile must be 'gaussian' or 'delta', got {profile_kind!r}")
    hopping = sec.take("hopping", float, default=0.0)
    potential = sec.take("potential", list, default=None)
    interaction = sec.take("interaction", float, default=0.0)
    drive = sec.take("drive", float, default=0.0)
    spec = HamiltonianSpec(
        hopping=hopping,
        potential=tuple(potential) if potential is not None else None,
        interaction=interaction,
        drive=drive,
    )
    try:
        if builder == "grw":
            n_particles = sec.take("n_particles", int, required=True)
            mass_factors = sec.take("mass_factors", list, default=None)
            sec.finish()
            return build_grw_model(n_particles, lattice, profile, h=spec, mass_factors=mass_factors)
        if builder == "identical":
            n_particles = sec.take("n_particles", int, required=True)
            parity = _parse_parity(sec.take("parity", str, required=True))
            sec.finish()
            if interaction or drive:
                raise ConfigValidationError("identical builder supports hopping/potential terms only")
            family = one_particle_rate_family(lattice, profile)
            h1 = one_particle_hamiltonian(lattice, HamiltonianSpec(hopping=hopping, potential=spec.potential))
            return build_identical_model(n_particles, parity, family, h1, lattice)
        if builder == "fock":
            n_max = sec.take("n_max", int, required=True)
            parity = _parse_parity(sec.take("parity", str, required=True))
            mass_factor = sec.take("mass_factor", float, default=1.0)
            sec.finish()
            return build_fock_model(lattice, profile, parity, n_max, h=spec, mass_factor=mass_factor)
    except ConfigError:
        raise
    except (ValueError, FlashSimError) as exc:
        raise ConfigValidationError(f"model construction failed: {exc}") from exc
    raise ConfigValidationError(f"builder must be grw, identical, or fock, got {builder!r}")


def build_initial_state(cfg: ExperimentConfig, model: FlashModel) -> np.ndarray:
    """Construct the normalised initial state described by [initial_state]."""
    sec = _Section("initial_state", cfg.initial_state)
    kind = sec.take("kind", str, default=None)
    if kind is None:
        sec.finish()
        psi = np.zeros(model.dim, dtype=np.complex128)
        psi[0] = 1.0
        return psi
    if kind == "index":
        index = sec.take("index", int, required=True)
        sec.finish()
        if not 0 <= index < model.dim:
            raise ConfigValidationError(f"index {index} outside dimension {model.dim}")
        return model_mod.basis_state(model, index)
    if kind == "site":
        sites = sec.take("sites", list, required=True)
        sec.finish()
        if model.kind != "grw":
            raise ConfigValidationError("kind='site' applies to the grw builder only")
        m = model.n_sites
        n = len(model.labels)
        if len(sites) != n:
            raise ConfigValidationError(f"need {n} site entries, got {len(sites)}")
        index = 0
        for s in sites:
            s = int(s)
            if not 0 <= s < m:
                raise ConfigValidationError(f"site {s} outside lattice of {m} sites")
            index = index * m + s
        return model_mod.basis_state(model, index)
    if kind == "occupation":
        occ = tuple(int(x) for x in sec.take("occupation", list, required=True))
        sec.finish()
        if model.basis_occupations is None:
            raise ConfigValidationError("kind='occupation' needs an occupation-basis model")
        try:
            index = model.basis_occupations.index(occ)
        except ValueError:
            raise ConfigValidationError(f"occupation {occ} is not in this model's basis") from None
        return model_mod.basis_state(model, index)
    if kind == "amplitudes":
        amps = sec.take("amplitudes", list, required=True)
        sec.finish()
        if len(amps) != model.dim:
            raise ConfigValidationError(f"need {model.dim} amplitude pairs, got {len(amps)}")
        try:
            psi = np.array([complex(float(a[0]), float(a[1])) for a in amps])
        except (TypeError, IndexError) as exc:
            raise ConfigValidationError("amplitudes must be [re, im] pairs") from exc
        norm = float(np.linalg.norm(psi))
        if abs(norm - 1.0) > 1e-6:
            raise ConfigValidationError(f"amplitudes norm {norm} differs from 1 beyond 1e-6")
        return psi / norm
    raise ConfigValidationError(f"initial_state kind {kind!r} not recognised")


@dataclass
class RunSettings:
    sampler: SamplerConfig
    n_traj: int
    threads: int | None
    snapshot_times: tuple[float, ...]


def build_run_settings(cfg: ExperimentConfig, seed_override=None, threads_override=None) -> RunSettings:
    sec = _Section("run", cfg.run)
    t_max = sec.take("t_max", float, required=True)
    dt_grid = sec.take("dt_grid", float, default=None)
    tol_t = sec.take("tol_t", float, default=1e-10)
    survival_floor = sec.take("survival_floor", float, default=1e-12)
    seed = sec.take("seed", int, default=0)
    n_traj = sec.take("n_traj", int, default=1)
    threads = sec.take("threads", int, default=None)
    snapshot_times = sec.take("snapshot_times", list, default=[])
    sec.finish()
    if seed_override is not None:
        seed = int(seed_override)
    if threads_override is not None:
        threads = int(threads_override)
    if n_traj < 1:
        raise ConfigValidationError("n_traj must be >= 1")
    try:
        scfg = SamplerConfig(
            t_max=t_max, dt_grid=dt_grid, tol_t=tol_t, survival_floor=survival_floor, seed=seed
        )
    except ValueError as exc:
        raise ConfigValidationError(str(exc)) from exc
    return RunSettings(
        sampler=scfg,
        n_traj=n_traj,
        threads=threads,
        snapshot_times=tuple(float(s) for s in snapshot_times),
    )


# -- output files -------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_flash_log(path, model: FlashModel, result: EnsembleResult):
    """One JSON object per flash, grouped by trajectory, fixed key order."""
    m = model.n_sites
    with open(path, "w") as fh:
        for i, traj in enumerate(result.trajectories):
            for k in range(traj.n_flashes()):
                c = int(traj.channels[k])
                site = c % m
                label = model.labels[c // m]
                coords = ",".join(_fmt(x) for x in model.lattice.site_position(site))
                fh.write(
                    f'{{"trajectory_id":{i},"k":{k},"t":{_fmt(traj.times[k])},'
                    f'"site":{site},"x":[{coords}],"label":"{label}"}}\n'
                )


def read_flash_log(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_density_csv(path, model: FlashModel, result: EnsembleResult):
    """Per-site matter density of the ensemble average at each snapshot."""
    cols = [f"x{k}" for k in range(model.lattice.ndim)]
    header = ["site"] + cols + [f"t={s:g}" for s in result.snapshot_times]
    rows = []
    densities = []
    for rho in result.snapshot_density:
        per_site = np.zeros(model.n_sites)
        for li in range(model.n_labels):
            for site in range(model.n_sites):
                per_site[site] += float(np.trace(model.rates.ops[li, site] @ rho).real)
        densities.append(per_site)
    for site in range(model.n_sites):
        row = [str(site)] + [_fmt(x) for x in model.lattice.site_position(site)]
        row += [_fmt(d[site]) for d in densities]
        rows.append(",".join(row))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(row + "\n")


def read_density_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = [line.strip().split(",") for line in fh if line.strip()]
    values = np.array([[float(x) for x in row] for row in data]) if data else np.empty((0, len(header)))
    return header, values


def write_summary(path, model: FlashModel, result: EnsembleResult):
    counts = result.flash_counts()
    m = model.n_sites
    per_label = {label: 0 for label in model.labels}
    for traj in result.trajectories:
        for c in traj.channels:
            per_label[model.labels[int(c) // m]] += 1
    summary = {
        "backend": result.backend,
        "flash_count_mean": float(counts.mean()),
        "flash_count_variance": float(counts.var(ddof=1)) if len(counts) > 1 else 0.0,
        "flashes_per_label": per_label,
        "n_trajectories": result.n_traj,
        "seed": result.config.seed,
        "survival_fraction": float(np.mean(counts == 0)),
        "t_max": result.config.t_max,
        "threads": result.threads,
        "total_flashes": int(counts.sum()),
        "wall_time_s": result.elapsed_s,
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -----------------------------------------------------------------

def cmd_run(cfg: ExperimentConfig, outdir, seed_override=None, threads_override=None) -> int:
    model = build_model(cfg)
    psi0 = build_initial_state(cfg, model)
    settings = build_run_settings(cfg, seed_override, threads_override)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_ensemble(
        model, psi0, settings.sampler, settings.n_traj,
        threads=settings.threads, snapshot_times=settings.snapshot_times,
    )
    write_flash_log(out / "flashes.jsonl", model, result)
    write_density_csv(out / "density.csv", model, result)
    write_summary(out / "summary.json", model, result)
    counts = result.flash_counts()
    print(
        f"run: {result.n_traj} trajectories, {int(counts.sum())} flashes, "
        f"mean {counts.mean():.3f} per trajectory, backend={result.backend}, "
        f"outputs in {out}"
    )
    return 0


def _default_verify_t_max(model: FlashModel, run_tbl: dict) -> float:
    if "t_max" in run_tbl:
        return float(run_tbl["t_max"])
    if model.total_rate_norm > 0:
        return 10.0 / model.total_rate_norm
    return 1.0


def _canned_no_signalling(model: FlashModel, vcfg: dict) -> CheckReport:
    """No-signalling check with built-in environment construction.

    The environment space copies the system dimension; two different
    environment models (rates and Hamiltonians) act on joint states with
    identical system marginals. A nonzero coupling makes the composite
    interacting, which is the negative control.
    """
    d1 = model.dim
    if d1 * d1 > 36:
        raise ConfigValidationError(
            f"built-in no_signalling check needs model dimension <= 6, got {d1}"
        )
    env_seed = int(vcfg.get("env_seed", 7))
    coupling_strength = float(vcfg.get("coupling", 0.0))
    n_bins = int(vcfg.get("n_bins", 8))
    t_max = float(vcfg.get("t_max_ns", 2.0 / max(model.total_rate_norm, 0.5)))
    gen = np.random.default_rng(env_seed)

    def random_hermitian(d, scale):
        a = gen.normal(size=(d, d)) + 1j * gen.normal(size=(d, d))
        return scale * (a + a.conj().T) / 2.0

    def env_model(strength, h_scale):
        lat = Lattice(shape=(d1,), spacing=model.lattice.spacing)
        family = one_particle_rate_family(lat, DeltaProfile(strength))
        return FlashModel(
            lattice=lat, hamiltonian=random_hermitian(d1, h_scale), rates=family, kind="custom"
        )

    # the two environments differ in both rates and dynamics
    env_a = env_model(0.7, 0.9)
    env_b = env_model(1.9, 0.4)
    probs = gen.random(d1) + 0.2
    probs /= probs.sum()
    psi_a = np.zeros(d1 * d1, dtype=np.complex128)
    for i in range(d1):
        psi_a[i * d1 + i] = math.sqrt(probs[i])
    q, _ = np.linalg.qr(gen.normal(size=(d1, d1)) + 1j * gen.normal(size=(d1, d1)))
    psi_b = (np.kron(np.eye(d1), q) @ psi_a)
    coupling = None
    if coupling_strength:
        coupling = random_hermitian(d1 * d1, coupling_strength)
    return verify_mod.check_no_signalling(
        model, env_a, env_b, psi_a, psi_b, t_max, n_bins=n_bins,
        coupling_a=coupling, coupling_b=coupling,
    )


def run_checks(cfg: ExperimentConfig, seed_override=None, threads_override=None) -> list[tuple[CheckReport, bool]]:
    """Run configured checks; returns (report, expected_fail) pairs."""
    sec = _Section("verify", cfg.verify)
    checks = sec.take("checks", list, default=["normalization", "consistency", "constants"])
    t_max = sec.take("t_max", float, default=None)
    n_steps = sec.take("n_steps", int, default=512)
    rule = sec.take("rule", str, default="simpson")
    orders = sec.take("orders", list, default=[1, 2])
    exact_time_integral = sec.take("exact_time_integral", bool, default=False)
    n_bins = sec.take("n_bins", int, default=8)
    ns_t_max = sec.take("t_max_ns", float, default=None)
    snapshot_times = sec.take("snapshot_times", list, default=None)
    v_n_traj = sec.take("n_traj", int, default=2000)
    sectors = sec.take("sectors", list, default=None)
    env_seed = sec.take("env_seed", int, default=7)
    coupling = sec.take("coupling", float, default=0.0)
    expected_fail = sec.take("expected_fail", list, default=[])
    strength_si = sec.take("strength_si", float, default=1e5)
    width_si = sec.take("width_si", float, default=1e-7)
    sec.finish()
    for name in checks:
        if name not in KNOWN_CHECKS:
            raise ConfigValidationError(f"unknown check {name!r}; known: {', '.join(KNOWN_CHECKS)}")
    for name in expected_fail:
        if name not in checks:
            raise ConfigValidationError(f"expected_fail lists {name!r} which is not in checks")

    needs_model = any(c != "constants" for c in checks)
    model = build_model(cfg) if needs_model else None
    psi0 = build_initial_state(cfg, model) if needs_model else None
    if model is not None and t_max is None:
        t_max = _default_verify_t_max(model, cfg.run)

    out: list[tuple[CheckReport, bool]] = []
    for name in checks:
        if name == "constants":
            report = verify_mod.check_constants(strength_si, width_si)
        elif name == "normalization":
            grid = QuadratureGrid(t_max=t_max, n_steps=n_steps, rule=rule)
            report = verify_mod.check_normalization(model, psi0, grid)
        elif name == "consistency":
            grid = QuadratureGrid(t_max=t_max, n_steps=n_steps, rule=rule)
            report = verify_mod.check_consistency(
                model, psi0, grid, orders=tuple(orders), exact_time_integral=exact_time_integral
            )
        elif name == "second_quantization":
            report = _second_quantization_from_config(cfg, model, sectors)
        elif name == "master_vs_ensemble":
            snaps = snapshot_times if snapshot_times else [0.5 * t_max, t_max]
            seed = int(seed_override) if seed_override is not None else int(cfg.run.get("seed", 0))
            scfg = SamplerConfig(t_max=max(float(s) for s in snaps), seed=seed)
            report = verify_mod.check_master_vs_ensemble(
                model, psi0, scfg, snaps, v_n_traj, threads=threads_override
            )
        elif name == "no_signalling":
            vtbl = {"env_seed": env_seed, "coupling": coupling, "n_bins": n_bins}
            if ns_t_max is not None:
                vtbl["t_max_ns"] = ns_t_max
            report = _canned_no_signalling(model, vtbl)
        out.append((report, name in expected_fail))
    return out


def _second_quantization_from_config(cfg: ExperimentConfig, model: FlashModel, sectors) -> CheckReport:
    if model.kind != "fock":
        raise ConfigValidationError("second_quantization check needs the fock builder")
    msec = dict(cfg.model)
    if float(msec.get("interaction", 0.0)):
        raise ConfigValidationError("second_quantization check requires interaction = 0")
    parity = _parse_parity(str(msec.get("parity")))
    n_max = int(msec.get("n_max"))
    lattice = model.lattice
    strength = float(msec.get("strength"))
    if str(msec.get("profile")) == "gaussian":
        profile = GaussianProfile(strength=strength, width=float(msec.get("width")))
    else:
        profile = DeltaProfile(strength=strength)
    hopping = float(msec.get("hopping", 0.0))
    potential = msec.get("potential")
    h1 = one_particle_hamiltonian(
        lattice, HamiltonianSpec(hopping=hopping, potential=tuple(potential) if potential else None)
    )
    if sectors is None:
        sectors = list(range(1, min(3, n_max) + 1))
    sector_models = {}
    for n in sectors:
        n = int(n)
        if n < 1 or n > n_max:
            raise ConfigValidationError(f"sector {n} outside 1..{n_max}")
        family = one_particle_rate_family(lattice, profile)
        sector_models[n] = build_identical_model(n, parity, family, h1, lattice)
    return verify_mod.check_second_quantization(model, sector_models)


def cmd_verify(cfg: ExperimentConfig, outdir=None, seed_override=None, threads_override=None) -> int:
    results = run_checks(cfg, seed_override, threads_override)
    lines = []
    ok = True
    for report, expect_fail in results:
        line = report.record()
        if expect_fail:
            line += " expected_fail=true"
        lines.append(line)
        print(line)
        if report.passed == expect_fail:
            ok = False
    verdict = "all checks matched expectations" if ok else "some checks did not match expectations"
    lines.append(verdict)
    print(verdict)
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


def cmd_describe(cfg: ExperimentConfig) -> int:
    model = build_model(cfg)
    print(f"builder: {model.kind}")
    print(f"dimension: {model.dim}")
    print(f"lattice: shape={model.lattice.shape} spacing={model.lattice.spacing:g} sites={model.n_sites}")
    print(f"labels: {', '.join(model.labels)}")
    print(f"total rate operator norm: {model.total_rate_norm:.6g}")
    print(f"total rate proportional to identity: {'yes' if model.rate_is_uniform() else 'no'}")
    if model.basis_occupations is not None:
        grades: dict[int, int] = {}
        for occ in model.basis_occupations:
            grades[sum(occ)] = grades.get(sum(occ), 0) + 1
        graded = ", ".join(f"n={n}:{grades[n]}" for n in sorted(grades))
        print(f"graded dimensions: {graded}")
    print(f"backend: {_backend.get_backend()}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flashsim",
        description="Flash-process trajectory sampler and identity checker",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="sample an ensemble and write outputs")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override run.seed")
    p_run.add_argument("--threads", type=int, default=None, help="override run.threads")
    p_ver = sub.add_parser("verify", help="run configured identity checks")
    p_ver.add_argument("config")
    p_ver.add_argument("-o", "--output", default=None, help="directory for report.txt")
    p_ver.add_argument("--seed", type=int, default=None)
    p_ver.add_argument("--threads", type=int, default=None)
    p_desc = sub.add_parser("describe", help="print model facts without sampling")
    p_desc.add_argument("config")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, args.output, args.seed, args.threads)
        if args.command == "verify":
            return cmd_verify(cfg, args.output, args.seed, args.threads)
        return cmd_describe(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FlashSimError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
