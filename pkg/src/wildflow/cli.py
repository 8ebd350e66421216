"""Command line entry points: ``jets verify``, ``ci run``, ``rough selftest``, ``energy compare``.

A run is described by a YAML tree with the sections below; ``--set a.b=value``
overrides single entries (values are parsed as YAML scalars).

.. code-block:: yaml

    experiment: ci-run          # jets-verify | ci-run | rough-selftest | energy-compare
    regime: additive            # additive | multiplicative | nonlinear
    seed: 0
    grid: 64                    # points per direction (power of two)
    output_dir: runs
    schedule: {a: 2, b: 8, beta: 0.1, alpha: 0.0051, L: 2, mode: toy, c_R: 0.01}
    noise: {sigma: 0.0, K: 2.0, decay: 3.5, m: 1, dt: 0.015625, T: 1.0}
    run: {steps: 1, T: 1.0, dt: 0.0625, ...}   # see RunOptions

Every output lands in ``<output_dir>/<experiment>/<hash>/`` where ``hash`` is the
SHA-256 prefix of the canonical config (without ``output_dir``).  All files except
the sidecar ``run.log`` are functions of the config alone.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import click
import numpy as np
import yaml

from . import engine as eng
from . import field3 as f3
from . import jets
from . import roughpath as rp
from . import stochastic as st

log = logging.getLogger("wildflow")

EXPERIMENTS = ("jets-verify", "ci-run", "rough-selftest", "energy-compare")


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


@dataclass(frozen=True)
class RunOptions:
    """Experiment-specific options.

    Attributes:
        steps: convex-integration steps after the start pair.
        T, dt: horizon and spacing of the engine's sample times.
        residual_times: times at which equation residuals and step identities are checked.
        fd_h: initial step of the finite-difference residual study (``None`` to skip).
        lambdas: frequency sweep of ``jets-verify``.
        identity_lambda, identity_grid: grid identity check of ``jets-verify`` (``0`` skips it).
        replicas: Monte Carlo paths (Galerkin energies, rough consistency).
        galerkin_n, galerkin_dt: resolution of the Galerkin reference.
        rough_steps: length of the rough self-test path.
        nl_K, nl_c0, nl_c1: nonlinear coefficient ``h(a) = c0 + c1 tanh(a)`` on the
            modes ``|k| <= nl_K`` (the first ``noise.m`` of them).
        rough_factor: driver steps per rough-solver step in the nonlinear regime.
        dump_fields: write WF1 dumps of the final velocity of every level.
    """

    steps: int = 1
    T: float = 1.0
    dt: float = 1.0 / 16
    residual_times: tuple[float, ...] = (0.05, 0.3, 0.71)
    fd_h: float | None = None
    lambdas: tuple[float, ...] = ()
    identity_lambda: float = 0.0
    identity_grid: int = 128
    replicas: int = 50
    galerkin_n: int = 32
    galerkin_dt: float = 1.0 / 128
    rough_steps: int = 256
    nl_K: float = 1.0
    nl_c0: float = 0.1
    nl_c1: float = 0.05
    rough_factor: int = 1
    dump_fields: bool = True


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    regime: str = "additive"
    seed: int = 0
    grid: int = 64
    output_dir: str = "runs"
    schedule: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    # -- derived, validated views

    def schedule_obj(self) -> eng.ParamSchedule:
        kw = {**self.schedule, "regime": self.regime}
        return eng.ParamSchedule(**kw)

    def noise_spec(self, kind: str | None = None) -> st.NoiseSpec:
        kw = {k: v for k, v in self.noise.items()}
        kw.setdefault("sigma", 0.0)
        kind = kind or self.regime
        return st.NoiseSpec(kind=kind, seed=self.seed, **kw)

    def options(self) -> RunOptions:
        kw = dict(self.run)
        for key in ("residual_times", "lambdas"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(float(x) for x in kw[key])
        return RunOptions(**kw)

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_keys(section: dict, cls, name: str) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    bad = set(section) - names
    if bad:
        raise ConfigError(f"unknown {name} keys: {', '.join(sorted(bad))}")


def validate(cfg: RunConfig) -> RunConfig:
    """Check every referenced parameter before any compute.

    Raises:
        ConfigError: describing the first problem found.
    """
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}; expected one of {EXPERIMENTS}")
    if cfg.regime not in eng.REGIMES:
        raise ConfigError(f"unknown regime {cfg.regime!r}")
    _check_keys(cfg.schedule, eng.ParamSchedule, "schedule")
    if "regime" in cfg.schedule:
        raise ConfigError("set the regime at the top level, not inside schedule")
    _check_keys(cfg.noise, st.NoiseSpec, "noise")
    if {"kind", "seed"} & set(cfg.noise):
        raise ConfigError("noise.kind and noise.seed follow regime and seed")
    _check_keys(cfg.run, RunOptions, "run")
    try:
        cfg.schedule_obj()
        cfg.noise_spec()
        opts = cfg.options()
        f3.Grid3(cfg.grid)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if opts.steps < 0 or opts.T <= 0 or opts.dt <= 0:
        raise ConfigError("need steps >= 0, T > 0 and dt > 0")
    if abs(opts.T / opts.dt - round(opts.T / opts.dt)) > 1e-9:
        raise ConfigError("run.T must be an integer multiple of run.dt")
    if any(not (0 <= t <= opts.T) for t in opts.residual_times):
        raise ConfigError("residual times must lie in [0, run.T]")
    if cfg.experiment in ("ci-run", "energy-compare") and cfg.regime == "multiplicative":
        if cfg.noise_spec().T < opts.T:
            raise ConfigError("noise.T must cover run.T")
    if cfg.regime == "nonlinear" and cfg.experiment in ("ci-run", "energy-compare"):
        spec = cfg.noise_spec()
        if spec.T < opts.T:
            raise ConfigError("noise.T must cover run.T")
        if spec.nsteps % opts.rough_factor:
            raise ConfigError("run.rough_factor must divide the number of noise steps")
        nb = len(st.ModalBasis.divergence_free(opts.nl_K))
        if spec.m > nb:
            raise ConfigError(f"noise.m = {spec.m} exceeds the {nb} modes with |k| <= {opts.nl_K}")
    return cfg


def _set_dotted(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | Path | None, overrides: tuple[str, ...] = (), experiment: str | None = None) -> RunConfig:
    """Read a YAML config, apply ``key=value`` overrides and validate."""
    tree: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError("config root must be a mapping")
    tree = copy.deepcopy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_dotted(tree, k.strip(), yaml.safe_load(v))
    if experiment is not None:
        if tree.get("experiment", experiment) != experiment:
            raise ConfigError(f"config is for {tree['experiment']!r}, not {experiment!r}")
        tree["experiment"] = experiment
    if "experiment" not in tree:
        raise ConfigError("missing experiment")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    bad = set(tree) - known
    if bad:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(bad))}")
    for sec in ("schedule", "noise", "run"):
        if tree.get(sec) is None:
            tree[sec] = {}
        elif not isinstance(tree[sec], dict):
            raise ConfigError(f"{sec} must be a mapping")
    try:
        cfg = RunConfig(**tree)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return validate(cfg)


# ---------------------------------------------------------------------------
# Output


def _fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class SummaryRow:
    name: str
    measured: float
    bound: float
    passed: bool
    note: str = ""

    @property
    def margin(self) -> float:
        return self.bound - self.measured


class Artifacts:
    """Writer for one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.output_dir) / cfg.experiment / cfg.hash
        self.dir.mkdir(parents=True, exist_ok=True)
        self.summary: list[SummaryRow] = []
        self._log = (self.dir / "run.log").open("a")
        self.header = f"# config-hash: {cfg.hash}\n"
        (self.dir / "config.yaml").write_text(self.header + yaml.safe_dump(self.cfg_tree(), sort_keys=True))

    def cfg_tree(self) -> dict:
        # the hashed view, so that the file does not depend on where the run is written
        return json.loads(json.dumps(self.cfg.canonical(), default=str))

    def note(self, msg: str) -> None:
        self._log.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")
        self._log.flush()
        log.info(msg)

    def table(self, name: str, columns: list[str], rows: list[tuple]) -> Path:
        path = self.dir / name
        lines = [self.header.rstrip("\n"), ",".join(columns)]
        lines += [",".join(_fmt(x) for x in r) for r in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    def plot(self, name: str, x, y) -> Path:
        path = self.dir / name
        body = "".join(f"{_fmt(float(a))} {_fmt(float(b))}\n" for a, b in zip(x, y))
        path.write_text(self.header + body)
        return path

    def check(self, name: str, measured: float, bound: float, passed: bool | None = None, note: str = "") -> SummaryRow:
        ok = bool(measured <= bound) if passed is None else bool(passed)
        row = SummaryRow(name, float(measured), float(bound), ok, note)
        self.summary.append(row)
        return row

    def finish(self) -> Path:
        rows = [(r.name, r.measured, r.bound, r.margin, r.passed, r.note) for r in self.summary]
        self.table("summary.csv", ["check", "measured", "bound", "margin", "pass", "note"], rows)
        doc = {
            "config_hash": self.cfg.hash,
            "experiment": self.cfg.experiment,
            "failures": sum(not r.passed for r in self.summary),
            "checks": [dict(name=r.name, measured=r.measured, bound=r.bound, margin=r.margin,
                            passed=r.passed, note=r.note) for r in self.summary],
        }
        (self.dir / "summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        self._log.close()
        return self.dir


# ---------------------------------------------------------------------------
# Pipelines


def _levels(cfg: RunConfig, art: Artifacts | None = None) -> tuple[list[eng.IterationState], dict]:
    """Start pair plus ``run.steps`` convex-integration steps with the configured noise."""
    sch = cfg.schedule_obj()
    opts = cfg.options()
    grid = f3.Grid3(cfg.grid)
    times = eng.uniform_times(opts.T, opts.dt)
    if sch.mode == "toy":
        for q in range(opts.steps + 1):
            fe, fr = sch.f_exact(q), sch.f(q)
            if fe != fr and art is not None:
                art.note(f"rounded f({q}) from {fe!r} to {fr!r}")
    extra: dict = {}
    rpde = None
    if cfg.regime == "additive":
        spec = cfg.noise_spec()
        z_full = None
        if spec.sigma != 0:
            z_full = st.stochastic_convolution(st.sample_wiener(spec))
            extra["z_full"] = z_full
        state = eng.start_pair(sch, grid, times, z_full=z_full)
    elif cfg.regime == "multiplicative":
        spec = cfg.noise_spec()
        driver = st.sample_wiener(spec)
        extra["driver"] = driver
        state = eng.start_pair(sch, grid, times, driver=driver)
    else:
        spec = cfg.noise_spec()
        basis = st.ModalBasis.divergence_free(opts.nl_K)
        sub, G = rp.modal_g_from_basis(basis, range(spec.m), opts.nl_c0, opts.nl_c1)
        drv = rp.ito_lift(st.sample_wiener(spec))
        if opts.rough_factor > 1:
            drv = drv.coarsen(opts.rough_factor)
        v_only = eng.start_pair(sch, grid, times)
        z0 = rp.nonlinear_noise(v_only, sub, G, drv)
        state = eng.start_pair(sch, grid, times, z_full=z0)

        def rpde(s):
            return rp.nonlinear_noise(s, sub, G, drv)

        extra.update(G=G, basis=sub, rough_driver=drv)
    levels = [state]
    for _ in range(opts.steps):
        levels.append(eng.ci_step(levels[-1], rpde=rpde))
    return levels, extra


def run_ci(cfg: RunConfig, art: Artifacts) -> None:
    opts = cfg.options()
    levels, _ = _levels(cfg, art)
    sch = levels[0].schedule
    g = levels[0].grid
    times = levels[0].times
    bound_rows, res_rows, id_rows, term_rows, norm_rows, dump_rows = [], [], [], [], [], []
    r_norms = []
    for state in levels:
        q = state.q
        art.note(f"level {q}: evaluating bounds on {len(times)} times")
        prev = levels[q - 1] if q > 0 else None
        rows = eng.check_inductive_bounds(state, times, prev=prev)
        for b in rows:
            bound_rows.append((q, b.t, b.name, b.measured, b.allowed, b.passed))
        l2 = [float(f3.lp_norm_values(g, state.v(float(t)), 2)) for t in times]
        r1 = [float(f3.lp_norm_values(g, state.R(float(t)), 1)) for t in times]
        r_norms.append(max(r1))
        for t, a, b in zip(times, l2, r1):
            norm_rows.append((f"v_{q}(t={float(t)!r})", "L2", a))
            norm_rows.append((f"R_{q}(t={float(t)!r})", "L1", b))
        art.plot(f"v_L2_q{q}.dat", times, l2)
        art.plot(f"R_L1_q{q}.dat", times, r1)
        res = eng.residual_check(state, np.asarray(opts.residual_times))
        for t, v, s in zip(res.times, res.values, res.scales):
            res_rows.append((q, float(t), v, s, v / s))
        tol = 1e-9
        art.check(f"residual q={q}", res.max, tol)
        if q > 0:
            for t in opts.residual_times:
                ids = eng.step_identities(state, float(t))
                for k, v in ids.items():
                    id_rows.append((q, float(t), k, v))
            worst = {k: max(r[3] for r in id_rows if r[0] == q and r[2] == k) for k in ("cancellation", "oscillation")}
            art.check(f"cancellation q={q}", worst["cancellation"], 1e-8)
            art.check(f"oscillation q={q}", worst["oscillation"], 1e-8)
            divs = max(r[3] for r in id_rows if r[0] == q and r[2] in ("div_v", "mean_w"))
            art.check(f"div v / mean w q={q}", divs, 1e-10)
            for name, val in eng.term_norms(state, times).items():
                term_rows.append((q, name, val))
            if opts.fd_h:
                conv = eng.residual_convergence(state, np.asarray(opts.residual_times), opts.fd_h)
                art.check(f"residual order q={q}", -conv["order"], -1.95,
                          note="ratios " + " ".join(f"{r:.4g}" for r in conv["ratios"]))
        fails = [b for b in rows if not b.passed]
        worst_b = max((b.ratio for b in rows), default=0.0)
        art.check(f"inductive bounds q={q}", worst_b, 1.0,
                  note=f"{len(fails)} of {len(rows)} rows exceed their envelope" if fails else "")
        if opts.dump_fields:
            # WF1 has a fixed header line, so the config hash travels in the manifest
            name = f"v_q{q}_T.wf1"
            with (art.dir / name).open("wb") as fh:
                f3.dump_wf1(state.v(float(times[-1])), fh, g)
            dump_rows.append((name, f"v_{q}", float(times[-1]), 1, g.n))
    for q in range(1, len(levels)):
        ratio = r_norms[q] / r_norms[q - 1]
        art.check(f"Reynolds ratio q={q}", ratio, 0.5, note=f"||R_{q}|| = {r_norms[q]!r}, ||R_{q-1}|| = {r_norms[q-1]!r}")
    art.table("bounds.csv", ["q", "t", "norm", "value", "bound", "pass"], bound_rows)
    art.table("norms.csv", ["quantity", "kind", "value"], norm_rows)
    if dump_rows:
        art.table("fields.csv", ["file", "field", "t", "rank", "n"], dump_rows)
    art.table("residuals.csv", ["q", "t", "residual", "scale", "relative"], res_rows)
    art.table("identities.csv", ["q", "t", "identity", "value"], id_rows)
    art.table("reynolds_terms.csv", ["q", "term", "CtL1"], term_rows)
    adm = sch.admissibility()
    art.table("admissibility.csv", ["name", "q", "lhs", "rhs", "holds", "note"],
              [(c.name, c.q, c.lhs, c.rhs, c.holds, c.note) for c in adm])


def run_jets(cfg: RunConfig, art: Artifacts) -> None:
    opts = cfg.options()
    table = jets.verify_jet_bounds(list(opts.lambdas), regime=cfg.regime if cfg.regime != "nonlinear" else "additive") \
        if opts.lambdas else jets.BoundTable([], {})
    art.table("bounds.csv", ["lambda", "quantity", "measured", "theory", "ratio"],
              [(r["lam"], r["quantity"], r["measured"], r["theory"], r["ratio"]) for r in table.rows])
    art.table("slopes.csv", ["quantity", "slope"], sorted(table.slopes.items()))
    for qname, s in sorted(table.slopes.items()):
        art.check(f"slope {qname}", abs(s), 0.1)
        sel = [r for r in table.rows if r["quantity"] == qname]
        safe = qname.replace("[", "_").replace("]", "").replace(",", "_").replace("=", "").replace("^", "")
        art.plot(f"ratio_{safe}.dat", [r["lam"] for r in sel], [r["ratio"] for r in sel])
    if opts.identity_lambda:
        params = jets.JetParams.from_lambda(opts.identity_lambda, cfg.regime if cfg.regime != "nonlinear" else "additive")
        fam = jets.build_jet_family(params)
        ids = jets.check_jet_identities(fam, f3.Grid3(opts.identity_grid))
        art.table("identities.csv", ["identity", "value"], sorted(ids.items()))
        art.check("div(W + W_c)", ids["div_rel"], 1e-10)
        art.check("W_xi (x) W_xi' disjoint", ids["cross_sup"], 1e-12)
        art.check("mean W (x) W", ids["mean_err_continuum"], 1e-8)
        norms = jets.profile_normalizations(jets.build_profiles())
        art.table("normalizations.csv", ["name", "value"], sorted(norms.items()))


def run_rough(cfg: RunConfig, art: Artifacts) -> None:
    opts = cfg.options()
    rows = rp.selftest(seed=cfg.seed, steps=opts.rough_steps)
    for name, measured, tol, ok in rows:
        art.check(name, measured if name != "sewing-rate" else -measured, tol if name != "sewing-rate" else 0.0,
                  passed=ok, note="fitted rate" if name == "sewing-rate" else "")
    art.table("selftest.csv", ["check", "measured", "tolerance", "pass"], rows)
    spec = st.NoiseSpec(kind="nonlinear", sigma=1.0, m=2, dt=1.0 / 64, T=1.0, seed=cfg.seed)
    G = rp.ModalG(np.eye(2), np.eye(2), rp.tanh_coefficient(np.array([1.0, 0.8]), np.array([0.5, -0.4])))
    rep = rp.ito_consistency_check(spec, G, np.array([1.0, 2.0]), replicas=opts.replicas)
    art.table("consistency.csv", ["h", "median_discrepancy"], list(zip(rep.steps, rep.medians)))
    art.plot("consistency.dat", rep.steps, rep.medians)
    art.check("EM median discrepancy monotone", 0.0 if rep.monotone else 1.0, 0.0, passed=rep.monotone,
              note="medians " + " ".join(f"{m:.4g}" for m in rep.medians) + f"; rate {rep.rate:.3g}")


def run_energy(cfg: RunConfig, art: Artifacts) -> None:
    opts = cfg.options()
    levels, _ = _levels(cfg, art)
    last = levels[-1]
    sch = last.schedule
    times = last.times
    g = last.grid
    l2 = np.array([float(f3.lp_norm_values(g, last.v(float(t)), 2)) for t in times])
    T = float(times[-1])
    v0 = float(l2[0])
    target = (v0 + sch.L) * np.exp(sch.L * T)
    art.plot("energy_ci.dat", times, l2**2)
    art.check("energy contrast", -l2[-1], -target * 0.5,
              note=f"||v(T)|| = {l2[-1]!r}, (||v(0)|| + L) e^(LT) = {target!r}")
    art.check("M0 envelope margin", l2[-1] / np.sqrt(sch.M0(T)), np.inf, passed=True,
              note="||v(T)|| / M0(T)^(1/2)")
    gkind = "multiplicative" if cfg.regime == "multiplicative" else "additive"
    spec = cfg.noise_spec(gkind)
    if spec.T != opts.T:
        spec = dataclasses.replace(spec, T=opts.T)
    gg = f3.Grid3(opts.galerkin_n)
    u0 = eng.start_pair(sch, gg, times, driver=None if gkind == "additive" else st.sample_wiener(spec)).v(0.0)
    res = st.galerkin_reference(spec, u0, n=opts.galerkin_n, dt=opts.galerkin_dt, replicas=opts.replicas)
    lo, hi = res.ci
    art.plot("energy_galerkin_mean.dat", res.times, res.mean)
    art.plot("energy_galerkin_lo.dat", res.times, lo)
    art.plot("energy_galerkin_hi.dat", res.times, hi)
    art.plot("energy_galerkin_bound.dat", res.times, res.bound)
    art.table("galerkin.csv", ["t", "mean", "ci_lo", "ci_hi", "bound", "pass"], res.summary_rows())
    art.check("Galerkin energy inequality", float(np.max(lo - res.bound)), 0.0, passed=res.passes())
    art.check("energy gap", float(res.mean[-1] - l2[-1] ** 2), 0.0,
              note="Galerkin mean energy minus convex-integration energy at T")


PIPELINES: dict[str, Callable[[RunConfig, Artifacts], None]] = {
    "ci-run": run_ci,
    "jets-verify": run_jets,
    "rough-selftest": run_rough,
    "energy-compare": run_energy,
}


def run_experiment(cfg: RunConfig) -> Path:
    """Run the configured experiment and return its artifact directory."""
    art = Artifacts(cfg)
    art.note(f"start {cfg.experiment} hash={cfg.hash}")
    PIPELINES[cfg.experiment](cfg, art)
    art.note(f"done, {sum(not r.passed for r in art.summary)} failed checks")
    return art.finish()


def _print_summary(path: Path) -> None:
    doc = json.loads((path / "summary.json").read_text())
    for c in doc["checks"]:
        flag = "PASS" if c["passed"] else "FAIL"
        click.echo(f"{flag}  {c['name']}: {c['measured']:.6g} (bound {c['bound']:.6g}) {c['note']}")
    click.echo(f"{doc['failures']} failed; artifacts in {path}")


def _invoke(experiment: str, config: str | None, overrides: tuple[str, ...]) -> None:
    try:
        cfg = load_config(config, overrides, experiment)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    try:
        path = run_experiment(cfg)
    except Exception as exc:  # compute failures map to exit code 1
        click.echo(f"run failed: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    _print_summary(path)


_config_opt = click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML run config.")
_set_opt = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config entry.")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """wildflow experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.group("jets")
def jets_group() -> None:
    """Intermittent jet checks."""


@jets_group.command("verify")
@_config_opt
@_set_opt
def jets_verify(config, overrides):
    """Scaling sweep and grid identities of the jets."""
    _invoke("jets-verify", config, overrides)


@main.group("ci")
def ci_group() -> None:
    """Convex-integration runs."""


@ci_group.command("run")
@_config_opt
@_set_opt
def ci_run(config, overrides):
    """Start pair plus convex-integration steps with residuals and bounds."""
    _invoke("ci-run", config, overrides)


@main.group("rough")
def rough_group() -> None:
    """Rough-path checks."""


@rough_group.command("selftest")
@_config_opt
@_set_opt
def rough_selftest(config, overrides):
    """Chen relation, sewing, Ito identity and Euler-Maruyama consistency."""
    _invoke("rough-selftest", config, overrides)


@main.group("energy")
def energy_group() -> None:
    """Energy comparisons."""


@energy_group.command("compare")
@_config_opt
@_set_opt
def energy_compare(config, overrides):
    """Convex-integration energy against the Galerkin Monte Carlo mean."""
    _invoke("energy-compare", config, overrides)


if __name__ == "__main__":
    main()
