"""Config-driven experiment runner.

    pdmp <simulate|couple|order-sweep|moments|bias> --config run.toml [--seed N] [--workers K] [--out DIR]

Every run writes its CSV tables, the resolved configuration and a manifest
into the output directory. Exit codes: 0 success, 2 configuration error,
3 acceptance tolerance failure, 4 simulation error.
"""

import argparse
import copy
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .core import simulate_exact
from .diagnostics import (STATISTICS, Curve, fit_loglog_order, gaussian_truth,
                          lyapunov_moment_trace, replica_map, stationary_bias_curve, tv_indicator_curve,
                          wasserstein_proxy_curve, weak_error_sweep)
from .couplings import run_coupled
from .errors import ConfigError, InsufficientSignal, InvalidConfig, PdmpError
from .models import (BpsModel, GaussianPotential, LogisticRegressionPotential, MorrisLecarModel, RhmcModel,
                     TelegraphModel, ZzsModel, ZzsSubsamplingModel, custom_psi_exponent, lyapunov_bps,
                     lyapunov_zzs, synthetic_logistic_data)
from .rng import Streams
from .schemes import RATE_VARIANTS, FlowApprox, SchemeConfig, rate_approx, simulate_scheme

EXIT_OK, EXIT_CONFIG, EXIT_TOLERANCE, EXIT_RUNTIME = 0, 2, 3, 4

DEFAULTS = {
    "model": {
        "name": "zzs", "dim": 1, "target": "gaussian", "precision": 1.0, "mean": 0.0,
        "rate_style": "positive_part", "gamma": 0.0, "rate": 1.0, "refresh_rate": 1.0,
        "refresh_law": "gaussian", "data_size": 50, "data_seed": 0, "prior_precision": 1.0,
        "params": {},
    },
    "scheme": {
        "scheme": "PD", "rate": "frozen", "integrator": "exact", "delta": 0.1, "deltas": [],
        "T": 1.0, "p": 1,
    },
    "run": {"replicas": 100, "seed": 0, "workers": None, "block": 4096, "initial": "origin"},
    "output": {"directory": "out", "formats": ["csv"]},
    "couple": {"coupling": "wasserstein", "norm": "l1"},
    "sweep": {
        "test_function": "x", "reference": "analytic", "method": "plain", "expected_order": 1.0,
        "tolerance": 0.3,
    },
    "moments": {"lyapunov": "zzs_alpha_eps", "alpha": None, "epsilon": None, "beta": None},
    "bias": {"statistic": ["mean1", "radius"], "burn_in": 0.2, "truth": None, "exact": True},
}

MODELS = ("zzs", "bps", "telegraph", "rhmc", "zzs_subsampling", "morris_lecar")
SCHEMES = ("exact", "FD", "PD", "order_p")
INTEGRATORS = ("exact", "euler", "leapfrog")
INITIALS = ("origin", "stationary", "shifted")
COUPLINGS = ("wasserstein", "tv", "higher_order", "subsampling")
LYAPUNOV = ("zzs_alpha_eps", "bps", "custom_psi_exponent")
TEST_FUNCTIONS = {"x": lambda z: z[:, 0], "x2": lambda z: z[:, 0] ** 2, "one": lambda z: np.ones(len(z))}


# ------------------------------------------------------------------ config


def _fail(key, msg):
    raise ConfigError(f"{key}: {msg}")


def load_config(path):
    """Parse a TOML file and merge it over the defaults, rejecting unknown keys."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return resolve_config(raw)


def resolve_config(raw):
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in cfg:
            _fail(section, "unknown section")
        if not isinstance(body, dict):
            _fail(section, "expected a table")
        for key, value in body.items():
            if key not in cfg[section]:
                _fail(f"{section}.{key}", "unknown key")
            cfg[section][key] = value
    _validate(cfg)
    return cfg


def _choice(cfg, section, key, options):
    if cfg[section][key] not in options:
        _fail(f"{section}.{key}", f"{cfg[section][key]!r} is not one of {list(options)}")


def _positive(cfg, section, key, integer=False):
    v = cfg[section][key]
    kind = int if integer else (int, float)
    if isinstance(v, bool) or not isinstance(v, kind) or v <= 0:
        _fail(f"{section}.{key}", f"expected a positive {'integer' if integer else 'number'}, got {v!r}")


def _validate(cfg):
    _choice(cfg, "model", "name", MODELS)
    _positive(cfg, "model", "dim", integer=True)
    _choice(cfg, "model", "rate_style", ("positive_part", "smooth"))
    _choice(cfg, "model", "refresh_law", ("gaussian", "sphere"))
    _choice(cfg, "model", "target", ("gaussian", "logistic"))
    _choice(cfg, "scheme", "scheme", SCHEMES)
    _choice(cfg, "scheme", "rate", tuple(RATE_VARIANTS))
    _choice(cfg, "scheme", "integrator", INTEGRATORS)
    _positive(cfg, "scheme", "T")
    _positive(cfg, "scheme", "delta")
    _positive(cfg, "scheme", "p", integer=True)
    _positive(cfg, "run", "replicas", integer=True)
    if cfg["run"]["workers"] is not None:
        _positive(cfg, "run", "workers", integer=True)
    _positive(cfg, "run", "block", integer=True)
    init = cfg["run"]["initial"]
    if not isinstance(init, list) and init not in INITIALS:
        _fail("run.initial", f"expected a state list or one of {list(INITIALS)}")
    _choice(cfg, "couple", "coupling", COUPLINGS)
    _choice(cfg, "couple", "norm", ("l1", "l2"))
    _choice(cfg, "sweep", "test_function", tuple(TEST_FUNCTIONS))
    _choice(cfg, "sweep", "method", ("plain", "coupled"))
    ref = cfg["sweep"]["reference"]
    if not isinstance(ref, (int, float)) and ref not in ("analytic", "pde", "fine"):
        _fail("sweep.reference", "expected a number or one of ['analytic', 'pde', 'fine']")
    _choice(cfg, "moments", "lyapunov", LYAPUNOV)
    stats_ = cfg["bias"]["statistic"]
    for s in ([stats_] if isinstance(stats_, str) else stats_):
        if s not in STATISTICS:
            _fail("bias.statistic", f"unknown statistic {s!r}; choose from {sorted(STATISTICS)}")
    if cfg["scheme"]["scheme"] != "order_p" and cfg["scheme"]["p"] != 1:
        _fail("scheme.p", "only the order_p scheme takes p > 1")


def _clean(obj):
    """Drop ``None`` values, which TOML cannot represent."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items() if v is not None}
    return obj


# ------------------------------------------------------------------ builders


def build_model(mc):
    name, d = mc["name"], int(mc["dim"])
    if name == "telegraph":
        return TelegraphModel(float(mc["rate"]))
    if name == "morris_lecar":
        try:
            return MorrisLecarModel(**mc["params"])
        except (TypeError, ValueError) as exc:
            _fail("model.params", str(exc))
    if mc["target"] == "logistic" or name == "zzs_subsampling":
        X, y, _ = synthetic_logistic_data(int(mc["data_size"]), d, seed=int(mc["data_seed"]))
        pot = LogisticRegressionPotential(X, y, float(mc["prior_precision"]))
    else:
        pot = GaussianPotential(d, np.asarray(mc["precision"], float), np.asarray(mc["mean"], float))
    if name == "zzs":
        return ZzsModel(pot, gamma=float(mc["gamma"]), rate_style=mc["rate_style"])
    if name == "bps":
        return BpsModel(pot, float(mc["refresh_rate"]), mc["refresh_law"])
    if name == "rhmc":
        return RhmcModel(pot, float(mc["refresh_rate"]))
    return ZzsSubsamplingModel(pot)


def build_scheme(sc, delta=None):
    scheme = sc["scheme"]
    if scheme == "exact":
        _fail("scheme.scheme", "this command needs a discretisation scheme, not 'exact'")
    flow = FlowApprox(sc["integrator"]) if sc["integrator"] != "exact" else None
    return SchemeConfig(scheme=scheme, rate_approx=rate_approx(sc["rate"]), flow_approx=flow,
                        delta=float(sc["delta"] if delta is None else delta), T=float(sc["T"]),
                        p=int(sc["p"]))


def build_initial(cfg, model, pdmp):
    init = cfg["run"]["initial"]
    if isinstance(init, list):
        z = np.asarray(init, dtype=float)
        if z.shape != (pdmp.dim,):
            _fail("run.initial", f"expected {pdmp.dim} numbers")
        return z
    d = pdmp.npos
    velocity = getattr(model, "stationary_velocity", None)
    if velocity is None:
        _fail("run.initial", f"model {pdmp.name} needs an explicit initial state")
    if init == "origin":
        return lambda gen, n: np.concatenate([np.zeros((n, d)), velocity(gen, n)], axis=1)
    if init == "stationary":
        return lambda gen, n: np.concatenate([gen.standard_normal((n, d)), velocity(gen, n)], axis=1)
    # shifted: x ~ N(0, I) + U[0, 1]^d
    return lambda gen, n: np.concatenate([gen.standard_normal((n, d)) + gen.random((n, d)),
                                          velocity(gen, n)], axis=1)


# ------------------------------------------------------------------- output


def fmt(x):
    if isinstance(x, (str, np.str_)):
        return str(x)
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command, cfg, out):
        self.command = command
        self.cfg = cfg
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.started = time.time()
        self.extra = {}

    def csv(self, name, header, rows):
        write_csv(self.dir / name, header, rows)
        self.files.append(name)

    def finish(self, status):
        with open(self.dir / "resolved-config.toml", "wb") as fh:
            tomli_w.dump(_clean(self.cfg), fh)
        manifest = {
            "artifact": "pdmpsim",
            "version": __version__,
            "command": self.command,
            "status": status,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(self.started)),
            "wall_seconds": round(time.time() - self.started, 3),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "files": self.files,
            **self.extra,
        }
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, default=str)
            fh.write("\n")


def _state_header(pdmp):
    d = pdmp.npos
    if pdmp.dim == 2 * d:
        names = [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
        if d == 1:
            names = ["x", "v"]
        return names
    return [f"z{i + 1}" for i in range(pdmp.dim)]


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg, run):
    model = build_model(cfg["model"])
    pdmp = model.to_pdmp()
    sc = cfg["scheme"]
    reps, seed = cfg["run"]["replicas"], cfg["run"]["seed"]
    init = build_initial(cfg, model, pdmp)
    streams = Streams(seed)
    header = ["t"] + _state_header(pdmp) + ["event_flag", "kernel"]
    width = len(str(reps - 1))
    if sc["scheme"] == "exact":
        for r in range(reps):
            st = streams.block(r)
            z0 = init(st["init"], 1)[0] if callable(init) else init
            path = simulate_exact(pdmp, z0, float(sc["T"]), st)
            rows = [[0.0, *path.initial_state, 0, -1]]
            for t, z, k in zip(path.event_times, path.post_jump_states, path.kernel_indices):
                rows.append([t, *z, 1, k])
            rows.append([path.terminal_time, *path.terminal_state, 0, -1])
            run.csv(f"trajectory_{r:0{width}d}.csv", header, rows)
        return EXIT_OK
    scfg = build_scheme(sc)

    def task(n, st):
        z = init(st["init"], n) if callable(init) else np.tile(init, (n, 1))
        path = simulate_scheme(scfg, pdmp, z, st)
        states = np.transpose(np.array(path.states), (1, 0, 2))
        return states, path.n_events.T, path.event_kernel.T

    states, nev, ker = replica_map(task, reps, streams, cfg["run"]["block"], cfg["run"]["workers"])
    times = scfg.mesh_times()
    header = ["n"] + header
    for r in range(reps):
        rows = [[0, 0.0, *states[r, 0], 0, -1]]
        for n in range(1, len(times)):
            rows.append([n, times[n], *states[r, n], int(nev[r, n - 1]), int(ker[r, n - 1])])
        run.csv(f"trajectory_{r:0{width}d}.csv", header, rows)
    return EXIT_OK


def cmd_couple(cfg, run):
    model = build_model(cfg["model"])
    pdmp = model.to_pdmp()
    scfg = build_scheme(cfg["scheme"])
    init = build_initial(cfg, model, pdmp)
    rc, cc = cfg["run"], cfg["couple"]
    kind = cc["coupling"]
    if kind == "wasserstein":
        curve = wasserstein_proxy_curve(pdmp, scfg, init, None, rc["replicas"], Streams(rc["seed"]),
                                        norm=cc["norm"], block=rc["block"], workers=rc["workers"])
        run.csv("couple.csv", ["t_n", "mean_dist", "stderr"], zip(curve.times, curve.mean, curve.stderr))
        return EXIT_OK
    if kind in ("tv", "higher_order"):
        if kind == "higher_order" and scfg.scheme != "order_p":
            _fail("couple.coupling", "higher_order needs scheme.scheme = 'order_p'")
        curve = tv_indicator_curve(pdmp, scfg, init, None, rc["replicas"], Streams(rc["seed"]),
                                   block=rc["block"], workers=rc["workers"])
    else:
        if not isinstance(model, ZzsSubsamplingModel):
            _fail("couple.coupling", "the subsampling coupling needs model.name = 'zzs_subsampling'")

        def task(n, st):
            z = init(st["init"], n) if callable(init) else np.tile(init, (n, 1))
            return ~run_coupled(pdmp, scfg, z, st, kind="subsampling", model=model,
                                keep_states=False).equality_flag.T

        neq = replica_map(task, rc["replicas"], Streams(rc["seed"]), rc["block"], rc["workers"])
        p = neq.mean(axis=0)
        curve = Curve(scfg.mesh_times(), p, np.sqrt(p * (1 - p) / rc["replicas"]))
    run.csv("couple.csv", ["t_n", "p_neq", "stderr"], zip(curve.times, curve.mean, curve.stderr))
    return EXIT_OK


def _analytic_reference(model, pdmp, z0, T, gname):
    if isinstance(model, TelegraphModel) and gname == "x" and not callable(z0):
        return float(model.mean_position(T, z0[0], z0[1]))
    if gname == "one":
        return 1.0
    raise ConfigError("sweep.reference: no analytic value for this model and test function; "
                      "use 'pde', 'fine' or a number")


def cmd_order_sweep(cfg, run):
    model = build_model(cfg["model"])
    pdmp = model.to_pdmp()
    sc, sw, rc = cfg["scheme"], cfg["sweep"], cfg["run"]
    deltas = [float(d) for d in sc["deltas"]]
    if len(deltas) < 3:
        _fail("scheme.deltas", "an order sweep needs at least 3 step sizes")
    if max(deltas) / min(deltas) < 4.0:
        _fail("scheme.deltas", "step sizes must span at least a factor of 4")
    cfgs = [build_scheme(sc, d) for d in deltas]
    init = build_initial(cfg, model, pdmp)
    g = TEST_FUNCTIONS[sw["test_function"]]
    ref = sw["reference"]
    if sw["method"] == "plain" and ref == "analytic":
        ref = _analytic_reference(model, pdmp, init, float(sc["T"]), sw["test_function"])
    res = weak_error_sweep(pdmp, cfgs, g, float(sc["T"]), rc["replicas"], Streams(rc["seed"]), init,
                           reference=ref, method=sw["method"], block=rc["block"], workers=rc["workers"],
                           fit=False)
    rows = [[d, e, s] for d, e, s in zip(res.deltas, res.errors, res.stderrs)]
    try:
        fit = fit_loglog_order(res.deltas, res.errors, res.stderrs)
    except InsufficientSignal as exc:
        rows.append(["slope", float("nan"), float("nan")])
        run.csv("sweep.csv", ["delta", "error", "stderr"], rows)
        run.extra["report"] = f"insufficient signal: {exc}"
        print(f"order sweep: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    rows.append(["slope", fit.slope, fit.slope_stderr])
    run.csv("sweep.csv", ["delta", "error", "stderr"], rows)
    lo, hi = sw["expected_order"] - sw["tolerance"], sw["expected_order"] + sw["tolerance"]
    ok = lo <= fit.slope <= hi
    report = (f"slope {fit.slope:.4f} (CI {fit.ci_low:.3f}..{fit.ci_high:.3f}), "
              f"required [{lo:.3f}, {hi:.3f}]: {'PASS' if ok else 'FAIL'}")
    run.extra["report"] = report
    run.extra["reference"] = {"kind": res.reference_kind, "value": res.reference}
    print(report, file=sys.stderr)
    return EXIT_OK if ok else EXIT_TOLERANCE


def build_lyapunov(cfg, model, pdmp):
    mc = cfg["moments"]
    pot = getattr(model, "potential", None)
    name = mc["lyapunov"]
    if name == "zzs_alpha_eps":
        if mc["alpha"] is None or mc["epsilon"] is None:
            _fail("moments.alpha", "zzs_alpha_eps needs moments.alpha and moments.epsilon")
        a, e = float(mc["alpha"]), float(mc["epsilon"])
        return lambda z: lyapunov_zzs(a, e, z, pot)
    if name == "bps":
        lam = float(cfg["model"]["refresh_rate"])
        return lambda z: lyapunov_bps(z, lam, pot)
    if mc["beta"] is None:
        _fail("moments.beta", "custom_psi_exponent needs moments.beta")
    b = float(mc["beta"])
    return lambda z: custom_psi_exponent(b, z, pot)


def cmd_moments(cfg, run):
    model = build_model(cfg["model"])
    pdmp = model.to_pdmp()
    G = build_lyapunov(cfg, model, pdmp)
    scfg = build_scheme(cfg["scheme"])
    init = build_initial(cfg, model, pdmp)
    rc = cfg["run"]
    try:
        G(np.atleast_2d(init(np.random.default_rng(0), 1) if callable(init) else init))
    except ValueError as exc:
        raise ConfigError(f"moments: {exc}") from None
    tr = lyapunov_moment_trace(pdmp, scfg, G, init, None, rc["replicas"], Streams(rc["seed"]),
                               block=rc["block"], workers=rc["workers"])
    run.csv("moments.csv", ["t", "G_exact", "se_exact", "G_scheme", "se_scheme"],
            zip(tr.times, tr.exact_mean, tr.exact_stderr, tr.scheme_mean, tr.scheme_stderr))
    run.extra["sup"] = {"exact": tr.sup_exact, "scheme": tr.sup_scheme}
    return EXIT_OK


def cmd_bias(cfg, run):
    model = build_model(cfg["model"])
    pdmp = model.to_pdmp()
    scfg = build_scheme(cfg["scheme"])
    init = build_initial(cfg, model, pdmp)
    rc, bc = cfg["run"], cfg["bias"]
    names = [bc["statistic"]] if isinstance(bc["statistic"], str) else list(bc["statistic"])
    pot = getattr(model, "potential", None)
    header, cols, truths = ["t"], [], {}
    for name in names:
        if bc["truth"] is not None:
            truth = bc["truth"][name] if isinstance(bc["truth"], dict) else bc["truth"]
        elif isinstance(pot, GaussianPotential):
            truth = gaussian_truth(pot, name)
        else:
            _fail("bias.truth", f"no stationary value known for {name!r} on this target")
        tr = stationary_bias_curve(pdmp, scfg, name, None, rc["replicas"], Streams(rc["seed"]), init=init,
                                   truth=float(truth), burn_in=float(bc["burn_in"]), exact=bool(bc["exact"]),
                                   block=rc["block"], workers=rc["workers"])
        truths[name] = tr.truth
        header += [f"{name}_exact", f"{name}_exact_se", f"{name}_scheme", f"{name}_scheme_se"]
        cols += [tr.exact_error, tr.exact_stderr, tr.scheme_error, tr.scheme_stderr]
        times = tr.times
    run.csv("bias.csv", header, zip(times, *cols))
    run.extra["truth"] = truths
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "order-sweep": cmd_order_sweep,
    "moments": cmd_moments,
    "bias": cmd_bias,
}


def make_parser():
    parser = argparse.ArgumentParser(prog="pdmp", description="PDMP simulation and discretisation experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML experiment configuration")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--workers", type=int, help="override run.workers (default: PDMP_WORKERS or 1)")
    parser.add_argument("--out", help="override output.directory")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.workers is not None:
            cfg["run"]["workers"] = args.workers
        elif cfg["run"]["workers"] is None:
            try:
                cfg["run"]["workers"] = int(os.environ.get("PDMP_WORKERS", "1"))
            except ValueError:
                raise ConfigError("PDMP_WORKERS must be an integer") from None
        if args.out is not None:
            cfg["output"]["directory"] = args.out
        if cfg["run"]["workers"] < 1:
            _fail("run.workers", "must be at least 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(args.command, cfg, cfg["output"]["directory"])
    try:
        code = COMMANDS[args.command](cfg, run)
    except (ConfigError, InvalidConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        run.finish("config-error")
        return EXIT_CONFIG
    except PdmpError as exc:
        print(f"simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.finish("runtime-error")
        return EXIT_RUNTIME
    run.finish("ok" if code == EXIT_OK else "tolerance-failure")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
