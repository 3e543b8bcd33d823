"""Experiment driver: seeded trial grids, aggregation, CSV/plot export.

Cells of a sweep are laid out as the cartesian product of the axis lists;
every (cell, trial) pair derives its own seed from the sweep base seed, so
scheduling order (serial or parallel) cannot change any result.
"""

from __future__ import annotations

import concurrent.futures
import itertools
import json
import time
from dataclasses import dataclass, field, asdict

import click
import numpy as np

from . import channels as ch
from . import em as em_mod
from . import problems, solver

__all__ = ["SweepSpec", "run_sweep", "emit_csv", "emit_phaseplot", "main"]

CSV_COLUMNS = ["trials", "success_rate", "median_nmse_b_db", "median_nmse_c_db",
               "median_lifted_nmse_db", "ser", "mean_iters", "mean_seconds",
               "counting_bound_feasible"]


@dataclass
class SweepSpec:
    family: str
    axes: dict                          # axis name -> list of values, insertion order
    trials: int = 1
    seed_base: int = 0
    threshold_db: float = -60.0
    em: bool = False
    restarts: int = 1
    solver_overrides: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    threads: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ValueError("sweep grid must be nonempty")


def _trial_seed(seed_base, cell_idx, trial_idx):
    ss = np.random.SeedSequence([int(seed_base), int(cell_idx), int(trial_idx)])
    return int(ss.generate_state(1)[0])


def _make_instance(family, params, seed):
    if family == "iid":
        k = params.get("K")
        return problems.gen_iid(Nb=params.get("Nb", 100), Nc=params.get("Nc", 100),
                                M=params["M"], K_b=params.get("K_b", k),
                                K_c=params.get("K_c", k), seed=seed,
                                snr_db=params.get("snr_db"))
    if family == "self_calibration":
        return problems.gen_self_calibration(Nb=params["Nb"], K=params["K"], seed=seed,
                                             Nc=params.get("Nc", 256), M=params.get("M", 128))
    if family == "matrix_uncertainty":
        return problems.gen_matrix_uncertainty(M=params["M"], seed=seed,
                                               Nc=params.get("Nc", 256),
                                               K=params.get("K", 10),
                                               Nb=params.get("Nb", 10),
                                               snr_db=params.get("snr_db", 40.0))
    if family == "blind_deconv":
        return problems.gen_blind_deconv(seed=seed, Np=params.get("Np", 256),
                                         Ng=params.get("Ng", 64), Nb=params.get("Nb", 63),
                                         L=params.get("L", 3),
                                         alphabet=params.get("alphabet", "qpsk"),
                                         snr_db=params.get("snr_db", 30.0))
    if family == "matrix_cs":
        return problems.gen_matrix_cs(R=params["R"], xi=params["xi"], M=params["M"],
                                      seed=seed, rows=params.get("rows", 100),
                                      cols=params.get("cols", 100),
                                      K_phi=params.get("K_phi", 50),
                                      snr_db=params.get("snr_db"))
    raise ValueError(f"unknown family {family!r}")


def _em_setup(inst):
    """Uninformed priors plus the per-family learnable set for EM runs."""
    th = em_mod.default_theta(inst.tensorization, inst.y)
    fam = inst.family
    if fam == "iid":
        prior_b = ch.BernoulliGaussian(th.xi, 0.0, 1.0, "complex")
        priors_c = (ch.BernoulliGaussian(th.xi, 0.0, max(th.nu_c_active, 1e-6), "complex"),)
        learn = {"xi_b", "xi_c", "nu_c_active", "nu_w"}
    elif fam in ("self_calibration", "matrix_uncertainty"):
        field_tag = "complex" if fam == "self_calibration" else "real"
        prior_b = ch.Gaussian(0.0, 1.0, field_tag)
        priors_c = (ch.BernoulliGaussian(th.xi, 0.0, max(th.nu_c_active, 1e-6), field_tag),)
        learn = {"xi_c", "nu_c_active", "nu_w"}
    elif fam == "blind_deconv":
        prior_b = inst.prior_b
        priors_c = inst.prior_c
        learn = {"nu_w"}
    elif fam == "matrix_cs":
        prior_b = inst.prior_b
        if inst.tensorization.Nb == 0:
            priors_c = (ch.BernoulliGaussian(th.xi, 0.0, max(th.nu_c_active, 1e-6), "complex"),)
        else:
            priors_c = (ch.Gaussian(0.0, 1.0, "complex"),
                        ch.BernoulliGaussian(th.xi, 0.0, max(th.nu_c_active, 1e-6), "complex"))
        learn = {"xi_c", "nu_c_active", "nu_w"}
    else:
        raise ValueError(fam)
    channel0 = type(inst.channel)(noise_var=th.nu_w, field=inst.channel.field)
    return channel0, prior_b, priors_c, frozenset(learn)


def solve_instance(inst, em: bool = False, restarts: int = 1,
                   solver_overrides: dict | None = None, seed: int = 0,
                   threshold_db: float = -60.0):
    """Run the solver (optionally inside EM) and score the result."""
    cfg = solver.DampingConfig(seed=seed, **(solver_overrides or {}))
    t0 = time.perf_counter()
    if em:
        channel0, prior_b, priors_c, learn = _em_setup(inst)
        em_cfg = em_mod.EMConfig(learnable=learn, max_iters=8)
        y_power = float(np.real(np.vdot(inst.y, inst.y)))

        def resid(fit):
            z = fit.report.state.zstar
            if z is None or y_power <= 0:
                return np.inf
            d = inst.y - z
            return float(np.real(np.vdot(d, d))) / y_power

        best = None
        init = None
        for k in range(max(restarts, 1)):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
            fit = em_mod.em_fit(inst.tensorization, channel0, prior_b, priors_c, inst.y,
                                em_cfg, cfg, rng=rng, init=init)
            if best is None or resid(fit) < resid(best):
                best = fit
            if resid(best) < 1e-9:
                break
            init = solver._reinflated_init(inst.tensorization, fit.prior_b, fit.c_priors,
                                           fit.report.state, rng)
        report = best.report
    else:
        report = solver.restart_schedule(inst.tensorization, inst.channel, inst.prior_b,
                                         inst.prior_c, inst.y, cfg, n_restarts=max(restarts, 1))
    seconds = time.perf_counter() - t0
    metrics = problems.evaluate(inst, report.b_final, report.c_final,
                                threshold_db=threshold_db)
    return metrics, report, seconds


def _run_trial(spec: SweepSpec, cell: dict, cell_idx: int, trial_idx: int) -> dict:
    seed = _trial_seed(spec.seed_base, cell_idx, trial_idx)
    params = {**spec.fixed, **cell}
    inst = _make_instance(spec.family, params, seed)
    try:
        metrics, report, seconds = solve_instance(
            inst, em=spec.em, restarts=spec.restarts,
            solver_overrides=spec.solver_overrides, seed=seed,
            threshold_db=spec.threshold_db)
        return {"success": metrics.success, "nmse_b_db": metrics.nmse_b_db,
                "nmse_c_db": metrics.nmse_c_db, "lifted_nmse_db": metrics.lifted_nmse_db,
                "ser": metrics.ser, "iters": report.iterations, "seconds": seconds,
                "diverged": report.termination == "diverged"}
    except Exception:
        return {"success": False, "nmse_b_db": np.nan, "nmse_c_db": np.nan,
                "lifted_nmse_db": np.nan, "ser": np.nan, "iters": 0, "seconds": 0.0,
                "diverged": True}


def _trial_job(args):
    spec_dict, cell, cell_idx, trial_idx = args
    return (cell_idx, trial_idx, _run_trial(SweepSpec(**spec_dict), cell, cell_idx, trial_idx))


def _bound_feasible(family, params):
    try:
        bound = problems.counting_bound(family, **params)
    except (ValueError, KeyError):
        return ""
    return bool(params.get("M", np.inf) >= bound)


def run_sweep(spec: SweepSpec, progress=None) -> list[dict]:
    """Execute every (cell, trial) task and aggregate per cell."""
    axis_names = list(spec.axes)
    cells = [dict(zip(axis_names, combo))
             for combo in itertools.product(*(spec.axes[a] for a in axis_names))]
    results = {i: [None] * spec.trials for i in range(len(cells))}

    tasks = [(asdict(spec), cells[i], i, t)
             for i in range(len(cells)) for t in range(spec.trials)]
    if spec.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=spec.threads) as pool:
            for ci, ti, row in pool.map(_trial_job, tasks):
                results[ci][ti] = row
                if progress:
                    progress(ci, ti, row)
    else:
        for args in tasks:
            ci, ti, row = _trial_job(args)
            results[ci][ti] = row
            if progress:
                progress(ci, ti, row)

    table = []
    for i, cell in enumerate(cells):
        rows = results[i]
        params = {**spec.fixed, **cell}
        succ = float(np.mean([r["success"] for r in rows]))
        all_diverged = all(r["diverged"] for r in rows)
        if all_diverged:
            click.echo(f"warning: every trial diverged in cell {cell}", err=True)

        def med(key):
            vals = np.asarray([r[key] for r in rows], dtype=float)
            return float(np.nanmedian(vals)) if np.any(np.isfinite(vals)) else np.nan

        table.append({
            "family": spec.family, **cell, "trials": spec.trials,
            "success_rate": succ,
            "median_nmse_b_db": med("nmse_b_db"),
            "median_nmse_c_db": med("nmse_c_db"),
            "median_lifted_nmse_db": med("lifted_nmse_db"),
            "ser": med("ser"),
            "mean_iters": float(np.mean([r["iters"] for r in rows])),
            "mean_seconds": float(np.mean([r["seconds"] for r in rows])),
            "counting_bound_feasible": _bound_feasible(spec.family, params),
        })
    return table


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def emit_csv(table: list[dict], path, axis_names=None):
    """Write the aggregate table; one row per cell, fixed column schema."""
    if axis_names is None:
        axis_names = [k for k in (table[0] if table else {}) if k not in
                      {"family", *CSV_COLUMNS}]
    header = ["family", *axis_names, *CSV_COLUMNS]
    lines = [",".join(header)]
    for row in table:
        rate = row["success_rate"]
        if not (0.0 <= rate <= 1.0):
            raise ValueError(f"success_rate out of range: {rate}")
        lines.append(",".join(_fmt(row.get(col, "")) for col in header))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _bound_polyline(family, axis_names, axes, fixed):
    """Counting-bound overlay in the coordinates of a 2-axis grid."""
    a0, a1 = axis_names
    pts = []
    try:
        if family == "iid" and a0 == "M" and a1 == "K":
            for k in axes[a1]:
                pts.append((problems.counting_bound("iid", K=k), k))
        elif family == "self_calibration" and a0 == "Nb" and a1 == "K":
            m = fixed.get("M", 128)
            for nb in axes[a0]:
                pts.append((nb, m - nb))
        elif family == "matrix_cs" and a0 == "R" and a1 == "xi":
            m = fixed["M"]
            rows = fixed.get("rows", 100)
            cols = fixed.get("cols", 100)
            for r in axes[a0]:
                xi = (m - r * (rows + cols - r)) / (rows * cols)
                pts.append((r, xi))
        else:
            return None
    except (KeyError, ValueError):
        return None
    return pts


def emit_phaseplot(table: list[dict], path, spec: SweepSpec | None = None,
                   axis_names=None):
    """Success-rate map over a 2-axis grid, with the counting-bound overlay.

    Writes a gnuplot-style data file; with a ``.png`` suffix a grayscale
    image is rendered instead (requires matplotlib).
    """
    if axis_names is None:
        if spec is None:
            raise ValueError("need spec or axis_names")
        axis_names = list(spec.axes)
    if len(axis_names) != 2:
        raise ValueError(f"phase plot needs exactly 2 axes, got {axis_names}")
    a0, a1 = axis_names
    v0 = sorted({row[a0] for row in table})
    v1 = sorted({row[a1] for row in table})
    grid = np.full((len(v1), len(v0)), np.nan)
    for row in table:
        grid[v1.index(row[a1]), v0.index(row[a0])] = row["success_rate"]
    bound = None
    if spec is not None:
        bound = _bound_polyline(spec.family, axis_names, spec.axes, spec.fixed)

    if str(path).endswith(".png"):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.imshow(grid, origin="lower", cmap="gray", vmin=0.0, vmax=1.0,
                  aspect="auto", extent=(min(v0), max(v0), min(v1), max(v1)))
        if bound:
            bx, by = zip(*bound)
            ax.plot(bx, by, "r-", linewidth=1.5)
        ax.set_xlabel(a0)
        ax.set_ylabel(a1)
        fig.tight_layout()
        fig.savefig(path, dpi=140)
        plt.close(fig)
        return

    lines = [f"# success-rate map, x={a0} y={a1}",
             "# x " + " ".join(_fmt(v) for v in v0)]
    for j, vy in enumerate(v1):
        lines.append(_fmt(vy) + " " + " ".join(_fmt(grid[j, i]) for i in range(len(v0))))
    if bound:
        lines.append("# counting bound polyline (x y)")
        for bx, by in bound:
            lines.append(f"# bound {_fmt(bx)} {_fmt(by)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# command line


def _parse_list(cast):
    def cb(ctx, param, value):
        if value is None:
            return None
        return [cast(v) for v in str(value).split(",") if v != ""]
    return cb


def _load_config(path):
    cfg = {}
    if not path:
        return cfg
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            cfg[k.strip()] = v.strip()
    return cfg


def _resolve(flag_value, config, key, default, cast=None):
    # precedence: explicit flag > config file > default
    if flag_value is not None:
        return flag_value
    if key in config:
        raw = config[key]
        if cast is not None:
            return cast(raw)
        return raw
    return default


def _common_options(fn):
    opts = [
        click.option("--trials", type=int, default=None, help="trials per grid cell"),
        click.option("--seed", type=int, default=None, help="sweep base seed"),
        click.option("--em/--no-em", "em", default=None, help="learn hyperparameters by EM"),
        click.option("--restarts", type=int, default=None, help="independent inits per trial"),
        click.option("--threshold-db", type=float, default=None, help="success threshold (dB)"),
        click.option("--out", type=click.Path(), default=None, help="CSV output path"),
        click.option("--plot", type=click.Path(), default=None, help="phase-map output path"),
        click.option("--threads", type=int, default=None, envvar="PBIGAMP_THREADS"),
        click.option("--beta-init", type=float, default=None),
        click.option("--tmax", type=int, default=None),
        click.option("--tau-stop", type=float, default=None),
        click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                     help="key=value defaults file (flags take precedence)"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_spec(family, axes, fixed, kw):
    config = _load_config(kw.get("config_path"))
    overrides = {}
    beta = _resolve(kw.get("beta_init"), config, "beta_init", None, float)
    if beta is not None:
        overrides["beta_init"] = beta
    tmax = _resolve(kw.get("tmax"), config, "tmax", None, int)
    if tmax is not None:
        overrides["t_max"] = tmax
    tau = _resolve(kw.get("tau_stop"), config, "tau_stop", None, float)
    if tau is not None:
        overrides["tau_stop"] = tau
    return SweepSpec(
        family=family, axes=axes,
        trials=_resolve(kw.get("trials"), config, "trials", 1, int),
        seed_base=_resolve(kw.get("seed"), config, "seed", 0, int),
        threshold_db=_resolve(kw.get("threshold_db"), config, "threshold_db", -60.0, float),
        em=bool(_resolve(kw.get("em"), config, "em", False,
                         lambda s: s.lower() in ("1", "true", "yes"))),
        restarts=_resolve(kw.get("restarts"), config, "restarts", 1, int),
        solver_overrides=overrides, fixed=fixed,
        threads=_resolve(kw.get("threads"), config, "threads", 1, int),
    )


def _finish(spec, kw):
    t0 = time.perf_counter()
    done = []

    def progress(ci, ti, row):
        done.append(1)
        click.echo(f"  [{len(done)}] cell {ci} trial {ti}: "
                   f"success={row['success']} iters={row['iters']}", err=True)

    table = run_sweep(spec, progress=progress)
    out = kw.get("out") or f"{spec.family}_sweep.csv"
    emit_csv(table, out, axis_names=list(spec.axes))
    click.echo(f"wrote {out} ({len(table)} cells, {time.perf_counter() - t0:.1f}s)")
    if kw.get("plot"):
        emit_phaseplot(table, kw["plot"], spec=spec)
        click.echo(f"wrote {kw['plot']}")


@click.group()
def main():
    """Bilinear-AMP experiment driver."""


@main.command("phase-iid")
@click.option("--M", "m_list", default="80", callback=_parse_list(int),
              help="comma-separated measurement counts")
@click.option("--K", "k_list", default="5", callback=_parse_list(int),
              help="comma-separated sparsity levels")
@click.option("--Nb", type=int, default=100)
@click.option("--Nc", type=int, default=100)
@_common_options
def phase_iid(m_list, k_list, nb, nc, **kw):
    """Success-rate grid for the unstructured complex tensor model."""
    spec = _build_spec("iid", {"M": m_list, "K": k_list}, {"Nb": nb, "Nc": nc}, kw)
    _finish(spec, kw)


@main.command("self-calib")
@click.option("--Nb", "nb_list", default="4", callback=_parse_list(int))
@click.option("--K", "k_list", default="8", callback=_parse_list(int))
@click.option("--Nc", type=int, default=256)
@click.option("--M", type=int, default=128)
@_common_options
def self_calib(nb_list, k_list, nc, m, **kw):
    """Joint gain/signal recovery with subspace-structured gains."""
    spec = _build_spec("self_calibration", {"Nb": nb_list, "K": k_list},
                       {"Nc": nc, "M": m}, kw)
    _finish(spec, kw)


@main.command("mu-cs")
@click.option("--M", "m_list", default="102", callback=_parse_list(int))
@click.option("--K", type=int, default=10)
@click.option("--Nb", type=int, default=10)
@click.option("--Nc", type=int, default=256)
@click.option("--snr-db", type=float, default=40.0)
@_common_options
def mu_cs(m_list, k, nb, nc, snr_db, **kw):
    """Compressive sensing under parametric sensing-matrix uncertainty."""
    spec = _build_spec("matrix_uncertainty", {"M": m_list},
                       {"K": k, "Nb": nb, "Nc": nc, "snr_db": snr_db}, kw)
    _finish(spec, kw)


@main.command("blind-deconv")
@click.option("--snr-db", "snr_list", default="30", callback=_parse_list(float))
@click.option("--Np", "n_period", type=int, default=256)
@click.option("--Ng", "n_guard", type=int, default=64)
@click.option("--Nb", "nb", type=int, default=63)
@click.option("--L", "n_snap", type=int, default=3)
@click.option("--alphabet", type=click.Choice(["qpsk", "gaussian"]), default="qpsk")
@_common_options
def blind_deconv(snr_list, n_period, n_guard, nb, n_snap, alphabet, **kw):
    """Totally blind deconvolution with guarded transmission periods."""
    spec = _build_spec("blind_deconv", {"snr_db": snr_list},
                       {"Np": n_period, "Ng": n_guard, "Nb": nb, "L": n_snap,
                        "alphabet": alphabet}, kw)
    _finish(spec, kw)


@main.command("matrix-cs")
@click.option("--R", "r_list", default="5", callback=_parse_list(int))
@click.option("--xi", "xi_list", default="0.02", callback=_parse_list(float))
@click.option("--M", type=int, default=10000)
@click.option("--rows", type=int, default=100)
@click.option("--cols", type=int, default=100)
@click.option("--K-phi", type=int, default=50)
@_common_options
def matrix_cs(r_list, xi_list, m, rows, cols, k_phi, **kw):
    """Low-rank plus sparse recovery from sparse trace probes."""
    spec = _build_spec("matrix_cs", {"R": r_list, "xi": xi_list},
                       {"M": m, "rows": rows, "cols": cols, "K_phi": k_phi}, kw)
    _finish(spec, kw)


@main.command("solve")
@click.argument("instance_path", type=click.Path(exists=True))
@click.option("--trace-out", type=click.Path(), default=None)
@_common_options
def solve_cmd(instance_path, trace_out, **kw):
    """Solve one serialized problem instance."""
    inst = problems.load_instance(instance_path)
    overrides = {}
    if kw.get("beta_init") is not None:
        overrides["beta_init"] = kw["beta_init"]
    if kw.get("tmax") is not None:
        overrides["t_max"] = kw["tmax"]
    if kw.get("tau_stop") is not None:
        overrides["tau_stop"] = kw["tau_stop"]
    metrics, report, seconds = solve_instance(
        inst, em=bool(kw.get("em")), restarts=kw.get("restarts") or 1,
        solver_overrides=overrides, seed=kw.get("seed") or 0,
        threshold_db=kw.get("threshold_db") if kw.get("threshold_db") is not None else -60.0)
    if trace_out:
        report.write_trace_csv(trace_out)
    click.echo(json.dumps({
        "family": inst.family, "termination": report.termination,
        "iterations": report.iterations, "seconds": round(seconds, 3),
        "nmse_b_db": metrics.nmse_b_db, "nmse_c_db": metrics.nmse_c_db,
        "lifted_nmse_db": metrics.lifted_nmse_db, "ser": metrics.ser,
        "success": metrics.success}, default=float))


if __name__ == "__main__":
    main()
