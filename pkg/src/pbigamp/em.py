"""Expectation-maximization tuning of prior and channel hyperparameters.

The E-step reuses the Gaussian-pseudo-measurement posteriors produced by a
converged solver run; the M-steps are closed forms, applied one parameter at
a time (noise variance first, then sparsity rates, then active-component
variances).  The outer loop alternates solver runs with these updates,
warm-starting each run from the previous estimates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .channels import Awgn, BernoulliGaussian, Gaussian
from .parametrization import Tensorization
from .solver import DampingConfig, RunReport, SolverState, _block_slices, _c_priors, init_state, run

__all__ = ["EMConfig", "EMFitResult", "em_update", "em_fit", "default_theta", "DefaultTheta",
           "write_theta_trace_csv"]

LEARNABLE = ("xi_b", "xi_c", "nu_b_active", "nu_c_active", "nu_w")


@dataclass(frozen=True)
class EMConfig:
    """Which hyperparameters to learn, and the outer-loop controls."""

    learnable: frozenset = frozenset({"xi_b", "xi_c", "nu_c_active", "nu_w"})
    max_iters: int = 20
    rel_tol: float = 1e-4
    inner_tau_stop: float = 1e-8
    xi_min: float = 1e-6
    var_floor: float = 1e-12
    var_ceil: float = 1e12
    nu_w_floor_rel: float = 1e-12   # relative to mean |y|^2

    def __post_init__(self):
        unknown = set(self.learnable) - set(LEARNABLE)
        if unknown:
            raise ValueError(f"unknown learnable parameters: {sorted(unknown)}")


def _clamp(x, lo, hi):
    return float(min(max(x, lo), hi))


def _update_rate(prior, pi, cfg):
    xi = _clamp(float(np.mean(pi)), cfg.xi_min, 1.0 - cfg.xi_min)
    return replace(prior, rate=xi)


def _update_active_var(prior, pi, active_m2, cfg):
    denom = float(np.sum(pi))
    if denom <= 0:
        return prior
    var = _clamp(float(np.sum(np.asarray(pi) * np.asarray(active_m2))) / denom,
                 cfg.var_floor, cfg.var_ceil)
    return replace(prior, var=var)


def em_update(state: SolverState, t9n: Tensorization, channel: Awgn,
              prior_b, prior_c, y, cfg: EMConfig):
    """One incremental M-step pass over the learnable set.

    Uses the posteriors stored in a converged solver state.  Returns
    (channel, prior_b, c_priors, theta) with the updated parameters.
    """
    c_priors = list(_c_priors(prior_c, t9n))
    slices = _block_slices(t9n.c_block_sizes)
    if state.rhat is None:
        raise ValueError("em_update needs a state produced by the solver")

    if "nu_w" in cfg.learnable:
        resid = float(np.mean(np.abs(np.asarray(y) - state.zhat) ** 2)) + state.nu_z
        floor = cfg.nu_w_floor_rel * float(np.mean(np.abs(y) ** 2))
        channel = replace(channel, noise_var=_clamp(resid, floor, cfg.var_ceil))

    if "xi_b" in cfg.learnable and isinstance(prior_b, BernoulliGaussian) and t9n.Nb > 0:
        prior_b = _update_rate(prior_b, prior_b.em_moments(state.qhat, state.nu_q).support_prob, cfg)
    if "xi_c" in cfg.learnable:
        for k, (p, sl) in enumerate(zip(c_priors, slices)):
            if isinstance(p, BernoulliGaussian):
                em = p.em_moments(state.rhat[sl], state.nu_r[k])
                c_priors[k] = _update_rate(p, em.support_prob, cfg)

    if "nu_b_active" in cfg.learnable and isinstance(prior_b, (Gaussian, BernoulliGaussian)) \
            and t9n.Nb > 0:
        em = prior_b.em_moments(state.qhat, state.nu_q)
        prior_b = _update_active_var(prior_b, em.support_prob, em.active_second_moment, cfg)
    if "nu_c_active" in cfg.learnable:
        for k, (p, sl) in enumerate(zip(c_priors, slices)):
            if isinstance(p, (Gaussian, BernoulliGaussian)):
                em = p.em_moments(state.rhat[sl], state.nu_r[k])
                c_priors[k] = _update_active_var(p, em.support_prob, em.active_second_moment, cfg)

    return channel, prior_b, tuple(c_priors), _theta_of(channel, prior_b, c_priors)


def _theta_of(channel, prior_b, c_priors):
    theta = {"nu_w": channel.noise_var}
    if isinstance(prior_b, BernoulliGaussian):
        theta["xi_b"] = prior_b.rate
    if isinstance(prior_b, (Gaussian, BernoulliGaussian)):
        theta["nu_b_active"] = prior_b.var
    for k, p in enumerate(c_priors):
        tag = f"_{k}" if len(c_priors) > 1 else ""
        if isinstance(p, BernoulliGaussian):
            theta[f"xi_c{tag}"] = p.rate
        if isinstance(p, (Gaussian, BernoulliGaussian)):
            theta[f"nu_c_active{tag}"] = p.var
    return theta


@dataclass
class EMFitResult:
    theta: dict
    report: RunReport
    trajectory: list          # rows: {"em_iter": k, **theta, "final_cost": j}
    channel: Awgn
    prior_b: object
    c_priors: tuple


def em_fit(t9n: Tensorization, channel: Awgn, prior_b, prior_c, y,
           em_cfg: EMConfig = EMConfig(),
           solver_cfg: DampingConfig = DampingConfig(),
           rng=None, init: SolverState | None = None) -> EMFitResult:
    """Alternate solver runs and closed-form M-steps until the parameters settle."""
    c_priors = _c_priors(prior_c, t9n)
    inner_cfg = replace(solver_cfg, tau_stop=max(solver_cfg.tau_stop, em_cfg.inner_tau_stop))
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=solver_cfg.seed, spawn_key=(0,)))

    trajectory = []
    theta_prev = None
    report = None
    warm = init
    for k in range(em_cfg.max_iters):
        report = run(t9n, channel, prior_b, c_priors, y, inner_cfg, rng=rng, init=warm)
        channel, prior_b, c_priors, theta = em_update(
            report.state, t9n, channel, prior_b, c_priors, y, em_cfg)
        trajectory.append({"em_iter": k, **theta, "final_cost": report.final_cost()})
        warm = _warm_start(t9n, prior_b, c_priors, report.state)
        if theta_prev is not None and _rel_change(theta, theta_prev) < em_cfg.rel_tol:
            break
        theta_prev = theta

    final = run(t9n, channel, prior_b, c_priors, y, solver_cfg, rng=rng, init=warm)
    theta = _theta_of(channel, prior_b, c_priors)
    trajectory.append({"em_iter": len(trajectory), **theta, "final_cost": final.final_cost()})
    return EMFitResult(theta=theta, report=final, trajectory=trajectory,
                       channel=channel, prior_b=prior_b, c_priors=c_priors)


def _warm_start(t9n, prior_b, c_priors, state: SolverState) -> SolverState:
    # keep the means, reset variances to the updated priors and clear memory
    fresh = init_state(t9n, prior_b, c_priors, strategy="user_supplied",
                       b_init=state.bhat[1:], c_init=state.chat[1:])
    return fresh


def _rel_change(theta, prev):
    worst = 0.0
    for k, v in theta.items():
        p = prev.get(k, v)
        denom = max(abs(p), 1e-30)
        worst = max(worst, abs(v - p) / denom)
    return worst


@dataclass(frozen=True)
class DefaultTheta:
    xi: float
    nu_w: float
    nu_b_active: float
    nu_c_active: float
    m2_b: float
    m2_c: float


def default_theta(t9n: Tensorization, y, xi0: float = 0.1) -> DefaultTheta:
    """Data-driven starting hyperparameters.

    The noise variance starts at one percent of the per-measurement power;
    the prior second moments are sized so the model reproduces the observed
    power through the tensor's Frobenius weights (offset rows included).
    """
    y = np.asarray(y)
    power = float(np.real(np.vdot(y, y)))
    m = max(t9n.M, 1)
    nu_w0 = max(0.01 * power / m, 1e-12)
    target = max(power - m * nu_w0, 0.01 * power)

    f11 = t9n.tensor_frob_sums().total
    f01, f10, f00 = t9n.offset_frob_sums()
    lin = abs(t9n.b0) ** 2 * f01 + abs(t9n.c0) ** 2 * f10
    const = abs(t9n.b0 * t9n.c0) ** 2 * f00
    # power balance: f11 s^2 + lin s + const = target, s = shared second moment
    s = 0.0
    rhs = target - const
    if rhs > 0:
        if f11 > 0:
            s = (-lin + np.sqrt(lin * lin + 4.0 * f11 * rhs)) / (2.0 * f11)
        elif lin > 0:
            s = rhs / lin
    m2 = max(float(s), 0.0)
    floor = 1e-12
    return DefaultTheta(xi=xi0, nu_w=nu_w0,
                        nu_b_active=max(m2 / xi0, floor),
                        nu_c_active=max(m2 / xi0, floor),
                        m2_b=m2, m2_c=m2)


def write_theta_trace_csv(trajectory, path):
    """Dump the EM parameter trajectory next to the run trace."""
    keys = sorted({k for row in trajectory for k in row} - {"em_iter", "final_cost"})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["em_iter", *keys, "final_cost"])
        for row in trajectory:
            w.writerow([row["em_iter"], *[row.get(k, "") for k in keys], row["final_cost"]])
