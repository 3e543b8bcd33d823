"""Scalar Bayesian denoisers and measurement channels.

Input denoisers return the posterior mean/variance of a scalar prior
combined with a Gaussian pseudo-measurement N(r; x, nu_r); output channels
return the posterior of z given a Gaussian pseudo-prior N(p, nu_p) and an
observation y.  Both flavors also expose the log-evidence and KL terms
consumed by adaptive damping and EM.

Field convention: for ``field="complex"`` all Gaussians are circular,
N(x; m, v) has density exp(-|x-m|^2/v)/(pi*v), and every variance is
E|x - xhat|^2 (no split between real and imaginary parts).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit, rel_entr

__all__ = [
    "PosteriorMoment",
    "EmMoments",
    "InputDenoiser",
    "Gaussian",
    "BernoulliGaussian",
    "FiniteAlphabet",
    "Awgn",
    "denoiser_from_spec",
    "channel_from_spec",
]

_REAL = "real"
_COMPLEX = "complex"
_TINY = 1e-300


def _check_field(field):
    if field not in (_REAL, _COMPLEX):
        raise ValueError(f"field must be 'real' or 'complex', got {field!r}")


def log_gauss(x, mean, var, field):
    """Log density of N(x; mean, var) under the field convention."""
    d2 = np.abs(x - mean) ** 2
    if field == _REAL:
        return -0.5 * np.log(2.0 * np.pi * var) - d2 / (2.0 * var)
    return -np.log(np.pi * var) - d2 / var


def gauss_kl(m1, v1, m0, v0, field):
    """KL( N(m1,v1) || N(m0,v0) ) for matching-field Gaussians."""
    ratio = v1 / v0
    shift = np.abs(m1 - m0) ** 2 / v0
    kl = ratio + shift - 1.0 - np.log(ratio)
    if field == _REAL:
        kl = 0.5 * kl
    return kl


def _validate_pseudo(r, nu):
    if not np.all(np.isfinite(r)):
        raise ValueError("pseudo-measurement mean must be finite")
    nu = float(nu)
    if not np.isfinite(nu) or nu <= 0.0:
        raise ValueError(f"pseudo-measurement variance must be positive, got {nu}")
    return nu


@dataclass(frozen=True)
class PosteriorMoment:
    """Posterior mean/variance plus the log normalizer of prior x Gaussian."""

    mean: np.ndarray | complex | float
    variance: np.ndarray | float
    log_evidence: np.ndarray | float


@dataclass(frozen=True)
class EmMoments:
    """Per-coordinate posterior statistics needed by the EM updates.

    ``support_prob`` is the posterior probability of the active (non-spike)
    component; ``active_second_moment`` is E[|x|^2 | active].
    """

    support_prob: np.ndarray | float
    active_mean: np.ndarray | complex | float
    active_second_moment: np.ndarray | float


class InputDenoiser(abc.ABC):
    """Posterior-moment map for a separable scalar prior."""

    field: str

    @abc.abstractmethod
    def denoise(self, r, nu_r) -> PosteriorMoment:
        """Mean/variance of p(x) N(x; r, nu_r) / Z and log Z."""

    @abc.abstractmethod
    def denoise_derivative(self, r, nu_r):
        """Derivative of the posterior mean w.r.t. r.

        Computed from the analytic derivative of the mean map, not from the
        variance, so that nu_r * derivative == variance serves as an
        independent identity check.  In the complex field this is the
        Wirtinger derivative w.r.t. r (conjugate held fixed).
        """

    @abc.abstractmethod
    def kl_to_prior(self, r, nu_r):
        """KL divergence of the posterior at (r, nu_r) from the prior."""

    @abc.abstractmethod
    def em_moments(self, r, nu_r) -> EmMoments:
        """Posterior support probability and active-branch moments."""

    @abc.abstractmethod
    def sample(self, rng, size):
        """Draw prior samples (used by initialization and sanity checks)."""

    @property
    @abc.abstractmethod
    def prior_mean(self):
        ...

    @property
    @abc.abstractmethod
    def prior_second_moment(self):
        ...

    @property
    def prior_variance(self):
        return self.prior_second_moment - abs(self.prior_mean) ** 2

    def to_spec(self) -> dict:
        raise NotImplementedError


def _sample_gauss(rng, size, mean, var, field):
    if var <= 0:
        return np.full(size, mean, dtype=complex if field == _COMPLEX else float)
    if field == _REAL:
        return mean + np.sqrt(var) * rng.standard_normal(size)
    noise = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    return mean + np.sqrt(var / 2.0) * noise


@dataclass(frozen=True)
class Gaussian(InputDenoiser):
    """Gaussian prior N(mean, var)."""

    mean: complex = 0.0
    var: float = 1.0
    field: str = _COMPLEX

    def __post_init__(self):
        _check_field(self.field)
        if self.var < 0:
            raise ValueError("prior variance must be nonnegative")

    def denoise(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        gain = self.var / (self.var + nu_r)
        mean = self.mean + gain * (np.asarray(r) - self.mean)
        variance = gain * nu_r
        log_ev = log_gauss(r, self.mean, self.var + nu_r, self.field)
        return PosteriorMoment(mean, np.broadcast_to(variance, np.shape(mean)) if np.shape(mean) else variance, log_ev)

    def denoise_derivative(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        gain = self.var / (self.var + nu_r)
        return np.broadcast_to(gain, np.shape(r)) if np.shape(r) else gain

    def kl_to_prior(self, r, nu_r):
        if self.var == 0.0:
            return np.zeros(np.shape(r)) if np.shape(r) else 0.0
        m = self.denoise(r, nu_r)
        return gauss_kl(m.mean, m.variance, self.mean, self.var, self.field)

    def em_moments(self, r, nu_r):
        m = self.denoise(r, nu_r)
        m2 = np.abs(m.mean) ** 2 + m.variance
        return EmMoments(np.ones(np.shape(m2)) if np.shape(m2) else 1.0, m.mean, m2)

    def sample(self, rng, size):
        return _sample_gauss(rng, size, self.mean, self.var, self.field)

    @property
    def prior_mean(self):
        return self.mean

    @property
    def prior_second_moment(self):
        return abs(self.mean) ** 2 + self.var

    def to_spec(self):
        return {"family": "gaussian", "mean": complex(self.mean), "var": float(self.var), "field": self.field}


@dataclass(frozen=True)
class BernoulliGaussian(InputDenoiser):
    """Spike-and-slab prior (1-rate) delta_0 + rate N(mean, var).

    Posterior support probability is evaluated through a sigmoid of the
    log-likelihood ratio so that large |r|^2/nu_r cannot overflow.
    """

    rate: float = 0.5
    mean: complex = 0.0
    var: float = 1.0
    field: str = _COMPLEX

    def __post_init__(self):
        _check_field(self.field)
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("sparsity rate must lie in [0, 1]")
        if self.var < 0:
            raise ValueError("prior variance must be nonnegative")

    def _branch(self, r, nu_r):
        gain = self.var / (self.var + nu_r)
        m1 = self.mean + gain * (np.asarray(r) - self.mean)
        v1 = gain * nu_r
        return m1, v1

    def _llr(self, r, nu_r):
        # log of (active evidence / spike evidence), prior odds included
        act = log_gauss(r, self.mean, self.var + nu_r, self.field)
        spk = log_gauss(r, 0.0, nu_r, self.field)
        return np.log(self.rate) - np.log1p(-self.rate) + act - spk

    def denoise(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        r = np.asarray(r)
        spk = log_gauss(r, 0.0, nu_r, self.field)
        if self.rate == 0.0:
            zero = np.zeros(r.shape)
            mean = zero.astype(r.dtype) if r.shape else (0.0 if self.field == _REAL else 0.0 + 0.0j)
            return PosteriorMoment(mean, zero if r.shape else 0.0, spk if r.shape else float(spk))
        m1, v1 = self._branch(r, nu_r)
        act = log_gauss(r, self.mean, self.var + nu_r, self.field)
        if self.rate == 1.0:
            return PosteriorMoment(m1, np.broadcast_to(v1, m1.shape) if m1.shape else v1, act)
        pi = expit(self._llr(r, nu_r))
        mean = pi * m1
        variance = pi * v1 + pi * (1.0 - pi) * np.abs(m1) ** 2
        log_ev = np.logaddexp(np.log1p(-self.rate) + spk, np.log(self.rate) + act)
        return PosteriorMoment(mean, variance, log_ev)

    def denoise_derivative(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        r = np.asarray(r)
        if self.rate == 0.0:
            return np.zeros(r.shape) if r.shape else 0.0
        gain = self.var / (self.var + nu_r)
        if self.rate == 1.0:
            return np.broadcast_to(gain, r.shape) if r.shape else gain
        m1, _ = self._branch(r, nu_r)
        pi = expit(self._llr(r, nu_r))
        diff = r - self.mean
        if self.field == _REAL:
            dllr = r / nu_r - diff / (self.var + nu_r)
        else:
            dllr = np.conj(r) / nu_r - np.conj(diff) / (self.var + nu_r)
        return pi * gain + pi * (1.0 - pi) * m1 * dllr

    def kl_to_prior(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        r = np.asarray(r)
        if self.rate in (0.0, 1.0):
            inner = Gaussian(self.mean, self.var, self.field)
            return inner.kl_to_prior(r, nu_r) if self.rate == 1.0 else (np.zeros(r.shape) if r.shape else 0.0)
        m1, v1 = self._branch(r, nu_r)
        pi = expit(self._llr(r, nu_r))
        mix = rel_entr(pi, self.rate) + rel_entr(1.0 - pi, 1.0 - self.rate)
        return mix + pi * gauss_kl(m1, v1, self.mean, self.var, self.field)

    def em_moments(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        r = np.asarray(r)
        m1, v1 = self._branch(r, nu_r)
        if self.rate == 0.0:
            pi = np.zeros(r.shape) if r.shape else 0.0
        elif self.rate == 1.0:
            pi = np.ones(r.shape) if r.shape else 1.0
        else:
            pi = expit(self._llr(r, nu_r))
        return EmMoments(pi, m1, np.abs(m1) ** 2 + v1)

    def sample(self, rng, size):
        on = rng.random(size) < self.rate
        return np.where(on, _sample_gauss(rng, size, self.mean, self.var, self.field), 0.0)

    @property
    def prior_mean(self):
        return self.rate * self.mean

    @property
    def prior_second_moment(self):
        return self.rate * (abs(self.mean) ** 2 + self.var)

    def to_spec(self):
        return {
            "family": "bernoulli_gaussian",
            "rate": float(self.rate),
            "mean": complex(self.mean),
            "var": float(self.var),
            "field": self.field,
        }


def qpsk_points():
    return (1.0 + 0.0j, 0.0 + 1.0j, -1.0 + 0.0j, 0.0 - 1.0j)


@dataclass(frozen=True)
class FiniteAlphabet(InputDenoiser):
    """Discrete prior over a finite constellation.

    Posterior weights are a softmax of the per-point log evidences with
    max-subtraction, so high-SNR pseudo-measurements stay finite.
    """

    points: tuple
    probs: tuple | None = None
    field: str = _COMPLEX

    def __post_init__(self):
        _check_field(self.field)
        pts = tuple(complex(p) if self.field == _COMPLEX else float(np.real(p)) for p in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise ValueError("alphabet must be nonempty")
        if self.probs is None:
            object.__setattr__(self, "probs", tuple(1.0 / len(pts) for _ in pts))
        else:
            probs = tuple(float(p) for p in self.probs)
            if len(probs) != len(pts):
                raise ValueError("probs must match alphabet length")
            if any(p < 0 for p in probs):
                raise ValueError("alphabet probabilities must be nonnegative")
            if abs(sum(probs) - 1.0) > 1e-12:
                raise ValueError("alphabet probabilities must sum to 1")
            object.__setattr__(self, "probs", probs)

    @classmethod
    def qpsk(cls):
        return cls(points=qpsk_points(), field=_COMPLEX)

    @cached_property
    def _pts(self):
        return np.asarray(self.points)

    @cached_property
    def _log_probs(self):
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.probs))

    def _weights(self, r, nu_r):
        r = np.asarray(r)
        pts = self._pts.reshape((-1,) + (1,) * r.ndim)
        lw = self._log_probs.reshape(pts.shape) + log_gauss(r[None, ...], pts, nu_r, self.field)
        top = np.max(lw, axis=0)
        w = np.exp(lw - top)
        norm = np.sum(w, axis=0)
        return w / norm, top + np.log(norm), pts

    def denoise(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        w, log_ev, pts = self._weights(r, nu_r)
        mean = np.sum(w * pts, axis=0)
        # central moment computed directly; the difference-of-moments form
        # cancels catastrophically once one point dominates
        variance = np.sum(w * np.abs(pts - mean[None, ...]) ** 2, axis=0)
        return PosteriorMoment(mean, variance, log_ev)

    def denoise_derivative(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        w, _, pts = self._weights(r, nu_r)
        diff = pts - np.asarray(r)[None, ...]
        d = (diff if self.field == _REAL else np.conj(diff)) / nu_r
        mean_d = np.sum(w * d, axis=0)
        return np.sum(w * pts * d, axis=0) - np.sum(w * pts, axis=0) * mean_d

    def kl_to_prior(self, r, nu_r):
        nu_r = _validate_pseudo(r, nu_r)
        w, _, _ = self._weights(r, nu_r)
        probs = np.asarray(self.probs).reshape(w.shape[0:1] + (1,) * (w.ndim - 1))
        return np.sum(rel_entr(w, np.broadcast_to(probs, w.shape)), axis=0)

    def em_moments(self, r, nu_r):
        m = self.denoise(r, nu_r)
        return EmMoments(np.ones(np.shape(m.variance)) if np.shape(m.variance) else 1.0, m.mean,
                         np.abs(m.mean) ** 2 + m.variance)

    def sample(self, rng, size):
        return rng.choice(self._pts, size=size, p=np.asarray(self.probs))

    @property
    def prior_mean(self):
        return complex(np.sum(self._pts * np.asarray(self.probs)))

    @property
    def prior_second_moment(self):
        return float(np.sum(np.abs(self._pts) ** 2 * np.asarray(self.probs)))

    def to_spec(self):
        return {
            "family": "finite_alphabet",
            "points": [complex(p) for p in self.points],
            "probs": list(self.probs),
            "field": self.field,
        }


@dataclass(frozen=True)
class Awgn:
    """Additive white Gaussian noise likelihood p(y|z) = N(y; z, noise_var)."""

    noise_var: float = 0.0
    field: str = _COMPLEX

    def __post_init__(self):
        _check_field(self.field)
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")

    def posterior(self, y, p, nu_p):
        """Moments of p(z | p, nu_p, y): product of N(z;p,nu_p) and N(y;z,nu_w)."""
        nu_p = _validate_pseudo(p, nu_p)
        gain = nu_p / (nu_p + self.noise_var)
        mean = np.asarray(p) + gain * (np.asarray(y) - np.asarray(p))
        variance = gain * self.noise_var
        log_ev = log_gauss(y, p, nu_p + self.noise_var, self.field)
        return PosteriorMoment(mean, np.broadcast_to(variance, np.shape(mean)) if np.shape(mean) else variance, log_ev)

    def residual_scores(self, y, p, nu_p):
        """Scaled residual and its precision-like variance term."""
        m = self.posterior(y, p, nu_p)
        s = (m.mean - np.asarray(p)) / nu_p
        nu_s = (1.0 - m.variance / nu_p) / nu_p
        return s, nu_s

    def expected_negative_loglik(self, y, z_mean, nu_p):
        """-E[log p(y|z)] with z ~ N(z_mean, nu_p)."""
        nu_p = _validate_pseudo(z_mean, nu_p)
        d2 = np.abs(np.asarray(y) - np.asarray(z_mean)) ** 2
        if self.noise_var == 0.0:
            out = np.where(d2 > 0, np.inf, -np.inf)
            return float(out) if out.ndim == 0 else out
        if self.field == _REAL:
            return (d2 + nu_p) / (2.0 * self.noise_var) + 0.5 * np.log(2.0 * np.pi * self.noise_var)
        return (d2 + nu_p) / self.noise_var + np.log(np.pi * self.noise_var)

    def sample_noise(self, rng, size):
        return _sample_gauss(rng, size, 0.0, self.noise_var, self.field)

    def to_spec(self):
        return {"family": "awgn", "noise_var": float(self.noise_var), "field": self.field}


def denoiser_from_spec(spec: dict) -> InputDenoiser:
    """Rebuild a denoiser from its ``to_spec`` dictionary."""
    fam = spec["family"]
    if fam == "gaussian":
        mean = complex(spec["mean"])
        if spec["field"] == _REAL:
            mean = mean.real
        return Gaussian(mean=mean, var=spec["var"], field=spec["field"])
    if fam == "bernoulli_gaussian":
        mean = complex(spec["mean"])
        if spec["field"] == _REAL:
            mean = mean.real
        return BernoulliGaussian(rate=spec["rate"], mean=mean, var=spec["var"], field=spec["field"])
    if fam == "finite_alphabet":
        return FiniteAlphabet(points=tuple(complex(p) for p in spec["points"]),
                              probs=tuple(spec["probs"]), field=spec["field"])
    raise ValueError(f"unknown denoiser family {fam!r}")


def channel_from_spec(spec: dict) -> Awgn:
    if spec["family"] != "awgn":
        raise ValueError(f"unknown channel family {spec['family']!r}")
    return Awgn(noise_var=spec["noise_var"], field=spec["field"])
