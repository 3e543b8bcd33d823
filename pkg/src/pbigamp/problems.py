"""Seeded experiment generators, metrics, and counting bounds.

Each generator is a pure function of its arguments: identical seeds give
bit-identical instances.  Instances bundle the tensorization, ground truth,
observations, the measurement channel, and oracle priors, plus enough
metadata to evaluate family-appropriate metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import dft

from . import channels as ch
from . import parametrization as pz

__all__ = [
    "ProblemInstance",
    "Metrics",
    "gen_iid",
    "gen_self_calibration",
    "gen_matrix_uncertainty",
    "gen_blind_deconv",
    "gen_matrix_cs",
    "evaluate",
    "counting_bound",
    "save_instance",
    "load_instance",
    "qpsk_decisions",
    "symbol_error_rate",
]

DB_FLOOR = -300.0

# how each family resolves the bilinear scale ambiguity when scoring
FAMILY_AMBIGUITY = {
    "iid": "scalar_align",
    "self_calibration": "lifted",
    "matrix_uncertainty": "none",
    "blind_deconv": "scalar_align",
    "matrix_cs": "lifted",
}


@dataclass
class ProblemInstance:
    tensorization: pz.Tensorization
    b: np.ndarray               # unknown part, length Nb
    c: np.ndarray               # unknown part, length Nc
    y: np.ndarray
    channel: ch.Awgn
    prior_b: ch.InputDenoiser | None
    prior_c: tuple
    family: str
    seed: int
    meta: dict = field(default_factory=dict)

    def full_b(self):
        out = np.empty(self.tensorization.Nb + 1, dtype=self.tensorization.dtype)
        out[0] = self.tensorization.b0
        out[1:] = self.b
        return out

    def full_c(self):
        out = np.empty(self.tensorization.Nc + 1, dtype=self.tensorization.dtype)
        out[0] = self.tensorization.c0
        out[1:] = self.c
        return out

    def noiseless(self):
        return self.tensorization.z_full(self.full_b(), self.full_c())


@dataclass(frozen=True)
class Metrics:
    nmse_b_db: float
    nmse_c_db: float
    lifted_nmse_db: float
    ser: float                  # nan unless the signal is a finite alphabet
    success: bool
    threshold_db: float
    ambiguity: str


def _cn(rng, size, var=1.0):
    return np.sqrt(var / 2.0) * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def _sparse_support(rng, n, k):
    idx = rng.choice(n, size=k, replace=False)
    idx.sort()
    return idx


def gen_iid(Nb, Nc, M, K_b, K_c, seed, nu_c=1.0, snr_db=None) -> ProblemInstance:
    """Unstructured complex tensor with exactly-sparse factors; noiseless by default."""
    if not (1 <= K_b <= Nb and 1 <= K_c <= Nc):
        raise ValueError("need 1 <= K_b <= Nb and 1 <= K_c <= Nc")
    rng = np.random.default_rng(seed)
    tensor = _cn(rng, (M, Nb + 1, Nc + 1))
    t9n = pz.DenseTensor(tensor, b0=0.0, c0=0.0)
    b = np.zeros(Nb, dtype=complex)
    b[_sparse_support(rng, Nb, K_b)] = _cn(rng, K_b)
    c = np.zeros(Nc, dtype=complex)
    c[_sparse_support(rng, Nc, K_c)] = _cn(rng, K_c, nu_c)
    inst = ProblemInstance(t9n, b, c, None, ch.Awgn(0.0, "complex"),
                           ch.BernoulliGaussian(K_b / Nb, 0.0, 1.0, "complex"),
                           (ch.BernoulliGaussian(K_c / Nc, 0.0, nu_c, "complex"),),
                           "iid", seed, {"Nb": Nb, "Nc": Nc, "M": M, "K_b": K_b, "K_c": K_c})
    _observe(inst, rng, snr_db)
    return inst


def _observe(inst, rng, snr_db):
    z = inst.noiseless()
    if snr_db is None:
        inst.y = z
        return
    nu_w = float(np.mean(np.abs(z) ** 2)) / (10.0 ** (snr_db / 10.0))
    inst.channel = ch.Awgn(nu_w, inst.channel.field)
    inst.y = z + inst.channel.sample_noise(rng, z.shape)
    inst.meta["snr_db"] = snr_db


def gen_self_calibration(Nb, K, seed, Nc=256, M=128, nu_c=1.0) -> ProblemInstance:
    """Unknown subspace-structured output gains on a known Gaussian operator.

    Gains live in the span of the first Nb columns of the M-point unitary
    DFT matrix; the signal is K-sparse.  Truth is real-valued but the
    measurements are complex, so both factors are modeled circular-complex.
    """
    if Nb > M:
        raise ValueError("need Nb <= M")
    if K > Nc:
        raise ValueError("need K <= Nc")
    rng = np.random.default_rng(seed)
    H = dft(M, scale="sqrtn")[:, :Nb]
    A = rng.standard_normal((M, Nc))
    ops = [None] + [H[:, i][:, None] * A for i in range(Nb)]
    t9n = pz.MultiSnapshot(ops, L=1, b0=0.0)
    b = rng.standard_normal(Nb).astype(complex)
    c = np.zeros(Nc, dtype=complex)
    c[_sparse_support(rng, Nc, K)] = rng.standard_normal(K) * np.sqrt(nu_c)
    inst = ProblemInstance(t9n, b, c, None, ch.Awgn(0.0, "complex"),
                           ch.Gaussian(0.0, 1.0, "complex"),
                           (ch.BernoulliGaussian(K / Nc, 0.0, nu_c, "complex"),),
                           "self_calibration", seed,
                           {"Nb": Nb, "Nc": Nc, "M": M, "K": K})
    _observe(inst, rng, None)
    return inst


def gen_matrix_uncertainty(M, seed, Nc=256, K=10, Nb=10, snr_db=40.0) -> ProblemInstance:
    """Sparse recovery through a sensing matrix with unknown perturbation weights."""
    if K > Nc:
        raise ValueError("need K <= Nc")
    rng = np.random.default_rng(seed)
    a0 = rng.standard_normal((M, Nc)) * np.sqrt(10.0)
    ops = [a0] + [rng.standard_normal((M, Nc)) for _ in range(Nb)]
    t9n = pz.MultiSnapshot(ops, L=1, b0=1.0)
    b = rng.standard_normal(Nb)
    c = np.zeros(Nc)
    c[_sparse_support(rng, Nc, K)] = rng.standard_normal(K)
    inst = ProblemInstance(t9n, b, c, None, ch.Awgn(0.0, "real"),
                           ch.Gaussian(0.0, 1.0, "real"),
                           (ch.BernoulliGaussian(K / Nc, 0.0, 1.0, "real"),),
                           "matrix_uncertainty", seed,
                           {"Nb": Nb, "Nc": Nc, "M": M, "K": K})
    _observe(inst, rng, snr_db)
    return inst


def conv_slices(Np, Ng, Nb, dtype=complex):
    """Shifted-identity slices of the guarded linear-convolution operator."""
    N = Np - Ng
    out = []
    for tap in range(Nb):
        rows = np.arange(N) + tap
        out.append(sp.csr_matrix((np.ones(N, dtype=dtype), (rows, np.arange(N))),
                                 shape=(Np, N)))
    return out


def gen_blind_deconv(seed, Np=256, Ng=64, Nb=63, L=3, alphabet="qpsk",
                     snr_db=30.0) -> ProblemInstance:
    """Joint channel/symbol recovery from guarded linear convolution outputs."""
    if Ng < Nb - 1:
        raise ValueError("guard too short for the channel: need Ng >= Nb - 1")
    if alphabet not in ("gaussian", "qpsk"):
        raise ValueError("alphabet must be 'gaussian' or 'qpsk'")
    rng = np.random.default_rng(seed)
    ops = [None] + conv_slices(Np, Ng, Nb)
    t9n = pz.MultiSnapshot(ops, L=L, b0=0.0)
    b = _cn(rng, Nb)
    n_sym = (Np - Ng) * L
    if alphabet == "qpsk":
        c = rng.choice(np.asarray(ch.qpsk_points()), size=n_sym)
        prior_c = ch.FiniteAlphabet.qpsk()
    else:
        c = _cn(rng, n_sym)
        prior_c = ch.Gaussian(0.0, 1.0, "complex")
    inst = ProblemInstance(t9n, b, c, None, ch.Awgn(0.0, "complex"),
                           ch.Gaussian(0.0, 1.0, "complex"), (prior_c,),
                           "blind_deconv", seed,
                           {"Np": Np, "Ng": Ng, "Nb": Nb, "L": L, "alphabet": alphabet})
    _observe(inst, rng, snr_db)
    return inst


def gen_matrix_cs(R, xi, M, seed, rows=100, cols=100, K_phi=50,
                  snr_db=None) -> ProblemInstance:
    """Trace probes of a rank-R matrix plus sparse outliers.

    Probe matrices carry K_phi circular-Gaussian nonzeros each; outliers
    have amplitudes uniform on [-10, 10] with uniform phases.  Measurements
    follow the transpose-trace convention tr(Phi^T (low_rank + sparse)).
    """
    if R > min(rows, cols):
        raise ValueError("rank exceeds matrix dimensions")
    rng = np.random.default_rng(seed)
    phis = []
    for _ in range(M):
        pos = rng.choice(rows * cols, size=K_phi, replace=False)
        vals = _cn(rng, K_phi)
        phis.append(sp.csr_matrix((vals, (pos % rows, pos // rows)), shape=(rows, cols)))

    n_out = int(round(xi * rows * cols))
    s_mat = np.zeros((rows, cols), dtype=complex)
    if n_out:
        pos = rng.choice(rows * cols, size=n_out, replace=False)
        amps = rng.uniform(-10.0, 10.0, size=n_out)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_out)
        s_mat[pos % rows, pos // rows] = amps * np.exp(1j * phases)
    nu_s = 100.0 / 3.0          # second moment of the outlier amplitudes

    if R == 0:
        # pure sparse recovery: one known linear operator, no bilinear part
        probe_h = pz._stack_probes_conj([p.conj() for p in phis], rows, cols)
        t9n = pz.MultiSnapshot([probe_h], L=1, b0=1.0)
        b = np.zeros(0, dtype=complex)
        c = s_mat.reshape(-1, order="F")
        priors_c = (ch.BernoulliGaussian(max(xi, 1e-6), 0.0, nu_s, "complex"),)
        prior_b = None
    else:
        conj_phis = [p.conj() for p in phis]
        t9n = pz.LowRankPlusSparse(conj_phis, rank=R, b0=1.0)
        bmat = _cn(rng, (R, rows))
        cmat = _cn(rng, (R, cols))
        b = bmat.reshape(-1, order="F")
        c = np.concatenate([cmat.reshape(-1, order="F"), s_mat.reshape(-1, order="F")])
        priors_c = (ch.Gaussian(0.0, 1.0, "complex"),
                    ch.BernoulliGaussian(max(xi, 1e-6), 0.0, nu_s, "complex"))
        prior_b = ch.Gaussian(0.0, 1.0, "complex")
    inst = ProblemInstance(t9n, b, c, None, ch.Awgn(0.0, "complex"),
                           prior_b, priors_c, "matrix_cs", seed,
                           {"R": R, "xi": xi, "rows": rows, "cols": cols,
                            "M": M, "K_phi": K_phi})
    _observe(inst, rng, snr_db)
    return inst


# ---------------------------------------------------------------------------
# metrics


def _nmse(truth, est):
    denom = float(np.real(np.vdot(truth, truth)))
    if denom <= 0:
        raise ValueError("NMSE undefined for zero-norm truth")
    err = np.asarray(est) - np.asarray(truth)
    return float(np.real(np.vdot(err, err))) / denom


def _to_db(x):
    if x <= 10.0 ** (DB_FLOOR / 10.0):
        return DB_FLOOR
    return 10.0 * np.log10(x)


def scalar_align(truth, est):
    """Least-squares scale aligning est to truth; returns (alpha, aligned est)."""
    denom = float(np.real(np.vdot(est, est)))
    if denom <= 0:
        return 1.0, np.asarray(est)
    alpha = np.vdot(est, truth) / denom
    return alpha, alpha * np.asarray(est)


def qpsk_decisions(x):
    pts = np.asarray(ch.qpsk_points())
    return np.argmax(np.real(np.asarray(x)[..., None] * pts.conj()), axis=-1)


def symbol_error_rate(c_true, c_est):
    """Best symbol error rate over the four constellation rotations."""
    truth_idx = qpsk_decisions(c_true)
    best = 1.0
    for rot in np.asarray(ch.qpsk_points()):
        best = min(best, float(np.mean(qpsk_decisions(rot * np.asarray(c_est)) != truth_idx)))
    return best


def _lifted_nmse(inst: ProblemInstance, bhat, chat):
    if inst.family == "matrix_cs":
        r = inst.meta["R"]
        if r == 0:
            return np.nan
        rows, cols = inst.meta["rows"], inst.meta["cols"]
        n1 = r * cols
        truth = (inst.b.reshape(r, rows, order="F").T
                 @ inst.c[:n1].reshape(r, cols, order="F"))
        est = (np.asarray(bhat).reshape(r, rows, order="F").T
               @ np.asarray(chat)[:n1].reshape(r, cols, order="F"))
        return _nmse(truth, est)
    truth = np.outer(inst.b, inst.c)
    return _nmse(truth, np.outer(np.asarray(bhat), np.asarray(chat)))


def evaluate(inst: ProblemInstance, bhat, chat, ambiguity=None,
             threshold_db: float = -60.0) -> Metrics:
    """Score an estimate pair against the instance ground truth.

    ``ambiguity`` picks the scale-resolution policy ('none', 'scalar_align',
    or 'lifted'); by default each family uses its conventional policy.
    """
    if ambiguity is None:
        ambiguity = FAMILY_AMBIGUITY[inst.family]
        if inst.family == "matrix_cs" and inst.meta.get("R", 1) == 0:
            ambiguity = "none"
    if ambiguity not in ("none", "scalar_align", "lifted"):
        raise ValueError(f"unknown ambiguity policy {ambiguity!r}")
    bhat = np.asarray(bhat)
    chat = np.asarray(chat)
    if bhat.shape != inst.b.shape or chat.shape != inst.c.shape:
        raise ValueError("estimate shapes must match the instance truth")

    has_b = inst.b.size > 0
    if ambiguity == "scalar_align" and has_b:
        alpha, b_use = scalar_align(inst.b, bhat)
        c_use = chat / alpha if alpha != 0 else chat
    else:
        b_use, c_use = bhat, chat

    nmse_b = _nmse(inst.b, b_use) if has_b else np.nan
    nmse_c = _nmse(inst.c, c_use)
    lifted = _lifted_nmse(inst, bhat, chat) if has_b else np.nan

    ser = np.nan
    if inst.meta.get("alphabet") == "qpsk":
        ser = symbol_error_rate(inst.c, chat)

    thr = 10.0 ** (threshold_db / 10.0)
    if ambiguity == "lifted":
        success = bool(lifted < thr)
    elif has_b:
        success = bool(nmse_b < thr and nmse_c < thr)
    else:
        success = bool(nmse_c < thr)

    return Metrics(
        nmse_b_db=_to_db(nmse_b) if has_b else np.nan,
        nmse_c_db=_to_db(nmse_c),
        lifted_nmse_db=_to_db(lifted) if np.isfinite(lifted) else np.nan,
        ser=ser, success=success, threshold_db=threshold_db, ambiguity=ambiguity)


def counting_bound(family: str, **dims) -> float:
    """Minimal measurement count below which exact recovery is impossible."""
    if family == "iid":
        return 2.0 * dims["K"]
    if family == "self_calibration":
        return dims["Nb"] + dims["K"]
    if family == "matrix_cs":
        rows = dims.get("rows", 100)
        cols = dims.get("cols", 100)
        return dims["R"] * (rows + cols - dims["R"]) + dims["xi"] * rows * cols
    raise ValueError(f"no counting bound for family {family!r}")


# ---------------------------------------------------------------------------
# instance serialization


def _json_default(obj):
    if isinstance(obj, complex):
        return {"__complex__": [obj.real, obj.imag]}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.complexfloating,)):
        return {"__complex__": [float(obj.real), float(obj.imag)]}
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _json_object_hook(d):
    if "__complex__" in d:
        re, im = d["__complex__"]
        return complex(re, im)
    return d


def save_instance(path, inst: ProblemInstance):
    extra = {
        "y": inst.y,
        "b_true": inst.b,
        "c_true": inst.c,
        "family": inst.family,
        "seed": inst.seed,
        "meta_json": json.dumps(inst.meta, default=_json_default),
        "channel_json": json.dumps(inst.channel.to_spec(), default=_json_default),
        "prior_c_json": json.dumps([p.to_spec() for p in inst.prior_c], default=_json_default),
    }
    if inst.prior_b is not None:
        extra["prior_b_json"] = json.dumps(inst.prior_b.to_spec(), default=_json_default)
    pz.save_container(path, inst.tensorization, extra)


def load_instance(path) -> ProblemInstance:
    t9n, extra = pz.load_container(path)
    loads = lambda key: json.loads(str(extra[key].item() if extra[key].ndim == 0 else extra[key]),
                                   object_hook=_json_object_hook)
    prior_b = None
    if "prior_b_json" in extra:
        prior_b = ch.denoiser_from_spec(loads("prior_b_json"))
    prior_c = tuple(ch.denoiser_from_spec(s) for s in loads("prior_c_json"))
    return ProblemInstance(
        tensorization=t9n,
        b=np.asarray(extra["b_true"]),
        c=np.asarray(extra["c_true"]),
        y=np.asarray(extra["y"]),
        channel=ch.channel_from_spec(loads("channel_json")),
        prior_b=prior_b,
        prior_c=prior_c,
        family=str(extra["family"].item() if extra["family"].ndim == 0 else extra["family"]),
        seed=int(extra["seed"]),
        meta=loads("meta_json"),
    )
