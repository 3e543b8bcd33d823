"""Structured views of the known bilinear measurement tensor.

A :class:`Tensorization` represents the known 3-way array coupling the two
parameter vectors to the measurement vector, including the frozen offset
entries at index 0 of each side.  The interface exposes exactly the
contractions the scalar-variance solver needs; concrete backends implement
them densely or through structure (multi-snapshot, low-rank trace,
matrix-product, low-rank-plus-sparse) without ever materializing the tensor.

Index conventions: parameter vectors carry the known offsets in slot 0, so
``bhat`` has length Nb+1 and ``chat`` length Nc+1.  Offset entries take part
in every mean contraction but are structurally excluded from all variance
sums, which run over the unknown coordinates only.  Matrix/vector
identifications use column-major (Fortran) vectorization throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensorization",
    "TensorFrobSums",
    "DenseTensor",
    "MultiSnapshot",
    "LowRankTrace",
    "LowRankPlusSparse",
    "MatrixProduct",
    "ImplicitOperator",
    "from_matrix_product",
    "lift_matrix_uncertainty",
    "save_container",
    "load_container",
    "tensorization_from_payload",
]

CONTAINER_VERSION = 1
DEFAULT_DENSE_CAP = 50_000_000


def _fvec(x):
    return np.asarray(x).reshape(-1, order="F")


def _fmat(x, rows, cols):
    return np.asarray(x).reshape(rows, cols, order="F")


def _sqnorm(x):
    x = np.asarray(x)
    return float(np.real(np.vdot(x, x)))


@dataclass(frozen=True)
class TensorFrobSums:
    """Frobenius partial sums of the tensor over the unknown index ranges.

    ``per_j[j]`` sums the squared norms over all unknown b-indices for the
    j-th unknown c coordinate; ``per_i`` mirrors it; ``total`` sums both.
    Block-resolved views support per-block scalar variances on c.
    """

    per_j: np.ndarray           # (Nc,)
    per_i_blocks: np.ndarray    # (n_blocks, Nb)
    totals_blocks: np.ndarray   # (n_blocks,)

    @property
    def per_i(self):
        return self.per_i_blocks.sum(axis=0)

    @property
    def total(self):
        return float(self.totals_blocks.sum())


@dataclass(frozen=True)
class Forward:
    zstar: np.ndarray
    energy_b: float
    energy_c_blocks: np.ndarray


@dataclass(frozen=True)
class Pull:
    energy_b: float
    energy_c_blocks: np.ndarray
    adjoint_b: np.ndarray
    adjoint_c: np.ndarray


class Tensorization:
    """Abstract linear-operator view of the measurement tensor."""

    M: int
    Nb: int
    Nc: int
    b0: complex
    c0: complex
    dtype: np.dtype
    c_block_sizes: tuple

    _frob_cache: TensorFrobSums | None = None

    # -- required contractions -------------------------------------------

    def z_full(self, bhat, chat) -> np.ndarray:
        """Full bilinear contraction at (bhat, chat), offsets included."""
        raise NotImplementedError

    def adjoint_b(self, chat, s) -> np.ndarray:
        """Conjugated inner products of the unknown-b row contractions with s."""
        raise NotImplementedError

    def adjoint_c(self, bhat, s) -> np.ndarray:
        raise NotImplementedError

    def row_energy_b(self, chat) -> float:
        """Sum of squared norms of the unknown-b row contractions at chat."""
        raise NotImplementedError

    def row_energy_c_blocks(self, bhat) -> np.ndarray:
        raise NotImplementedError

    def _frob_sums(self) -> TensorFrobSums:
        raise NotImplementedError

    # -- shared surface ----------------------------------------------------

    def row_energy_c(self, bhat) -> float:
        return float(self.row_energy_c_blocks(bhat).sum())

    def tensor_frob_sums(self) -> TensorFrobSums:
        # pure function of the tensor; computed once and cached
        if self._frob_cache is None:
            object.__setattr__(self, "_frob_cache", self._frob_sums())
        return self._frob_cache

    def forward(self, bhat, chat) -> Forward:
        return Forward(self.z_full(bhat, chat), self.row_energy_b(chat),
                       self.row_energy_c_blocks(bhat))

    def pull(self, bhat, chat, s) -> Pull:
        return Pull(self.row_energy_b(chat), self.row_energy_c_blocks(bhat),
                    self.adjoint_b(chat, s), self.adjoint_c(bhat, s))

    def offset_frob_sums(self):
        """Frobenius sums of the offset row/column/corner of the tensor."""
        one_b = np.zeros(self.Nb + 1, dtype=self.dtype)
        one_b[0] = 1.0
        f01 = float(self.row_energy_c_blocks(one_b).sum())
        one_c = np.zeros(self.Nc + 1, dtype=self.dtype)
        one_c[0] = 1.0
        f10 = float(self.row_energy_b(one_c))
        return f01, f10, self._offset_corner_sq()

    def _offset_corner_sq(self) -> float:
        return 0.0

    def materialize_dense(self, max_entries: int = DEFAULT_DENSE_CAP) -> "DenseTensor":
        n_entries = self.M * (self.Nb + 1) * (self.Nc + 1)
        if n_entries > max_entries:
            raise ValueError(
                f"refusing to materialize {self.M}x{self.Nb + 1}x{self.Nc + 1} tensor "
                f"({n_entries} entries > cap {max_entries})")
        return DenseTensor(self._dense_entries(), b0=self.b0, c0=self.c0,
                           c_block_sizes=self.c_block_sizes)

    def _dense_entries(self) -> np.ndarray:
        raise NotImplementedError

    def payload(self) -> dict:
        raise NotImplementedError

    # -- validation helpers -------------------------------------------------

    def _check_b(self, bhat):
        bhat = np.asarray(bhat)
        if bhat.shape != (self.Nb + 1,):
            raise ValueError(f"bhat must have shape ({self.Nb + 1},), got {bhat.shape}")
        return bhat

    def _check_c(self, chat):
        chat = np.asarray(chat)
        if chat.shape != (self.Nc + 1,):
            raise ValueError(f"chat must have shape ({self.Nc + 1},), got {chat.shape}")
        return chat

    def _check_s(self, s):
        s = np.asarray(s)
        if s.shape != (self.M,):
            raise ValueError(f"s must have shape ({self.M},), got {s.shape}")
        return s

    def _check_offsets(self, bhat, chat):
        if bhat[0] != self.b0 or chat[0] != self.c0:
            raise ValueError("offset entries bhat[0], chat[0] must equal the known b0, c0")


class DenseTensor(Tensorization):
    """Explicit M x (Nb+1) x (Nc+1) tensor."""

    def __init__(self, tensor, b0=0.0, c0=0.0, c_block_sizes=None):
        tensor = np.asarray(tensor)
        if tensor.ndim != 3:
            raise ValueError("dense tensor must be 3-dimensional")
        if not np.all(np.isfinite(tensor)):
            raise ValueError("dense tensor entries must be finite")
        self.tensor = tensor
        self.M = tensor.shape[0]
        self.Nb = tensor.shape[1] - 1
        self.Nc = tensor.shape[2] - 1
        self.dtype = tensor.dtype
        self.b0 = tensor.dtype.type(b0)
        self.c0 = tensor.dtype.type(c0)
        self.c_block_sizes = tuple(c_block_sizes) if c_block_sizes else (self.Nc,)
        if sum(self.c_block_sizes) != self.Nc:
            raise ValueError("c block sizes must sum to Nc")
        # flattened views for BLAS-backed contractions
        self._flat_b = tensor.reshape(self.M * (self.Nb + 1), self.Nc + 1)
        self._flat_c = np.ascontiguousarray(tensor.swapaxes(1, 2)).reshape(
            self.M * (self.Nc + 1), self.Nb + 1)
        self._block_slices = _block_slices(self.c_block_sizes)

    def _rows_b(self, chat):
        return (self._flat_b @ chat).reshape(self.M, self.Nb + 1)

    def _rows_c(self, bhat):
        return (self._flat_c @ bhat).reshape(self.M, self.Nc + 1)

    def z_full(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        if self.Nb <= self.Nc:
            return self._rows_b(chat) @ bhat
        return self._rows_c(bhat) @ chat

    def adjoint_b(self, chat, s):
        chat, s = self._check_c(chat), self._check_s(s)
        rows = self._rows_b(chat)
        return rows[:, 1:].conj().T @ s

    def adjoint_c(self, bhat, s):
        bhat, s = self._check_b(bhat), self._check_s(s)
        cols = self._rows_c(bhat)
        return cols[:, 1:].conj().T @ s

    def row_energy_b(self, chat):
        chat = self._check_c(chat)
        return _sqnorm(self._rows_b(chat)[:, 1:])

    def row_energy_c_blocks(self, bhat):
        bhat = self._check_b(bhat)
        cols = self._rows_c(bhat)[:, 1:]
        sq = np.real(cols) ** 2
        if np.iscomplexobj(cols):
            sq = sq + np.imag(cols) ** 2
        return np.array([float(sq[:, sl].sum()) for sl in self._block_slices])

    def forward(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        rows = self._rows_b(chat)
        cols = self._rows_c(bhat)
        sq = np.real(cols[:, 1:]) ** 2
        if np.iscomplexobj(cols):
            sq = sq + np.imag(cols[:, 1:]) ** 2
        energy_c = np.array([float(sq[:, sl].sum()) for sl in self._block_slices])
        return Forward(rows @ bhat, _sqnorm(rows[:, 1:]), energy_c)

    def pull(self, bhat, chat, s):
        bhat, chat, s = self._check_b(bhat), self._check_c(chat), self._check_s(s)
        rows = self._rows_b(chat)
        cols = self._rows_c(bhat)
        sq = np.real(cols[:, 1:]) ** 2
        if np.iscomplexobj(cols):
            sq = sq + np.imag(cols[:, 1:]) ** 2
        energy_c = np.array([float(sq[:, sl].sum()) for sl in self._block_slices])
        return Pull(_sqnorm(rows[:, 1:]), energy_c,
                    rows[:, 1:].conj().T @ s, cols[:, 1:].conj().T @ s)

    def _frob_sums(self):
        sq = np.abs(self.tensor[:, 1:, 1:]) ** 2
        per_j = sq.sum(axis=(0, 1))
        per_i = sq.sum(axis=(0, 2))
        per_i_blocks = np.stack([
            (np.abs(self.tensor[:, 1:, 1 + sl.start:1 + sl.stop]) ** 2).sum(axis=(0, 2))
            for sl in self._block_slices])
        totals = np.array([per_j[sl].sum() for sl in self._block_slices])
        return TensorFrobSums(per_j, per_i_blocks, totals)

    def offset_frob_sums(self):
        sq = np.abs(self.tensor) ** 2
        return (float(sq[:, 0, 1:].sum()), float(sq[:, 1:, 0].sum()),
                float(sq[:, 0, 0].sum()))

    def _dense_entries(self):
        return self.tensor.copy()

    def payload(self):
        return {"backend": "dense", "tensor": self.tensor, "b0": self.b0, "c0": self.c0,
                "c_block_sizes": np.asarray(self.c_block_sizes)}


def _block_slices(sizes):
    out, start = [], 0
    for n in sizes:
        out.append(slice(start, start + n))
        start += n
    return tuple(out)


@dataclass(frozen=True)
class ImplicitOperator:
    """Callback form of a K x N operator slice with a declared multiply budget.

    ``matmat`` applies the operator to an N x L block, ``rmatmat`` applies the
    conjugate transpose to a K x L block.  ``mult_cost`` declares the multiply
    count of one matmat column, used only for operation accounting.
    """

    shape: tuple
    matmat: Callable
    rmatmat: Callable
    col_sq_norms: np.ndarray
    frob_sq: float
    mult_cost: int

    def to_dense(self):
        return np.asarray(self.matmat(np.eye(self.shape[1])))


def _is_sparse(x):
    return sp.issparse(x)


class MultiSnapshot(Tensorization):
    """Measurements of the form sum_i b_i A_i C with L stacked snapshots.

    ``operators`` holds Nb+1 slices of shape K x N; index 0 is the known
    offset operator (may be None for problems without a linear-in-c part).
    The c offset has no columns here, so c0 is fixed at 0.
    """

    def __init__(self, operators: Sequence, L: int, b0=0.0):
        if L < 1:
            raise ValueError("snapshot count must be >= 1")
        ops = list(operators)
        if not ops:
            raise ValueError("at least the offset operator slot is required")
        shapes = {op.shape for op in ops if op is not None}
        if len(shapes) != 1:
            raise ValueError("all operator slices must share one K x N shape")
        K, N = shapes.pop()
        self.K, self.N, self.L = int(K), int(N), int(L)
        self.Nb = len(ops) - 1
        self.M = self.K * self.L
        self.Nc = self.N * self.L
        self.c_block_sizes = (self.Nc,)
        self.mult_count = 0

        has_implicit = any(isinstance(op, ImplicitOperator) for op in ops)
        has_sparse = any(_is_sparse(op) for op in ops)
        if has_implicit:
            self._mode = "implicit"
            self._ops = [self._wrap(op, K, N) for op in ops]
            self.dtype = np.dtype(np.complex128)
        elif has_sparse:
            self._mode = "sparse"
            blocks = [sp.csr_matrix((K, N)) if op is None else sp.csr_matrix(op) for op in ops]
            self._stack = sp.vstack(blocks, format="csr")
            self.dtype = np.dtype(self._stack.dtype)
        else:
            self._mode = "dense"
            arrs = [np.zeros((K, N)) if op is None else np.asarray(op) for op in ops]
            self._a3 = np.stack(arrs)
            self.dtype = self._a3.dtype
        self.b0 = self.dtype.type(b0)
        self.c0 = self.dtype.type(0.0)
        self._gram = None
        self._col_sq = None   # (Nb+1, N) column norms, lazy

    @staticmethod
    def _wrap(op, K, N):
        if op is None:
            zero = np.zeros((K, N))
            return ImplicitOperator((K, N), lambda X: np.zeros((K, X.shape[1])),
                                    lambda X: np.zeros((N, X.shape[1])),
                                    np.zeros(N), 0.0, 0)
        if isinstance(op, ImplicitOperator):
            return op
        dense = op.toarray() if _is_sparse(op) else np.asarray(op)
        return ImplicitOperator(dense.shape, lambda X, A=dense: A @ X,
                                lambda X, A=dense: A.conj().T @ X,
                                np.sum(np.abs(dense) ** 2, axis=0),
                                float(np.sum(np.abs(dense) ** 2)), dense.size)

    # stacked products of every slice with a reshaped c vector
    def _snapshots(self, chat):
        C = _fmat(chat[1:], self.N, self.L)
        if self._mode == "dense":
            self.mult_count += self._a3.size * self.L
            return self._a3 @ C
        if self._mode == "sparse":
            self.mult_count += self._stack.nnz * self.L
            return (self._stack @ C).reshape(self.Nb + 1, self.K, self.L)
        self.mult_count += sum(op.mult_cost * self.L for op in self._ops)
        return np.stack([op.matmat(C) for op in self._ops])

    def _combined_adjoint(self, bhat, S):
        # applies (sum_i b_i A_i)^H to S
        if self._mode == "dense":
            ahat = np.tensordot(bhat, self._a3, axes=1)
            self.mult_count += self._a3.size + ahat.size * self.L
            return ahat.conj().T @ S
        if self._mode == "sparse":
            W = (np.conj(bhat)[:, None, None] * S[None, :, :]).reshape(-1, self.L)
            self.mult_count += W.size + self._stack.nnz * self.L
            return self._stack.conj().T @ W
        self.mult_count += sum(op.mult_cost * self.L for op in self._ops)
        out = np.zeros((self.N, self.L), dtype=np.result_type(self.dtype, S.dtype))
        for i, op in enumerate(self._ops):
            if bhat[i] != 0:
                out += np.conj(bhat[i]) * op.rmatmat(S)
        return out

    def _pair_gram(self):
        # (Nb+1)^2 pairwise Frobenius inner products of the slices
        if self._gram is not None:
            return self._gram
        n = self.Nb + 1
        G = np.zeros((n, n), dtype=np.complex128)
        if self._mode == "dense":
            G = np.einsum("ikn,jkn->ij", self._a3.conj(), self._a3)
        elif self._mode == "sparse":
            blocks = [self._stack[i * self.K:(i + 1) * self.K] for i in range(n)]
            for i in range(n):
                bi = blocks[i].conj()
                for j in range(i, n):
                    val = complex(bi.multiply(blocks[j]).sum())
                    G[i, j] = val
                    G[j, i] = np.conj(val)
        else:
            dense = [op.to_dense() for op in self._ops]
            G = np.einsum("ikn,jkn->ij", np.conj(np.stack(dense)), np.stack(dense))
        self._gram = G
        return G

    def _column_norms(self):
        if self._col_sq is not None:
            return self._col_sq
        n = self.Nb + 1
        if self._mode == "dense":
            cs = np.sum(np.abs(self._a3) ** 2, axis=1)
        elif self._mode == "sparse":
            sq = self._stack.multiply(self._stack.conj()).real
            cs = np.vstack([np.asarray(sq[i * self.K:(i + 1) * self.K].sum(axis=0)).ravel()
                            for i in range(n)])
        else:
            cs = np.vstack([op.col_sq_norms for op in self._ops])
        self._col_sq = cs
        return cs

    def z_full(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        Y = self._snapshots(chat)
        self.mult_count += Y.size
        return _fvec(np.tensordot(bhat, Y, axes=1))

    def adjoint_b(self, chat, s):
        chat, s = self._check_c(chat), self._check_s(s)
        Y = self._snapshots(chat)
        S = _fmat(s, self.K, self.L)
        self.mult_count += Y.size
        return np.einsum("ikl,kl->i", Y[1:].conj(), S)

    def adjoint_c(self, bhat, s):
        bhat, s = self._check_b(bhat), self._check_s(s)
        S = _fmat(s, self.K, self.L)
        return _fvec(self._combined_adjoint(bhat, S))

    def row_energy_b(self, chat):
        chat = self._check_c(chat)
        Y = self._snapshots(chat)
        self.mult_count += Y[1:].size
        return _sqnorm(Y[1:])

    def row_energy_c_blocks(self, bhat):
        bhat = self._check_b(bhat)
        G = self._pair_gram()
        self.mult_count += G.size + len(bhat)
        return np.array([self.L * float(np.real(np.vdot(bhat, G @ bhat)))])

    def forward(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        Y = self._snapshots(chat)
        self.mult_count += 2 * Y.size
        zstar = _fvec(np.tensordot(bhat, Y, axes=1))
        return Forward(zstar, _sqnorm(Y[1:]), self.row_energy_c_blocks(bhat))

    def pull(self, bhat, chat, s):
        bhat, chat, s = self._check_b(bhat), self._check_c(chat), self._check_s(s)
        Y = self._snapshots(chat)
        S = _fmat(s, self.K, self.L)
        self.mult_count += 2 * Y.size
        adj_b = np.einsum("ikl,kl->i", Y[1:].conj(), S)
        adj_c = _fvec(self._combined_adjoint(bhat, S))
        return Pull(_sqnorm(Y[1:]), self.row_energy_c_blocks(bhat), adj_b, adj_c)

    def _frob_sums(self):
        cs = self._column_norms()
        per_j = np.tile(cs[1:].sum(axis=0), self.L)
        frob_each = cs.sum(axis=1)
        per_i = (self.L * frob_each[1:])[None, :]
        totals = np.array([self.L * float(frob_each[1:].sum())])
        return TensorFrobSums(per_j, per_i, totals)

    def offset_frob_sums(self):
        cs = self._column_norms()
        return (self.L * float(cs[0].sum()), 0.0, 0.0)

    def reset_mult_count(self):
        self.mult_count = 0

    def _dense_entries(self):
        Z = np.zeros((self.M, self.Nb + 1, self.Nc + 1), dtype=self.dtype)
        if self._mode == "dense":
            slices = self._a3
        elif self._mode == "sparse":
            slices = np.stack([self._stack[i * self.K:(i + 1) * self.K].toarray()
                               for i in range(self.Nb + 1)])
        else:
            slices = np.stack([op.to_dense() for op in self._ops])
        for i in range(self.Nb + 1):
            for l in range(self.L):
                rows = slice(l * self.K, (l + 1) * self.K)
                cols = slice(1 + l * self.N, 1 + (l + 1) * self.N)
                Z[rows, i, cols] = slices[i]
        return Z

    def payload(self):
        if self._mode == "implicit":
            raise ValueError("implicit-operator backends cannot be serialized")
        if self._mode == "sparse":
            coo = self._stack.tocoo()
            return {"backend": "multi_snapshot", "storage": "sparse",
                    "K": self.K, "N": self.N, "L": self.L, "b0": self.b0,
                    "n_ops": self.Nb + 1,
                    "rows": coo.row, "cols": coo.col, "vals": coo.data}
        return {"backend": "multi_snapshot", "storage": "dense",
                "K": self.K, "N": self.N, "L": self.L, "b0": self.b0,
                "stack": self._a3}


class LowRankTrace(Tensorization):
    """Trace measurements of a rank-limited product through sparse probes.

    Measurement m reads tr(Phi_m^H B^T C) with B of shape rank x K and C of
    shape rank x L.  Probe matrices may be sparse or dense, shape K x L.
    """

    def __init__(self, phis: Sequence, rank: int):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        phis = list(phis)
        if not phis:
            raise ValueError("at least one probe matrix is required")
        shapes = {p.shape for p in phis}
        if len(shapes) != 1:
            raise ValueError("all probe matrices must share one shape")
        K, L = shapes.pop()
        self.K, self.L, self.N = int(K), int(L), int(rank)
        self.M = len(phis)
        self.Nb = self.N * self.K
        self.Nc = self.N * self.L
        self.c_block_sizes = (self.Nc,)
        self.b0 = 0.0 + 0.0j
        self.c0 = 0.0 + 0.0j
        self.dtype = np.complex128
        self._probe_h = _stack_probes_conj(phis, K, L)   # (M, K*L), rows = vect(Phi_m)^H
        g1 = np.zeros((L, L), dtype=np.complex128)
        g2 = np.zeros((K, K), dtype=np.complex128)
        for p in phis:
            d = p.toarray() if _is_sparse(p) else np.asarray(p)
            g1 += d.conj().T @ d
            g2 += d @ d.conj().T
        self._gamma1, self._gamma2 = g1, g2

    def _bmat(self, bhat):
        return _fmat(bhat[1:], self.N, self.K)

    def _cmat(self, chat):
        return _fmat(chat[1:], self.N, self.L)

    def _probe_pull(self, s):
        # sum_m s_m Phi_m, shape K x L
        return _fmat(self._probe_h.conj().T @ s, self.K, self.L)

    def z_full(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        G = self._bmat(bhat).T @ self._cmat(chat)
        return self._probe_h @ _fvec(G)

    def adjoint_b(self, chat, s):
        chat, s = self._check_c(chat), self._check_s(s)
        W = self._probe_pull(s)
        return _fvec(self._cmat(chat).conj() @ W.T)

    def adjoint_c(self, bhat, s):
        bhat, s = self._check_b(bhat), self._check_s(s)
        W = self._probe_pull(s)
        return _fvec(self._bmat(bhat).conj() @ W)

    def row_energy_b(self, chat):
        chat = self._check_c(chat)
        C = self._cmat(chat)
        X = C.conj().T @ C
        return float(np.real((self._gamma1 * X.T).sum()))

    def row_energy_c_blocks(self, bhat):
        bhat = self._check_b(bhat)
        B = self._bmat(bhat)
        X = np.conj(B.conj().T @ B)
        return np.array([float(np.real((self._gamma2 * X.T).sum()))])

    def pull(self, bhat, chat, s):
        bhat, chat, s = self._check_b(bhat), self._check_c(chat), self._check_s(s)
        W = self._probe_pull(s)
        return Pull(self.row_energy_b(chat), self.row_energy_c_blocks(bhat),
                    _fvec(self._cmat(chat).conj() @ W.T),
                    _fvec(self._bmat(bhat).conj() @ W))

    def _frob_sums(self):
        per_j = np.repeat(np.real(np.diag(self._gamma1)), self.N)
        per_i = np.repeat(np.real(np.diag(self._gamma2)), self.N)[None, :]
        totals = np.array([self.N * float(np.real(np.trace(self._gamma1)))])
        return TensorFrobSums(per_j, per_i, totals)

    def _dense_entries(self):
        # probe_h rows already hold conj(vect(Phi_m)), matching the entries
        Z = np.zeros((self.M, self.Nb + 1, self.Nc + 1), dtype=self.dtype)
        coo = sp.coo_matrix(self._probe_h)
        for m, q, v in zip(coo.row, coo.col, coo.data):
            k, l = q % self.K, q // self.K
            for n in range(self.N):
                Z[m, 1 + k * self.N + n, 1 + l * self.N + n] = v
        return Z

    def payload(self):
        coo = sp.coo_matrix(self._probe_h)
        return {"backend": "low_rank_trace", "K": self.K, "L": self.L,
                "rank": self.N, "M": self.M,
                "rows": coo.row, "cols": coo.col, "vals": coo.data}


def _stack_probes_conj(phis, K, L):
    rows, cols, vals = [], [], []
    for m, p in enumerate(phis):
        coo = sp.coo_matrix(p)
        rows.append(np.full(coo.nnz, m))
        cols.append(coo.col * K + coo.row)   # column-major vect position
        vals.append(np.conj(coo.data.astype(np.complex128)))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(phis), K * L))


class LowRankPlusSparse(Tensorization):
    """Trace probes of a rank-limited part plus a linear sparse part.

    The c vector concatenates the rank-factor block and the sparse-matrix
    block; the linear part enters through the known offset b0.  The two c
    blocks carry independent scalar variances in the solver.
    """

    def __init__(self, phis: Sequence, rank: int, b0=1.0):
        self._lr = LowRankTrace(phis, rank)
        self.K, self.L, self.N = self._lr.K, self._lr.L, self._lr.N
        self.M = self._lr.M
        self.Nb = self._lr.Nb
        self._n1 = self._lr.Nc
        self._n2 = self.K * self.L
        self.Nc = self._n1 + self._n2
        self.c_block_sizes = (self._n1, self._n2)
        self.dtype = np.complex128
        self.b0 = np.complex128(b0)
        self.c0 = 0.0 + 0.0j
        self._probe_frob = float(np.real(np.trace(self._lr._gamma1)))

    def _split(self, chat):
        return chat[1:1 + self._n1], chat[1 + self._n1:]

    def z_full(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        c1, c2 = self._split(chat)
        G = self._lr._bmat(bhat).T @ _fmat(c1, self.N, self.L)
        return self._lr._probe_h @ (_fvec(G) + bhat[0] * c2)

    def adjoint_b(self, chat, s):
        chat, s = self._check_c(chat), self._check_s(s)
        c1, _ = self._split(chat)
        W = self._lr._probe_pull(s)
        return _fvec(_fmat(c1, self.N, self.L).conj() @ W.T)

    def adjoint_c(self, bhat, s):
        bhat, s = self._check_b(bhat), self._check_s(s)
        W = self._lr._probe_pull(s)
        return np.concatenate([_fvec(self._lr._bmat(bhat).conj() @ W),
                               np.conj(bhat[0]) * _fvec(W)])

    def row_energy_b(self, chat):
        chat = self._check_c(chat)
        c1, _ = self._split(chat)
        C = _fmat(c1, self.N, self.L)
        X = C.conj().T @ C
        return float(np.real((self._lr._gamma1 * X.T).sum()))

    def row_energy_c_blocks(self, bhat):
        bhat = self._check_b(bhat)
        lr = self._lr.row_energy_c_blocks(bhat)[0]
        return np.array([lr, float(abs(bhat[0]) ** 2) * self._probe_frob])

    def pull(self, bhat, chat, s):
        bhat, chat, s = self._check_b(bhat), self._check_c(chat), self._check_s(s)
        W = self._lr._probe_pull(s)
        c1, _ = self._split(chat)
        adj_c = np.concatenate([_fvec(self._lr._bmat(bhat).conj() @ W),
                                np.conj(bhat[0]) * _fvec(W)])
        return Pull(self.row_energy_b(chat), self.row_energy_c_blocks(bhat),
                    _fvec(_fmat(c1, self.N, self.L).conj() @ W.T), adj_c)

    def _frob_sums(self):
        lr = self._lr._frob_sums()
        per_j = np.concatenate([lr.per_j, np.zeros(self._n2)])
        per_i = np.vstack([lr.per_i_blocks[0][None, :], np.zeros((1, self.Nb))])
        totals = np.array([lr.totals_blocks[0], 0.0])
        return TensorFrobSums(per_j, per_i, totals)

    def _dense_entries(self):
        Z = np.zeros((self.M, self.Nb + 1, self.Nc + 1), dtype=self.dtype)
        Z[:, :, :1 + self._n1] = self._lr._dense_entries()
        Z[:, 0, 1 + self._n1:] = self._lr._probe_h.toarray()
        return Z

    def payload(self):
        p = self._lr.payload()
        p["backend"] = "low_rank_plus_sparse"
        p["b0"] = self.b0
        return p


class MatrixProduct(Tensorization):
    """Plain matrix-product measurements: every entry of B @ C is observed."""

    def __init__(self, K: int, N: int, L: int, dtype=np.complex128):
        if min(K, N, L) < 1:
            raise ValueError("K, N, L must all be >= 1")
        self.K, self.N, self.L = int(K), int(N), int(L)
        self.M = self.K * self.L
        self.Nb = self.K * self.N
        self.Nc = self.N * self.L
        self.c_block_sizes = (self.Nc,)
        self.dtype = np.dtype(dtype)
        self.b0 = self.dtype.type(0.0)
        self.c0 = self.dtype.type(0.0)

    def _bmat(self, bhat):
        return _fmat(bhat[1:], self.K, self.N)

    def _cmat(self, chat):
        return _fmat(chat[1:], self.N, self.L)

    def z_full(self, bhat, chat):
        bhat, chat = self._check_b(bhat), self._check_c(chat)
        self._check_offsets(bhat, chat)
        return _fvec(self._bmat(bhat) @ self._cmat(chat))

    def adjoint_b(self, chat, s):
        chat, s = self._check_c(chat), self._check_s(s)
        S = _fmat(s, self.K, self.L)
        return _fvec(S @ self._cmat(chat).conj().T)

    def adjoint_c(self, bhat, s):
        bhat, s = self._check_b(bhat), self._check_s(s)
        S = _fmat(s, self.K, self.L)
        return _fvec(self._bmat(bhat).conj().T @ S)

    def row_energy_b(self, chat):
        chat = self._check_c(chat)
        return self.K * _sqnorm(chat[1:])

    def row_energy_c_blocks(self, bhat):
        bhat = self._check_b(bhat)
        return np.array([self.L * _sqnorm(bhat[1:])])

    def _frob_sums(self):
        return TensorFrobSums(np.full(self.Nc, float(self.K)),
                              np.full((1, self.Nb), float(self.L)),
                              np.array([float(self.K * self.N * self.L)]))

    def _dense_entries(self):
        Z = np.zeros((self.M, self.Nb + 1, self.Nc + 1), dtype=self.dtype)
        for k in range(self.K):
            for n in range(self.N):
                for ll in range(self.L):
                    Z[ll * self.K + k, 1 + n * self.K + k, 1 + ll * self.N + n] = 1.0
        return Z

    def payload(self):
        return {"backend": "matrix_product", "K": self.K, "N": self.N, "L": self.L,
                "real": self.dtype.kind == "f"}


def from_matrix_product(K: int, N: int, L: int, dtype=np.complex128) -> MatrixProduct:
    """Tensorization of the plain two-factor product with K x N and N x L factors."""
    return MatrixProduct(K, N, L, dtype=dtype)


def lift_matrix_uncertainty(operators: Sequence, L: int = 1, b0=1.0) -> MultiSnapshot:
    """Stack a known operator plus uncertainty directions into a tensorization.

    ``operators[0]`` is the known part (weighted by the fixed offset b0);
    the remaining slices are the unknown-coefficient directions.
    """
    return MultiSnapshot(operators, L=L, b0=b0)


# ---------------------------------------------------------------------------
# container serialization


def save_container(path, t9n: Tensorization, extra: dict | None = None):
    """Write a tensorization (plus optional metadata arrays) to an npz container."""
    payload = {"container_version": CONTAINER_VERSION}
    payload.update({f"t9n_{k}": v for k, v in t9n.payload().items()})
    for k, v in (extra or {}).items():
        if k in payload:
            raise ValueError(f"reserved key {k!r}")
        payload[k] = v
    np.savez(path, **payload)


def load_container(path):
    """Read a container written by :func:`save_container`.

    Returns (tensorization, extras) where extras holds every non-backend key.
    """
    with np.load(path, allow_pickle=False) as data:
        version = int(data["container_version"])
        if version > CONTAINER_VERSION:
            raise ValueError(f"container version {version} is newer than supported")
        t9n_keys = {k[len("t9n_"):]: data[k] for k in data.files if k.startswith("t9n_")}
        extras = {k: data[k] for k in data.files
                  if not k.startswith("t9n_") and k != "container_version"}
    return tensorization_from_payload(t9n_keys), extras


def _item(v):
    return v.item() if isinstance(v, np.ndarray) and v.ndim == 0 else v


def tensorization_from_payload(p: dict) -> Tensorization:
    backend = str(_item(p["backend"]))
    if backend == "dense":
        return DenseTensor(p["tensor"], b0=_item(p["b0"]), c0=_item(p["c0"]),
                           c_block_sizes=tuple(int(x) for x in np.atleast_1d(p["c_block_sizes"])))
    if backend == "multi_snapshot":
        K, N, L = int(_item(p["K"])), int(_item(p["N"])), int(_item(p["L"]))
        if str(_item(p["storage"])) == "dense":
            ops = list(p["stack"])
        else:
            n_ops = int(_item(p["n_ops"]))
            stack = sp.csr_matrix((p["vals"], (p["rows"], p["cols"])),
                                  shape=(n_ops * K, N))
            ops = [stack[i * K:(i + 1) * K] for i in range(n_ops)]
        return MultiSnapshot(ops, L=L, b0=_item(p["b0"]))
    if backend in ("low_rank_trace", "low_rank_plus_sparse"):
        K, L = int(_item(p["K"])), int(_item(p["L"]))
        M, rank = int(_item(p["M"])), int(_item(p["rank"]))
        probe_h = sp.csr_matrix((p["vals"], (p["rows"], p["cols"])), shape=(M, K * L))
        phis = _probes_from_stack(probe_h, K, L)
        if backend == "low_rank_trace":
            return LowRankTrace(phis, rank)
        return LowRankPlusSparse(phis, rank, b0=_item(p["b0"]))
    if backend == "matrix_product":
        dtype = np.float64 if bool(_item(p["real"])) else np.complex128
        return MatrixProduct(int(_item(p["K"])), int(_item(p["N"])), int(_item(p["L"])),
                             dtype=dtype)
    raise ValueError(f"unknown backend tag {backend!r}")


def _probes_from_stack(probe_h, K, L):
    phis = []
    for m in range(probe_h.shape[0]):
        row = probe_h.getrow(m).tocoo()
        k = row.col % K
        q = row.col // K
        phis.append(sp.csr_matrix((np.conj(row.data), (k, q)), shape=(K, L)))
    return phis
