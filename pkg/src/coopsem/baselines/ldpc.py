"""Rate-3/4 quasi-cyclic LDPC code (648-bit codewords, lifting size 27).

The exponent matrix follows the IEEE 802.11n layout: 6 block rows by 24 block
columns, the last 6 columns forming the dual-diagonal parity part. Encoding
solves the parity part over GF(2); decoding is log-domain sum-product belief
propagation vectorized over a batch of codewords.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp

LIFT = 27

# -1 marks an all-zero block; k >= 0 is the identity cyclically shifted by k.
BASE_MATRIX_R34 = np.array([
    [16, 17, 22, 24, 9, 3, 14, -1, 4, 2, 7, -1, 26, -1, 2, -1, 21, -1, 1, 0, -1, -1, -1, -1],
    [25, 12, 12, 3, 3, 26, 6, 21, -1, 15, 22, -1, 15, -1, 4, -1, -1, 16, -1, 0, 0, -1, -1, -1],
    [25, 18, 26, 16, 22, 23, 9, -1, 0, -1, 4, -1, 4, -1, 8, 23, 11, -1, -1, -1, 0, 0, -1, -1],
    [9, 7, 0, 1, 17, -1, -1, 7, 3, -1, 3, 23, -1, 16, -1, -1, 21, -1, 0, -1, -1, 0, 0, -1],
    [24, 5, 26, 7, 1, -1, -1, 15, 24, 15, -1, 8, -1, 13, -1, 13, -1, 11, -1, -1, -1, -1, 0, 0],
    [2, 2, 19, 14, 24, 1, 15, 19, -1, 21, -1, 2, -1, 24, -1, 3, -1, 2, 1, -1, -1, -1, -1, 0],
])

_LLR_CLIP = 50.0


def expand_base_matrix(base: np.ndarray, lift: int) -> np.ndarray:
    rows, cols = base.shape
    H = np.zeros((rows * lift, cols * lift), dtype=np.uint8)
    eye = np.arange(lift)
    for i in range(rows):
        for j in range(cols):
            shift = base[i, j]
            if shift < 0:
                continue
            H[i * lift + eye, j * lift + (eye + shift) % lift] = 1
    return H


def gf2_inverse(A: np.ndarray) -> np.ndarray:
    """Inverse of a square binary matrix over GF(2) by Gauss-Jordan elimination."""
    n = A.shape[0]
    aug = np.concatenate([A.astype(np.uint8) % 2, np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        pivots = np.nonzero(aug[col:, col])[0]
        if pivots.size == 0:
            raise np.linalg.LinAlgError("matrix is singular over GF(2)")
        p = col + pivots[0]
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        rows = np.nonzero(aug[:, col])[0]
        rows = rows[rows != col]
        aug[rows] ^= aug[col]
    return aug[:, n:]


class QCLDPCCode:
    """Systematic encoder and sum-product decoder for one QC-LDPC code.

    Codewords are laid out ``[info bits | parity bits]``.
    """

    def __init__(self, base: np.ndarray = BASE_MATRIX_R34, lift: int = LIFT, max_iter: int = 50):
        self.H = expand_base_matrix(base, lift)
        self.m, self.n = self.H.shape
        self.k = self.n - self.m
        self.max_iter = max_iter
        chk, var = np.nonzero(self.H)
        self._edge_chk = chk
        self._edge_var = var
        n_edges = chk.size
        ones = np.ones(n_edges)
        # edge -> variable / check incidence, used for per-node sums
        self._to_var = sp.csr_matrix((ones, (np.arange(n_edges), var)), shape=(n_edges, self.n))
        self._to_chk = sp.csr_matrix((ones, (np.arange(n_edges), chk)), shape=(n_edges, self.m))
        self._H_sparse = sp.csr_matrix(self.H.astype(np.int32))

    @property
    def rate(self) -> float:
        return self.k / self.n

    @cached_property
    def _parity_generator(self) -> np.ndarray:
        Hs, Hp = self.H[:, :self.k], self.H[:, self.k:]
        Hp_inv = gf2_inverse(Hp)
        return (Hp_inv.astype(np.int32) @ Hs.astype(np.int32)) % 2

    def encode(self, info: np.ndarray) -> np.ndarray:
        """Encode info bits of shape (..., k) into codewords of shape (..., n)."""
        info = np.asarray(info, dtype=np.uint8)
        if info.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} info bits, got {info.shape[-1]}")
        parity = (info.astype(np.int32) @ self._parity_generator.T) % 2
        return np.concatenate([info, parity.astype(np.uint8)], axis=-1)

    def syndrome_ok(self, bits: np.ndarray) -> np.ndarray:
        bits = np.atleast_2d(bits).astype(np.int32)
        syn = self._H_sparse @ bits.T
        return ~np.any(syn % 2, axis=0)

    def decode(self, llr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sum-product decoding.

        ``llr`` has shape (batch, n) with the convention LLR = log P(0)/P(1).
        Returns hard-decided codewords (batch, n) and a per-codeword flag that
        is True when all parity checks are satisfied.
        """
        llr = np.clip(np.atleast_2d(np.asarray(llr, dtype=np.float64)), -_LLR_CLIP, _LLR_CLIP)
        batch = llr.shape[0]
        r = np.zeros((batch, self._edge_var.size))
        hard = (llr < 0).astype(np.uint8)
        ok = self.syndrome_ok(hard)
        for _ in range(self.max_iter):
            if ok.all():
                break
            total = llr + (self._to_var.T @ r.T).T
            q = total[:, self._edge_var] - r
            t = np.tanh(np.clip(q, -_LLR_CLIP, _LLR_CLIP) / 2.0)
            mag = np.maximum(np.abs(t), 1e-300)
            log_mag = np.log(mag)
            neg = (t < 0).astype(np.float64)
            chk_log = (self._to_chk.T @ log_mag.T).T
            chk_neg = (self._to_chk.T @ neg.T).T
            excl_log = chk_log[:, self._edge_chk] - log_mag
            excl_neg = chk_neg[:, self._edge_chk] - neg
            sign = 1.0 - 2.0 * (np.rint(excl_neg) % 2)
            prod = np.clip(sign * np.exp(excl_log), -1 + 1e-15, 1 - 1e-15)
            r_new = 2.0 * np.arctanh(prod)
            # converged codewords keep their messages
            r = np.where(ok[:, None], r, r_new)
            total = llr + (self._to_var.T @ r.T).T
            hard = (total < 0).astype(np.uint8)
            ok = self.syndrome_ok(hard)
        return hard, ok
