# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Binary-factor weight formats for 1-2 bits per weight.

A DBF matrix is ``D_a S_a D_m S_b^T D_b`` with sign matrices ``S_a`` (N x R)
and ``S_b`` (M x R). An MDBF matrix replaces the diagonal scalings by rank-l
envelopes: ``(S_a * A Q^T)(S_b * B G^T)^T``. A DBF matrix is the MDBF matrix
with l = 1, A = a, Q = m, B = b and G = 1.

Factorizations start from a signed SVD split (MSVID) and are improved by
alternating closed-form least-squares updates of the real parameters with
single sign-flip sweeps.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import svd, lstsq, cholesky, LinAlgError

from ..log import InvalidInputError, NumericalError
from .. import log
from ..quant_format import snap_half, code_bytes

__all__ = [
    "BinfactFormat", "DbfMatrix", "MdbfMatrix", "dequantize_binfact", "binfact_bits",
    "rank_for_bpw", "msvid_init", "refine_alternating", "RefineResult", "binfact_objective",
    "storage_bytes_binfact", "to_mdbf", "serialize_binfact", "deserialize_binfact",
]


# Bits per real-valued parameter on disk
PARAM_BITS = 16

# Relative slack allowed over the bpw target
BPW_TOLERANCE = 0.02


class BinfactFormat:
    "Collection of binary-factor encodings."
    DBF = "dbf"
    MDBF = "mdbf"

    ALL = (DBF, MDBF)


def _signs(x):
    "Sign with sign(0) = +1."
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def _check_signs(S, name):
    S = np.asarray(S)
    if S.size and not np.all(np.abs(S) == 1):
        raise InvalidInputError('%s must only hold +1/-1 entries' % name)
    return S.astype(np.int8)


@dataclass
class DbfMatrix:
    S_a: np.ndarray
    S_b: np.ndarray
    a: np.ndarray
    m: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.S_a = _check_signs(self.S_a, 'S_a')
        self.S_b = _check_signs(self.S_b, 'S_b')
        self.a = np.asarray(self.a, dtype=np.float32).ravel()
        self.m = np.asarray(self.m, dtype=np.float32).ravel()
        self.b = np.asarray(self.b, dtype=np.float32).ravel()
        N, R = self.S_a.shape
        M = self.S_b.shape[0]
        if self.S_b.shape[1] != R or self.a.shape != (N,) or self.m.shape != (R,) or self.b.shape != (M,):
            raise InvalidInputError('inconsistent DBF factor shapes')

    format = BinfactFormat.DBF

    @property
    def shape(self):
        return (self.S_a.shape[0], self.S_b.shape[0])

    @property
    def rank(self):
        return self.S_a.shape[1]

    @property
    def envelope_rank(self):
        return 1

    def param_count(self):
        return self.a.size + self.m.size + self.b.size

    def params(self):
        return [self.a, self.m, self.b]

    def snapped(self):
        "Copy with real parameters on the half-precision grid."
        return DbfMatrix(self.S_a, self.S_b, snap_half(self.a), snap_half(self.m), snap_half(self.b))


@dataclass
class MdbfMatrix:
    S_a: np.ndarray
    S_b: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    B: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        self.S_a = _check_signs(self.S_a, 'S_a')
        self.S_b = _check_signs(self.S_b, 'S_b')
        self.A = np.asarray(self.A, dtype=np.float32)
        self.Q = np.asarray(self.Q, dtype=np.float32)
        self.B = np.asarray(self.B, dtype=np.float32)
        self.G = np.asarray(self.G, dtype=np.float32)
        N, R = self.S_a.shape
        M = self.S_b.shape[0]
        l = self.A.shape[1] if self.A.ndim == 2 else -1
        if (self.S_b.shape[1] != R or self.A.shape != (N, l) or self.Q.shape != (R, l) or
                self.B.shape != (M, l) or self.G.shape != (R, l) or l < 1):
            raise InvalidInputError('inconsistent MDBF factor shapes')

    format = BinfactFormat.MDBF

    @property
    def shape(self):
        return (self.S_a.shape[0], self.S_b.shape[0])

    @property
    def rank(self):
        return self.S_a.shape[1]

    @property
    def envelope_rank(self):
        return self.A.shape[1]

    def param_count(self):
        return self.A.size + self.Q.size + self.B.size + self.G.size

    def params(self):
        return [self.A, self.Q, self.B, self.G]

    def snapped(self):
        return MdbfMatrix(self.S_a, self.S_b, snap_half(self.A), snap_half(self.Q),
                          snap_half(self.B), snap_half(self.G))


def to_mdbf(F):
    """The MDBF form of a DBF matrix (envelope rank 1)."""
    if isinstance(F, MdbfMatrix):
        return F
    R = F.rank
    return MdbfMatrix(F.S_a, F.S_b, F.a[:, None], F.m[:, None], F.b[:, None],
                      np.ones((R, 1), dtype=np.float32))


def _sides(F, dtype=np.float64):
    """Left and right sign-modulated factors L (N x R), Rt (M x R) with W_hat = L Rt^T."""
    if isinstance(F, DbfMatrix):
        a, m, b = (np.asarray(p, dtype=dtype) for p in (F.a, F.m, F.b))
        return (a[:, None] * F.S_a) * m, F.S_b * b[:, None]
    A, Q, B, G = (np.asarray(p, dtype=dtype) for p in (F.A, F.Q, F.B, F.G))
    return F.S_a * (A @ Q.T), F.S_b * (B @ G.T)


def dequantize_binfact(F, dtype=np.float32):
    """Evaluate the factorization, in float32 unless asked otherwise."""
    L, Rt = _sides(F, dtype)
    return L @ Rt.T


def binfact_bits(N, M, R, fmt, envelope_rank=1):
    """Total bits of a factorization: sign bits plus 16-bit real parameters."""
    if fmt == BinfactFormat.DBF:
        params = N + R + M
    elif fmt == BinfactFormat.MDBF:
        params = envelope_rank * (N + M + 2 * R)
    else:
        raise InvalidInputError('unknown binary-factor format %r' % (fmt,))
    return (N + M) * R + PARAM_BITS * params


def storage_bytes_binfact(F):
    """Payload bytes: one packed sign plane per factor, then 16-bit parameters."""
    N, M = F.shape
    return code_bytes(N * F.rank, 1) + code_bytes(M * F.rank, 1) + 2 * F.param_count()


def rank_for_bpw(N, M, target_bpw, fmt=BinfactFormat.DBF, envelope_rank=1):
    """Largest sign rank whose bit cost stays within 2% of target_bpw."""
    if not 0 < target_bpw <= 2:
        raise InvalidInputError('binary-factor bpw must lie in (0, 2], got %r' % (target_bpw,))
    if N < 1 or M < 1:
        raise InvalidInputError('matrix dimensions must be positive')
    limit = (1 + BPW_TOLERANCE) * target_bpw * N * M
    if binfact_bits(N, M, 1, fmt, envelope_rank) > limit:
        raise InvalidInputError(
            '%.3g bpw is too small for a rank-1 %s factorization of a %dx%d matrix '
            '(needs %.3g bpw)' % (target_bpw, fmt, N, M,
                                  binfact_bits(N, M, 1, fmt, envelope_rank) / (N * M)))
    per_rank = binfact_bits(N, M, 2, fmt, envelope_rank) - binfact_bits(N, M, 1, fmt, envelope_rank)
    R = 1 + int((limit - binfact_bits(N, M, 1, fmt, envelope_rank)) // per_rank)
    # Guard against floor rounding at the boundary
    while binfact_bits(N, M, R + 1, fmt, envelope_rank) <= limit:
        R += 1
    while R > 1 and binfact_bits(N, M, R, fmt, envelope_rank) > limit:
        R -= 1
    return R


def _positive_envelope(X, l):
    """Rank-l factors P (n x l), Q (r x l) of a non-negative matrix, leading pair positive."""
    try:
        U, s, Vt = svd(X, full_matrices=False)
    except (LinAlgError, ValueError) as e:
        raise NumericalError('envelope SVD failed: %s' % e)
    l = min(l, len(s))
    root = np.sqrt(s[:l])
    P = U[:, :l] * root
    Q = Vt[:l].T * root
    for k in range(l):
        if P[:, k].sum() + Q[:, k].sum() < 0:
            P[:, k] *= -1
            Q[:, k] *= -1
    return P, Q


def msvid_init(W, R, envelope_rank=1, fmt=None):
    """Signed SVD initialization.

    The rank-R SVD of W is split evenly between both sides; signs come from
    the split factors and the magnitudes are compressed by a rank-l SVD.
    Returns a DbfMatrix when fmt is 'dbf' (or envelope_rank is 1 and no
    format is given), an MdbfMatrix otherwise.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or not np.any(W):
        raise InvalidInputError('binary-factor initialization needs a non-zero matrix')
    N, M = W.shape
    if R < 1:
        raise InvalidInputError('sign rank must be at least 1')
    if fmt is None:
        fmt = BinfactFormat.DBF if envelope_rank == 1 else BinfactFormat.MDBF
    try:
        U, s, Vt = svd(W, full_matrices=False)
    except (LinAlgError, ValueError) as e:
        raise NumericalError('SVD of the weight failed: %s' % e)
    # Pad when R exceeds min(N, M): extra ranks start with zero magnitude
    k = min(R, len(s))
    Lf = np.zeros((N, R))
    Rf = np.zeros((M, R))
    root = np.sqrt(s[:k])
    Lf[:, :k] = U[:, :k] * root
    Rf[:, :k] = Vt[:k].T * root
    S_a, S_b = _signs(Lf), _signs(Rf)
    l = 1 if fmt == BinfactFormat.DBF else envelope_rank
    A, Q = _positive_envelope(np.abs(Lf), l)
    B, G = _positive_envelope(np.abs(Rf), l)
    if fmt == BinfactFormat.DBF:
        return DbfMatrix(S_a, S_b, A[:, 0], Q[:, 0] * G[:, 0], B[:, 0])
    if A.shape[1] < envelope_rank:
        pad = envelope_rank - A.shape[1]
        A, Q, B, G = (np.pad(X, ((0, 0), (0, pad))) for X in (A, Q, B, G))
    return MdbfMatrix(S_a, S_b, A, Q, B, G)


class _Weighting(object):
    """Objective ||W - W_hat||^2, or tr(E^T H E) for an input Gram matrix H."""

    def __init__(self, W, H=None):
        self.W = np.asarray(W, dtype=np.float64)
        N = self.W.shape[0]
        if H is None:
            self.H = None
            self.Lt = None
        else:
            H = np.asarray(H, dtype=np.float64)
            if H.shape != (N, N):
                raise InvalidInputError('weighting Gram of shape %r for %d inputs' % (H.shape, N))
            ridge = 1e-10 * max(np.trace(H) / N, 1e-300)
            try:
                self.Lt = cholesky(H + ridge * np.eye(N), lower=False)
            except LinAlgError as e:
                raise NumericalError('weighting Gram is not positive definite: %s' % e)
            self.H = self.Lt.T @ self.Lt

    def weigh(self, E):
        return E if self.Lt is None else self.Lt @ E

    def value(self, W_hat):
        E = self.weigh(self.W - W_hat)
        return float(np.sum(E * E))

    def gram(self, E):
        "H E (or E when unweighted)."
        return E.copy() if self.H is None else self.H @ E

    def h_diag(self, i):
        return 1.0 if self.H is None else self.H[i, i]

    def h_col(self, i):
        return None if self.H is None else self.H[:, i]


def binfact_objective(F, W, H=None):
    return _Weighting(W, H).value(dequantize_binfact(F, np.float64))


def _solve_block(weighting, basis, offset):
    """Least-squares coefficients theta for W - offset ~ sum_p theta_p basis[p]."""
    P = basis.shape[0]
    design = np.stack([weighting.weigh(B).ravel() for B in basis], axis=1) if P else None
    target = weighting.weigh(weighting.W - offset).ravel()
    theta, _, _, _ = lstsq(design, target, lapack_driver='gelsd')
    return theta


class _Params(object):
    """Working float64 copy of a factorization in MDBF parameterization."""

    def __init__(self, F):
        self.dbf = isinstance(F, DbfMatrix)
        M = to_mdbf(F)
        self.S_a = M.S_a.astype(np.float64)
        self.S_b = M.S_b.astype(np.float64)
        self.A, self.Q, self.B, self.G = (p.astype(np.float64) for p in (M.A, M.Q, M.B, M.G))

    def sides(self):
        return self.S_a * (self.A @ self.Q.T), self.S_b * (self.B @ self.G.T)

    def value(self):
        L, Rt = self.sides()
        return L @ Rt.T

    def result(self):
        if self.dbf:
            return DbfMatrix(self.S_a, self.S_b, self.A[:, 0], self.Q[:, 0] * self.G[:, 0], self.B[:, 0])
        return MdbfMatrix(self.S_a, self.S_b, self.A, self.Q, self.B, self.G)

    def snapshot(self):
        return [x.copy() for x in (self.S_a, self.S_b, self.A, self.Q, self.B, self.G)]

    def restore(self, snap):
        self.S_a, self.S_b, self.A, self.Q, self.B, self.G = snap

    # Basis matrices of W_hat with respect to each real-valued block

    def basis_A(self):
        N, l = self.A.shape
        _, Rt = self.sides()
        c = np.einsum('ir,rk,mr->ikm', self.S_a, self.Q, Rt)
        basis = np.zeros((N, l, N, Rt.shape[0]))
        basis[np.arange(N), :, np.arange(N), :] = c
        return basis.reshape(N * l, N, Rt.shape[0])

    def basis_Q(self):
        _, Rt = self.sides()
        return np.einsum('nr,nk,mr->rknm', self.S_a, self.A, Rt).reshape(-1, self.A.shape[0], Rt.shape[0])

    def basis_B(self):
        M, l = self.B.shape
        L, _ = self.sides()
        d = np.einsum('nr,jr,rk->jkn', L, self.S_b, self.G)
        basis = np.zeros((M, l, L.shape[0], M))
        basis[np.arange(M), :, :, np.arange(M)] = d
        return basis.reshape(M * l, L.shape[0], M)

    def basis_G(self):
        L, _ = self.sides()
        return np.einsum('nr,mr,mk->rknm', L, self.S_b, self.B).reshape(-1, L.shape[0], self.B.shape[0])


@dataclass
class RefineResult:
    factors: object
    trace: list
    accepted_flips: int
    accepted_updates: int


def _ls_sweep(params, weighting, f):
    """One least-squares update per real-valued block, kept only when not worse."""
    accepted = 0
    if params.dbf:
        # G stays at ones so the DBF structure survives
        blocks = (('A', params.basis_A), ('Q', params.basis_Q), ('B', params.basis_B))
    else:
        blocks = (('A', params.basis_A), ('Q', params.basis_Q), ('B', params.basis_B),
                  ('G', params.basis_G))
    for name, make_basis in blocks:
        old = getattr(params, name)
        basis = make_basis()
        theta = _solve_block(weighting, basis, np.zeros_like(weighting.W))
        if not np.all(np.isfinite(theta)):
            continue
        setattr(params, name, theta.reshape(old.shape))
        f_new = weighting.value(params.value())
        if f_new <= f:
            f = f_new
            accepted += 1
        else:
            setattr(params, name, old)
    return f, accepted


def _flip_sweep(params, weighting, f):
    """Single sign flips, column-major over S_a then S_b, kept when strictly improving."""
    L, Rt = params.sides()
    W_hat = L @ Rt.T
    E = weighting.W - W_hat
    HE = weighting.gram(E)
    N, R = params.S_a.shape
    M = params.S_b.shape[0]
    flips = 0
    for r in range(R):
        v = Rt[:, r]
        vv = float(v @ v)
        for i in range(N):
            c = 2.0 * L[i, r]
            delta = 2.0 * c * float(HE[i] @ v) + c * c * weighting.h_diag(i) * vv
            if delta < -1e-12 * abs(f):
                params.S_a[i, r] *= -1
                L[i, r] *= -1
                E[i] += c * v
                col = weighting.h_col(i)
                if col is None:
                    HE[i] += c * v
                else:
                    HE += c * np.outer(col, v)
                f += delta
                flips += 1
    for r in range(R):
        u = L[:, r]
        Hu = weighting.gram(u)
        uHu = float(u @ Hu)
        for j in range(M):
            c = 2.0 * Rt[j, r]
            delta = 2.0 * c * float(u @ HE[:, j]) + c * c * uHu
            if delta < -1e-12 * abs(f):
                params.S_b[j, r] *= -1
                Rt[j, r] *= -1
                E[:, j] += c * u
                HE[:, j] += c * Hu
                f += delta
                flips += 1
    return flips


def refine_alternating(F, W, outer_iters=50, inner_iters=3, H=None):
    """Alternate least-squares updates of the real parameters with sign-flip sweeps.

    The objective ||W - W_hat||_F^2 (or its H-weighted form) never
    increases; `trace` holds it after the start and every outer iteration.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.shape != F.shape:
        raise InvalidInputError('factorization of shape %r for weight of shape %r' % (F.shape, W.shape))
    weighting = _Weighting(W, H)
    params = _Params(F)
    f = weighting.value(params.value())
    trace = [f]
    total_flips = 0
    total_updates = 0
    for it in range(outer_iters):
        f_start = f
        f, updates = _ls_sweep(params, weighting, f)
        total_updates += updates
        for _ in range(inner_iters):
            snap = params.snapshot()
            flips = _flip_sweep(params, weighting, f)
            if not flips:
                break
            f_new = weighting.value(params.value())
            if f_new > f:
                # Accumulated flip gains disagreed with the exact objective
                params.restore(snap)
                break
            f = f_new
            total_flips += flips
        trace.append(f)
        if f == 0 or f >= f_start:
            break
    log.debug('binfact refine: %d flips, %d updates, objective %g -> %g',
              total_flips, total_updates, trace[0], trace[-1])
    return RefineResult(params.result(), trace, total_flips, total_updates)


def _pack_signs(S):
    return np.packbits((np.asarray(S).ravel() > 0).astype(np.uint8), bitorder='little').tobytes()


def _unpack_signs(buf, shape):
    count = shape[0] * shape[1]
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count, bitorder='little')
    return (2 * bits.astype(np.int8) - 1).reshape(shape)


def serialize_binfact(F):
    """Payload bytes: packed S_a, packed S_b (bit 1 is +1), then float16 parameters."""
    parts = [_pack_signs(F.S_a), _pack_signs(F.S_b)]
    parts += [np.asarray(p, dtype=np.float32).ravel().astype('<f2').tobytes() for p in F.params()]
    return b''.join(parts)


def deserialize_binfact(buf, shape, fmt, rank, envelope_rank=1):
    N, M = shape
    if fmt not in BinfactFormat.ALL:
        raise InvalidInputError('unknown binary-factor format %r' % (fmt,))
    if fmt == BinfactFormat.DBF:
        param_shapes = [(N,), (rank,), (M,)]
    else:
        l = envelope_rank
        param_shapes = [(N, l), (rank, l), (M, l), (rank, l)]
    n_a = code_bytes(N * rank, 1)
    n_b = code_bytes(M * rank, 1)
    expected = n_a + n_b + 2 * sum(int(np.prod(s)) for s in param_shapes)
    if len(buf) != expected:
        raise InvalidInputError('binary-factor payload has %d bytes, expected %d' % (len(buf), expected))
    S_a = _unpack_signs(buf[:n_a], (N, rank))
    S_b = _unpack_signs(buf[n_a:n_a + n_b], (M, rank))
    offset = n_a + n_b
    params = []
    for s in param_shapes:
        n = int(np.prod(s))
        params.append(np.frombuffer(buf[offset:offset + 2 * n], dtype='<f2').astype(np.float32).reshape(s))
        offset += 2 * n
    if fmt == BinfactFormat.DBF:
        return DbfMatrix(S_a, S_b, *params)
    return MdbfMatrix(S_a, S_b, *params)
