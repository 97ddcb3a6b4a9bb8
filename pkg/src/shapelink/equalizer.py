"""Reduced-state (M-BCJR) equalizer for shaped or uniform PAM over a long ISI channel.

Trellis states are explicit symbol histories (the last ``L-1`` symbols), so
the equalizer never enumerates the ``Q^(L-1)`` states.  Each forward step
extends the retained survivors along their branches, merges extensions that
end in the same history by log-sum-exp and keeps the ``M`` best.  In shaped
mode the branches of a survivor and their labels are recomputed online from
its history with the same mapping table the transmitter uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .precoder import Constellation, label_codes, mapping_table
from .signal_model import ChannelModel, NoiseSpec
from .turbo_codec import LLR_CLAMP, TurboConfig, build_code


class EqualizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class EqualizerConfig:
    M: int = 16
    max_iterations: int = 12
    mode: str = "shaped"
    early_stop: bool = True
    llr_clip: float = LLR_CLAMP

    def __post_init__(self):
        if self.M < 1 or self.max_iterations < 1:
            raise ValueError("M and max_iterations must be at least 1")
        if not self.llr_clip > 0:
            raise ValueError("llr_clip must be positive")
        if self.mode not in ("shaped", "uniform"):
            raise ValueError("mode must be 'shaped' or 'uniform'")


@dataclass
class ForwardResult:
    """Survivors and retained branches of the forward recursion.

    ``hist[n, i]`` is the history (point indices, newest first; ``Q`` marks the
    zero prehistory) of survivor ``i`` before sample ``n``.  Branch ``b`` of
    step ``n`` goes from survivor ``parent[n, b]`` to ``child[n, b]`` of step
    ``n + 1`` by transmitting ``point[n, b]`` under forbidden mask ``mask[n, b]``.
    """

    hist: np.ndarray
    n_surv: np.ndarray
    alpha: np.ndarray
    parent: np.ndarray
    child: np.ndarray
    point: np.ndarray
    mask: np.ndarray
    log_gamma: np.ndarray
    n_branch: np.ndarray
    log_norm: np.ndarray
    constellation: Constellation

    @property
    def steps(self) -> int:
        return self.n_branch.size

    @property
    def log_likelihood(self) -> float:
        """Log of the total (unnormalised) weight of the retained paths."""
        final = self.alpha[-1, : self.n_surv[-1]]
        return float(self.log_norm.sum() + np.logaddexp.reduce(final))


@dataclass
class ZetaTable:
    """Normalized log branch posteriors ``log Pr(s_{n-1}=i, s_n=j | y)`` per step."""

    forward: ForwardResult
    beta: np.ndarray
    log_zeta: np.ndarray


def label_log_priors(llr, c: Constellation) -> np.ndarray:
    """``lp[n, label]``: log a-priori probability of each label from bit LLRs."""
    llr = np.asarray(llr, dtype=float).reshape(-1, c.m)
    log_p0 = -np.logaddexp(0.0, -llr)
    log_p1 = -np.logaddexp(0.0, llr)
    shifts = np.arange(c.m - 1, -1, -1)
    bits = (np.arange(c.Q)[:, None] >> shifts) & 1
    return log_p1 @ bits.T + log_p0 @ (1 - bits).T


@numba.njit(cache=True, inline="always")
def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@numba.njit(cache=True, inline="always")
def _state_tail(hist_row, taps, pts_ext):
    t = 0.0
    for k in range(1, taps.size):
        t += taps[k] * pts_ext[hist_row[k - 1]]
    return t


@numba.njit(cache=True, inline="always")
def _state_mask(t, taps, pts_ext, gamma):
    mk = 0
    for q in range(pts_ext.size - 1):
        v = taps[0] * pts_ext[q] + t
        mk = (mk << 1) | (1 if v * v <= gamma else 0)
    return mk


@numba.njit(cache=True, inline="always")
def _fallback_index(t, taps, pts_ext):
    best = 0
    bestv = np.inf
    for q in range(pts_ext.size - 1):
        v = abs(taps[0] * pts_ext[q] + t)
        if v < bestv:
            bestv = v
            best = q
    return best


@numba.njit(cache=True, inline="always")
def _branch_log_priors(mk, rows, lp_row, out):
    # log-sum of the label priors mapped to each point by mapping-table row mk
    for q in range(out.size):
        out[q] = -np.inf
    for lab in range(out.size):
        q = rows[mk, lab]
        out[q] = _lse(out[q], lp_row[lab])


@numba.njit(cache=True)
def _forward_kernel(y, taps, pts_ext, inv_noise, gamma, shaped, rows, lp_label, M):
    N = y.size
    L = taps.size
    Q = pts_ext.size - 1
    H = max(L - 1, 1)
    full = (1 << Q) - 1
    C = M * Q
    hist = np.full((N + 1, M, H), Q, dtype=np.int16)
    n_surv = np.zeros(N + 1, dtype=np.int64)
    alpha = np.full((N + 1, M), -np.inf)
    parent = np.zeros((N, C), dtype=np.int32)
    child = np.zeros((N, C), dtype=np.int32)
    point = np.zeros((N, C), dtype=np.int32)
    maskv = np.zeros((N, C), dtype=np.int32)
    lgam = np.zeros((N, C))
    n_br = np.zeros(N, dtype=np.int64)
    lognorm = np.zeros(N + 1)
    n_surv[0] = 1
    alpha[0, 0] = 0.0

    tail = np.empty(M)
    smask = np.empty(M, dtype=np.int64)
    hsh = np.empty(M, dtype=np.uint64)
    group = np.empty(M, dtype=np.int64)
    lpp = np.full((1 << Q, Q), -np.inf)
    stamp = np.full(1 << Q, -1, dtype=np.int64)
    slot_of_key = np.full(C, -1, dtype=np.int64)
    c_parent = np.empty(C, dtype=np.int64)
    c_point = np.empty(C, dtype=np.int64)
    c_mask = np.empty(C, dtype=np.int64)
    c_gam = np.empty(C)
    c_slot = np.empty(C, dtype=np.int64)
    s_metric = np.empty(C)
    s_rep = np.empty(C, dtype=np.int64)
    s_point = np.empty(C, dtype=np.int64)
    s_key = np.empty(C, dtype=np.int64)
    rank = np.empty(C, dtype=np.int64)
    prefix = L - 2

    for n in range(N):
        S = n_surv[n]
        for i in range(S):
            t = _state_tail(hist[n, i], taps, pts_ext)
            tail[i] = t
            if shaped:
                smask[i] = _state_mask(t, taps, pts_ext, gamma)
            else:
                smask[i] = full
            h = np.uint64(1469598103934665603)
            for k in range(prefix):
                h = (h ^ np.uint64(hist[n, i, k] + 1)) * np.uint64(1099511628211)
            hsh[i] = h
            group[i] = i
            for j in range(i):
                if group[j] == j and hsh[j] == h:
                    same = True
                    for k in range(prefix):
                        if hist[n, i, k] != hist[n, j, k]:
                            same = False
                            break
                    if same:
                        group[i] = j
                        break

        nc = 0
        ns = 0
        for i in range(S):
            mk = smask[i]
            base = alpha[n, i]
            if mk == 0:
                first = _fallback_index(tail[i], taps, pts_ext)
                last = first + 1
            else:
                if stamp[mk] != n:
                    stamp[mk] = n
                    _branch_log_priors(mk, rows, lp_label[n], lpp[mk])
                first = 0
                last = Q
            for q in range(first, last):
                if mk == 0:
                    lp = 0.0
                else:
                    lp = lpp[mk, q]
                    if lp == -np.inf:
                        continue
                d = y[n] - (taps[0] * pts_ext[q] + tail[i])
                g = -d * d * inv_noise + lp
                key = group[i] * Q + q if L > 1 else 0
                sl = slot_of_key[key]
                if sl < 0:
                    sl = ns
                    slot_of_key[key] = sl
                    s_metric[sl] = -np.inf
                    s_rep[sl] = i
                    s_point[sl] = q
                    s_key[sl] = key
                    ns += 1
                s_metric[sl] = _lse(s_metric[sl], base + g)
                c_parent[nc] = i
                c_point[nc] = q
                c_mask[nc] = mk
                c_gam[nc] = g
                c_slot[nc] = sl
                nc += 1
        for sl in range(ns):
            slot_of_key[s_key[sl]] = -1

        if ns <= M:
            for sl in range(ns):
                rank[sl] = sl
            kept = ns
        else:
            order = np.argsort(-s_metric[:ns], kind="mergesort")
            for sl in range(ns):
                rank[sl] = -1
            for r in range(M):
                rank[order[r]] = r
            kept = M
        mx = -np.inf
        for sl in range(ns):
            if rank[sl] >= 0 and s_metric[sl] > mx:
                mx = s_metric[sl]
        if mx == -np.inf:
            return hist, n_surv, alpha, parent, child, point, maskv, lgam, n_br, lognorm, n
        n_surv[n + 1] = kept
        lognorm[n + 1] = mx
        for sl in range(ns):
            r = rank[sl]
            if r < 0:
                continue
            alpha[n + 1, r] = s_metric[sl] - mx
            if L > 1:
                hist[n + 1, r, 0] = s_point[sl]
                for k in range(1, L - 1):
                    hist[n + 1, r, k] = hist[n, s_rep[sl], k - 1]
        b = 0
        for ci in range(nc):
            r = rank[c_slot[ci]]
            if r < 0:
                continue
            parent[n, b] = c_parent[ci]
            child[n, b] = r
            point[n, b] = c_point[ci]
            maskv[n, b] = c_mask[ci]
            lgam[n, b] = c_gam[ci]
            b += 1
        n_br[n] = b
    return hist, n_surv, alpha, parent, child, point, maskv, lgam, n_br, lognorm, -1


@numba.njit(cache=True)
def _backward_kernel(n_surv, alpha, parent, child, lgam, n_br):
    N = n_br.size
    M = alpha.shape[1]
    beta = np.full((N + 1, M), -np.inf)
    lz = np.full(parent.shape, -np.inf)
    for i in range(n_surv[N]):
        beta[N, i] = 0.0
    for n in range(N - 1, -1, -1):
        for b in range(n_br[n]):
            i = parent[n, b]
            beta[n, i] = _lse(beta[n, i], lgam[n, b] + beta[n + 1, child[n, b]])
        mx = -np.inf
        for i in range(n_surv[n]):
            if beta[n, i] > mx:
                mx = beta[n, i]
        for i in range(n_surv[n]):
            beta[n, i] -= mx
        tot = -np.inf
        for b in range(n_br[n]):
            v = alpha[n, parent[n, b]] + lgam[n, b] + beta[n + 1, child[n, b]]
            lz[n, b] = v
            tot = _lse(tot, v)
        for b in range(n_br[n]):
            lz[n, b] -= tot
    return beta, lz


@numba.njit(cache=True)
def _llr_kernel(lz, point, maskv, n_br, codes, la, clip):
    N = n_br.size
    m = codes.shape[2]
    out = np.empty(N * m)
    for n in range(N):
        for l in range(m):
            a = la[n * m + l]
            lp0 = -math.log1p(math.exp(-a)) if a > -30.0 else a - math.log1p(math.exp(a))
            lp1 = -math.log1p(math.exp(a)) if a < 30.0 else -a - math.log1p(math.exp(-a))
            num = -np.inf
            den = -np.inf
            for b in range(n_br[n]):
                cd = codes[maskv[n, b], point[n, b], l]
                z = lz[n, b]
                if cd == 0:
                    num = _lse(num, z)
                elif cd == 1:
                    den = _lse(den, z)
                else:
                    num = _lse(num, z + lp0)
                    den = _lse(den, z + lp1)
            if num == -np.inf and den == -np.inf:
                v = 0.0
            else:
                v = num - den - a
            if v > clip:
                v = clip
            elif v < -clip:
                v = -clip
            out[n * m + l] = v
    return out


def forward_pass(y, ch: ChannelModel, noise: NoiseSpec, c: Constellation, gamma: float,
                 apriori=None, cfg: EqualizerConfig = EqualizerConfig()) -> ForwardResult:
    """Forward M-BCJR recursion over the noisy frame ``y``.

    ``apriori`` holds bit LLRs (``len(y) * m`` values, symbol-major); ``None``
    means uniform bits.
    """
    if noise.total <= 0:
        raise ValueError("noise must be calibrated (N0 + NA > 0)")
    y = np.asarray(y, dtype=float)
    if apriori is None:
        apriori = np.zeros(y.size * c.m)
    apriori = np.clip(np.asarray(apriori, dtype=float), -LLR_CLAMP, LLR_CLAMP)
    if apriori.size != y.size * c.m:
        raise ValueError("apriori must hold m LLRs per received sample")
    pts_ext = np.append(c.points, 0.0)
    out = _forward_kernel(
        y, np.ascontiguousarray(ch.taps), pts_ext, 1.0 / noise.total, float(gamma),
        cfg.mode == "shaped", mapping_table(c), label_log_priors(apriori, c), cfg.M,
    )
    *arrays, failed = out
    if failed >= 0:
        raise EqualizerError(f"all branch metrics vanished at sample {failed}")
    return ForwardResult(*arrays, constellation=c)


def state_branches(history, ch: ChannelModel, c: Constellation, gamma: float, label_priors=None):
    """Branches the receiver recomputes for one trellis state.

    ``history`` holds point indices of the last ``L-1`` symbols, most recent
    first; index ``Q`` stands for the zero prehistory.  Returns
    ``(mask, [(point, log_prior), ...])`` with the same arithmetic as the
    forward recursion; mask 0 is the single fallback branch.
    """
    taps = np.ascontiguousarray(ch.taps)
    pts_ext = np.append(c.points, 0.0)
    hist = np.asarray(history, dtype=np.int16)
    if hist.size != max(taps.size - 1, 1):
        raise ValueError("history must hold L-1 symbols")
    lp = np.full(c.Q, -math.log(c.Q)) if label_priors is None else np.asarray(label_priors, dtype=float)
    t = _state_tail(hist, taps, pts_ext)
    mk = _state_mask(t, taps, pts_ext, float(gamma))
    if mk == 0:
        return 0, [(int(_fallback_index(t, taps, pts_ext)), 0.0)]
    out = np.empty(c.Q)
    _branch_log_priors(mk, mapping_table(c), lp, out)
    return mk, [(q, float(v)) for q, v in enumerate(out) if v > -np.inf]


def backward_pass_and_zeta(fwd: ForwardResult) -> ZetaTable:
    beta, lz = _backward_kernel(fwd.n_surv, fwd.alpha, fwd.parent, fwd.child, fwd.log_gamma, fwd.n_branch)
    return ZetaTable(fwd, beta, lz)


def compute_bit_llrs(zeta: ZetaTable, extrinsic_in=None, clip: float = LLR_CLAMP) -> np.ndarray:
    """Extrinsic bit LLRs from branch posteriors; erased label bits use the a-priori split."""
    fwd = zeta.forward
    c = fwd.constellation
    if extrinsic_in is None:
        extrinsic_in = np.zeros(fwd.steps * c.m)
    la = np.clip(np.asarray(extrinsic_in, dtype=float), -LLR_CLAMP, LLR_CLAMP)
    return _llr_kernel(zeta.log_zeta, fwd.point, fwd.mask, fwd.n_branch, label_codes(c), la, float(clip))


def equalize(y, ch, noise, c, gamma, apriori=None, cfg: EqualizerConfig = EqualizerConfig()) -> np.ndarray:
    """One M-BCJR pass: a-priori bit LLRs in, extrinsic bit LLRs out."""
    fwd = forward_pass(y, ch, noise, c, gamma, apriori, cfg)
    return compute_bit_llrs(backward_pass_and_zeta(fwd), apriori, cfg.llr_clip)


@dataclass
class ReceiveResult:
    bits: np.ndarray
    decisions: list[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.decisions)


def iterative_receive(y, ch: ChannelModel, noise: NoiseSpec, c: Constellation, gamma: float,
                      turbo: TurboConfig, cfg: EqualizerConfig = EqualizerConfig(),
                      on_iteration: Callable[[int, np.ndarray], None] | None = None) -> ReceiveResult:
    """Turbo equalization: alternate M-BCJR and turbo decoding, exchanging extrinsic LLRs.

    Stops after ``cfg.max_iterations`` or, with ``early_stop``, once two
    consecutive decoder decisions agree.
    """
    code = build_code(turbo)
    if code.n_coded != len(y) * c.m:
        raise ValueError(f"frame of {len(y)} symbols does not carry {code.n_coded} coded bits")
    ext = np.zeros(code.n_coded)
    result = ReceiveResult(bits=np.zeros(turbo.block_length, dtype=np.uint8))
    prev = None
    for it in range(cfg.max_iterations):
        llr = equalize(y, ch, noise, c, gamma, ext, cfg)
        ext, _, hard = code.decode(llr)
        result.decisions.append(hard)
        result.bits = hard
        if on_iteration is not None:
            on_iteration(it, hard)
        if cfg.early_stop and prev is not None and np.array_equal(prev, hard):
            break
        prev = hard
    return result
