"""Parallel concatenated (turbo) code built from two 37/23 recursive systematic encoders.

Coded frame layout before the channel interleaver::

    [ systematic (K) | tail systematic (4) | tail parity (4) | kept parity ]

Each parity stream is punctured by an evenly spaced (Bresenham) mask that
keeps half of the parity budget (the second mask runs backwards so the two
streams are staggered); kept bits are multiplexed as ``p1_0, p2_0, p1_1, ...``.  Only the first encoder is terminated.  LLRs are positive when bit 0 is
more likely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numba
import numpy as np

LLR_CLAMP = 30.0


@dataclass(frozen=True)
class RscSpec:
    memory: int = 4
    feedforward: int = 0o37
    feedback: int = 0o23

    def __post_init__(self):
        for g in (self.feedforward, self.feedback):
            if g >> (self.memory + 1):
                raise ValueError("generator degree exceeds the encoder memory")
        if not (self.feedback >> self.memory) & 1:
            raise ValueError("feedback polynomial must be monic")

    def taps(self, poly: int) -> np.ndarray:
        """Coefficients of D^0..D^memory (the octal MSB is D^0)."""
        return np.array([(poly >> (self.memory - i)) & 1 for i in range(self.memory + 1)], dtype=np.int64)

    @cached_property
    def trellis(self) -> tuple[np.ndarray, np.ndarray]:
        """``next_state[s, u]`` and ``parity[s, u]``; bit ``i`` of ``s`` holds ``a_{k-1-i}``."""
        nstates = 1 << self.memory
        fb = self.taps(self.feedback)
        ff = self.taps(self.feedforward)
        nxt = np.empty((nstates, 2), dtype=np.int64)
        par = np.empty((nstates, 2), dtype=np.int64)
        for s in range(nstates):
            reg = [(s >> i) & 1 for i in range(self.memory)]
            for u in (0, 1):
                a = u
                for i in range(1, self.memory + 1):
                    a ^= fb[i] & reg[i - 1]
                p = ff[0] & a
                for i in range(1, self.memory + 1):
                    p ^= ff[i] & reg[i - 1]
                new = [a] + reg[:-1]
                nxt[s, u] = sum(b << i for i, b in enumerate(new))
                par[s, u] = p
        return nxt, par

    @cached_property
    def termination_input(self) -> np.ndarray:
        """Input bit that drives the register towards zero from each state."""
        fb = self.taps(self.feedback)
        out = np.empty(1 << self.memory, dtype=np.int64)
        for s in range(1 << self.memory):
            out[s] = 0
            for i in range(1, self.memory + 1):
                out[s] ^= fb[i] & ((s >> (i - 1)) & 1)
        return out


RSC_37_23 = RscSpec()


def rsc_encode(bits, spec: RscSpec = RSC_37_23, terminate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Encode from the zero state; returns ``(systematic, parity)``.

    With ``terminate`` the ``memory`` tail inputs that return the register to
    zero are appended to both outputs.
    """
    nxt, par = spec.trellis
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    s = 0
    sys_out = list(bits)
    parity = []
    for u in bits:
        parity.append(par[s, u])
        s = nxt[s, u]
    if terminate:
        for _ in range(spec.memory):
            u = spec.termination_input[s]
            sys_out.append(u)
            parity.append(par[s, u])
            s = nxt[s, u]
        assert s == 0
    return np.array(sys_out, dtype=np.uint8), np.array(parity, dtype=np.uint8)


@dataclass(frozen=True)
class TurboConfig:
    rate: float = 0.6
    block_length: int = 4096
    interleaver_seed: int = 2024
    iterations: int = 2
    bits_per_symbol: int = 1
    channel_interleave: bool = True

    def __post_init__(self):
        if not 1 / 3 < self.rate < 1:
            raise ValueError("rate must lie strictly between 1/3 and 1")
        if self.block_length < 1 or self.iterations < 1 or self.bits_per_symbol < 1:
            raise ValueError("block_length, iterations and bits_per_symbol must be positive")


def bresenham_mask(n: int, keep: int) -> np.ndarray:
    """Evenly spaced selection of ``keep`` out of ``n`` positions."""
    k = np.arange(n + 1, dtype=np.int64)
    edges = (k * keep) // n
    return np.diff(edges).astype(bool)


class TurboCode:
    """Derived structure of a :class:`TurboConfig` (interleavers, puncturing, sizes)."""

    def __init__(self, cfg: TurboConfig, spec: RscSpec = RSC_37_23):
        self.cfg = cfg
        self.spec = spec
        K = cfg.block_length
        mem = spec.memory
        rng = np.random.default_rng(cfg.interleaver_seed)
        self.interleaver = rng.permutation(K)
        self.deinterleaver = np.argsort(self.interleaver)
        m = cfg.bits_per_symbol
        self.n_coded = m * math.ceil(K / (cfg.rate * m) - 1e-9)
        self.n_fixed = K + 2 * mem
        keep = self.n_coded - self.n_fixed
        if not 0 <= keep <= 2 * K:
            raise ValueError(f"rate {cfg.rate} is unreachable for block length {K}")
        self.keep1 = np.flatnonzero(bresenham_mask(K, keep - keep // 2))
        self.keep2 = np.flatnonzero(bresenham_mask(K, keep // 2)[::-1])
        if cfg.channel_interleave:
            self.channel_perm = np.random.default_rng([cfg.interleaver_seed, 1]).permutation(self.n_coded)
        else:
            self.channel_perm = np.arange(self.n_coded)
        self.channel_inv = np.argsort(self.channel_perm)
        # slices of the natural-order frame
        self.sl_sys = slice(0, K)
        self.sl_tail_sys = slice(K, K + mem)
        self.sl_tail_par = slice(K + mem, K + 2 * mem)
        self.sl_par = slice(K + 2 * mem, self.n_coded)

    @property
    def realized_rate(self) -> float:
        return self.cfg.block_length / self.n_coded

    def parity_positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Natural-order frame positions of kept parity-1 and parity-2 bits."""
        K = self.cfg.block_length
        merged = np.zeros(2 * K, dtype=np.int64)
        merged[2 * self.keep1] = 1
        merged[2 * self.keep2 + 1] = 2
        kept = merged[merged > 0]
        base = self.sl_par.start
        pos1 = base + np.flatnonzero(kept == 1)
        pos2 = base + np.flatnonzero(kept == 2)
        return pos1, pos2

    def encode(self, info) -> np.ndarray:
        info = np.asarray(info, dtype=np.uint8).reshape(-1)
        K = self.cfg.block_length
        if info.size != K:
            raise ValueError(f"expected {K} info bits, got {info.size}")
        sys1, par1 = rsc_encode(info, self.spec, terminate=True)
        _, par2 = rsc_encode(info[self.interleaver], self.spec)
        frame = np.empty(self.n_coded, dtype=np.uint8)
        frame[self.sl_sys] = info
        frame[self.sl_tail_sys] = sys1[K:]
        frame[self.sl_tail_par] = par1[K:]
        pos1, pos2 = self.parity_positions()
        frame[pos1] = par1[:K][self.keep1]
        frame[pos2] = par2[self.keep2]
        return frame[self.channel_perm]

    def decode(self, llr, iterations: int | None = None):
        """Iterative log-MAP decoding of channel LLRs in transmission order.

        Returns ``(extrinsic, info_llrs, hard_bits)``; the extrinsic LLRs cover
        every coded position in transmission order.
        """
        llr = np.clip(np.asarray(llr, dtype=float).reshape(-1), -LLR_CLAMP, LLR_CLAMP)
        if llr.size != self.n_coded:
            raise ValueError(f"expected {self.n_coded} LLRs, got {llr.size}")
        iterations = self.cfg.iterations if iterations is None else iterations
        K = self.cfg.block_length
        mem = self.spec.memory
        nat = llr[self.channel_inv]
        pos1, pos2 = self.parity_positions()

        lsys1 = np.concatenate([nat[self.sl_sys], nat[self.sl_tail_sys]])
        lpar1 = np.zeros(K + mem)
        lpar1[self.keep1] = nat[pos1]
        lpar1[K:] = nat[self.sl_tail_par]
        lsys2 = nat[self.sl_sys][self.interleaver]
        lpar2 = np.zeros(K)
        lpar2[self.keep2] = nat[pos2]

        nxt, par = self.spec.trellis
        le2 = np.zeros(K)
        la1 = np.zeros(K + mem)
        for _ in range(iterations):
            la1[:K] = le2[self.deinterleaver]
            app_u1, app_p1 = log_map(lsys1, lpar1, la1, nxt, par, True)
            le1 = np.clip(app_u1[:K] - lsys1[:K] - la1[:K], -LLR_CLAMP, LLR_CLAMP)
            la2 = le1[self.interleaver]
            app_u2, app_p2 = log_map(lsys2, lpar2, la2, nxt, par, False)
            le2 = np.clip(app_u2 - lsys2 - la2, -LLR_CLAMP, LLR_CLAMP)

        le2_nat = le2[self.deinterleaver]
        info_llr = np.clip(nat[self.sl_sys] + le1 + le2_nat, -LLR_CLAMP, LLR_CLAMP)

        ext = np.empty(self.n_coded)
        ext[self.sl_sys] = le1 + le2_nat
        ext[self.sl_tail_sys] = app_u1[K:] - lsys1[K:]
        ext[self.sl_tail_par] = app_p1[K:] - lpar1[K:]
        ext[pos1] = (app_p1 - lpar1)[self.keep1]
        ext[pos2] = (app_p2 - lpar2)[self.keep2]
        ext = np.clip(ext, -LLR_CLAMP, LLR_CLAMP)
        hard = (info_llr < 0).astype(np.uint8)
        return ext[self.channel_perm], info_llr, hard


@lru_cache(maxsize=32)
def build_code(cfg: TurboConfig) -> TurboCode:
    return TurboCode(cfg)


def turbo_encode(info, cfg: TurboConfig) -> np.ndarray:
    return build_code(cfg).encode(info)


def turbo_decode(apriori, cfg: TurboConfig, iterations: int | None = None):
    """See :meth:`TurboCode.decode`."""
    return build_code(cfg).decode(apriori, iterations)


@numba.njit(cache=True, inline="always")
def max_star(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@numba.njit(cache=True)
def log_map(lsys, lpar, la, next_state, parity, terminated):
    """BCJR in the log domain with exact max-star for one RSC component.

    Returns a-posteriori LLRs of the input bits and of the parity bits.
    """
    n = lsys.size
    S = next_state.shape[0]
    ninf = -np.inf
    alpha = np.full((n + 1, S), ninf)
    beta = np.full((n + 1, S), ninf)
    alpha[0, 0] = 0.0
    gam = np.empty((n, S, 2))
    for k in range(n):
        for s in range(S):
            for u in range(2):
                su = 1.0 - 2.0 * u
                sp = 1.0 - 2.0 * parity[s, u]
                gam[k, s, u] = 0.5 * su * (lsys[k] + la[k]) + 0.5 * sp * lpar[k]
    for k in range(n):
        for s in range(S):
            a = alpha[k, s]
            if a == ninf:
                continue
            for u in range(2):
                t = next_state[s, u]
                alpha[k + 1, t] = max_star(alpha[k + 1, t], a + gam[k, s, u])
        m = ninf
        for s in range(S):
            if alpha[k + 1, s] > m:
                m = alpha[k + 1, s]
        for s in range(S):
            alpha[k + 1, s] -= m
    if terminated:
        beta[n, 0] = 0.0
    else:
        for s in range(S):
            beta[n, s] = 0.0
    for k in range(n - 1, -1, -1):
        for s in range(S):
            acc = ninf
            for u in range(2):
                t = next_state[s, u]
                acc = max_star(acc, gam[k, s, u] + beta[k + 1, t])
            beta[k, s] = acc
        m = ninf
        for s in range(S):
            if beta[k, s] > m:
                m = beta[k, s]
        for s in range(S):
            beta[k, s] -= m
    app_u = np.empty(n)
    app_p = np.empty(n)
    for k in range(n):
        u0 = ninf
        u1 = ninf
        p0 = ninf
        p1 = ninf
        for s in range(S):
            a = alpha[k, s]
            if a == ninf:
                continue
            for u in range(2):
                v = a + gam[k, s, u] + beta[k + 1, next_state[s, u]]
                if u == 0:
                    u0 = max_star(u0, v)
                else:
                    u1 = max_star(u1, v)
                if parity[s, u] == 0:
                    p0 = max_star(p0, v)
                else:
                    p1 = max_star(p1, v)
        app_u[k] = _llr(u0, u1)
        app_p[k] = _llr(p0, p1)
    return app_u, app_p


@numba.njit(cache=True, inline="always")
def _llr(num, den):
    if num == -np.inf and den == -np.inf:
        return 0.0
    return num - den
