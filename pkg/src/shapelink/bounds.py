"""Rate bounds for a Gaussian input under transmit and receive power constraints.

The channel is diagonalised by an ``N``-point DFT.  With energy spectral
components ``q_i`` the achievable rate is

    C_N = 1/(2N) sum_i log2(1 + 2 q_i |H_i|^2 / (N0 + NA))

subject to ``mean(q) <= P`` (transmit power) and ``mean(q |H|^2) <= K``
(receive power).  The optimum has the form

    q_i = max(0, 1/(alpha |H_i|^2 + beta) - (N0 + NA) / (2 |H_i|^2))

with multipliers ``alpha, beta >= 0``.  A peak constraint ``gamma`` on the
receive samples is mapped to a receive-power budget through the second moment
of a truncated Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .signal_model import ChannelModel, NoiseSpec, db, undb

N_DFT = 4096
K_RANGE_DB = (-40.0, 10.0)
SNDR_RANGE_DB = (0.0, 50.0)

_RTOL = 1e-12


class BoundsError(ValueError):
    pass


def channel_spectrum(taps, N: int = N_DFT) -> np.ndarray:
    """``|H_i|^2`` of the zero-padded ``N``-point DFT of the taps."""
    taps = np.asarray(taps, dtype=float)
    if N < taps.size:
        raise ValueError("DFT size shorter than the channel")
    return np.abs(np.fft.fft(taps, N)) ** 2


@dataclass(frozen=True)
class SpectrumAllocation:
    """Energy spectral components ``q`` over the power gains ``H2 = |H|^2``."""

    q: np.ndarray
    H2: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        H2 = np.asarray(self.H2, dtype=float)
        if q.shape != H2.shape or q.ndim != 1:
            raise ValueError("q and H2 must be 1-D arrays of equal length")
        if np.any(q < 0):
            raise ValueError("spectral components must be non-negative")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "H2", H2)

    @property
    def N(self) -> int:
        return self.q.size

    @property
    def transmit_power(self) -> float:
        return float(self.q.mean())

    @property
    def receive_power(self) -> float:
        return float(np.mean(self.q * self.H2))


@dataclass(frozen=True)
class CapacityPoint:
    rate: float
    tstnr: float
    sndr: float
    K: float
    P: float
    alpha: float
    beta: float


@dataclass(frozen=True)
class TgModel:
    """Receive samples modelled as a Gaussian of power ``sigma2`` truncated to ``[-sqrt(gamma), sqrt(gamma)]``."""

    sigma2: float
    gamma: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.gamma > 0):
            raise ValueError("sigma2 and gamma must be positive")

    @classmethod
    def from_channel(cls, ch: ChannelModel, gamma: float) -> "TgModel":
        return cls(ch.energy, gamma)


def capacity(alloc: SpectrumAllocation, noise: NoiseSpec) -> float:
    """Rate in bits per (real) symbol of a spectral allocation."""
    if noise.total <= 0:
        raise ValueError("capacity needs positive noise")
    return float(np.mean(np.log2(1 + 2 * alloc.q * alloc.H2 / noise.total)) / 2)


def _q(alpha, beta, H2, n):
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 1.0 / (alpha * H2 + beta) - n / (2 * H2)
    q[~np.isfinite(q)] = 0.0
    return np.maximum(q, 0.0)


def _decreasing_root(f, lo: float, hi: float) -> float:
    """Root of a decreasing function, widening ``[lo, hi]`` geometrically until it brackets."""
    while f(lo) <= 0:
        lo /= 1e3
        if lo < 1e-300:
            raise BoundsError("no bracket below")
    while f(hi) >= 0:
        hi *= 1e3
        if hi > 1e300:
            raise BoundsError("no bracket above")
    return brentq(f, lo, hi, rtol=_RTOL, xtol=1e-300)


def optimal_allocation(H, noise: NoiseSpec, P: float, K: float):
    """Capacity-achieving allocation under both power constraints.

    ``H`` holds DFT values or magnitudes; only ``|H|^2`` is used.  Returns
    ``(q, alpha, beta)``.  Each multiplier is zero when its constraint is
    slack.
    """
    if not (P > 0 and K > 0):
        raise ValueError("P and K must be positive")
    H2 = np.abs(np.asarray(H)) ** 2
    if not np.any(H2 > 0):
        raise ValueError("channel has no energy")
    if noise.total <= 0:
        raise ValueError("allocation needs positive noise")
    n = noise.total

    def tx(a, b):
        return _q(a, b, H2, n).mean()

    def rx(a, b):
        return np.mean(_q(a, b, H2, n) * H2)

    # transmit constraint alone: water-filling
    beta = _decreasing_root(lambda b: tx(0.0, b) - P, 1.0 / P, 1.0 / P)
    if rx(0.0, beta) <= K * (1 + 1e-12):
        return _q(0.0, beta, H2, n), 0.0, beta
    # receive constraint alone
    alpha = _decreasing_root(lambda a: rx(a, 0.0) - K, 1.0 / K, 1.0 / K)
    if tx(alpha, 0.0) <= P * (1 + 1e-12):
        return _q(alpha, 0.0, H2, n), alpha, 0.0

    def beta_of(a):
        if a == 0.0:
            return beta
        if tx(a, 0.0) <= P:
            return 0.0
        return _decreasing_root(lambda b: tx(a, b) - P, beta, beta)

    # rx(a, beta_of(a)) falls from above K at a = 0 to below K at the receive-only multiplier
    a = brentq(lambda a: rx(a, beta_of(a)) - K, 0.0, alpha, rtol=_RTOL, xtol=1e-300)
    b = beta_of(a)
    return _q(a, b, H2, n), a, b


def calibrated_noise(P: float, K: float, tstnr_db: float, sndr_db: float) -> NoiseSpec:
    """``N0 = P / TSTNR`` and ``NA = 2 K / SNDR``."""
    return NoiseSpec(N0=P / float(undb(tstnr_db)), NA=2 * K / float(undb(sndr_db)))


def capacity_at_K(H2, K: float, tstnr_db: float, sndr_db: float, P: float = 1.0) -> CapacityPoint:
    """Optimal rate at receive budget ``K`` with noise recalibrated to the target ratios.

    If the receive constraint is slack, the ADC noise follows the received power
    actually used, so the budget is lowered to the fixed point where the
    water-filling receive power equals it.  Above that point the rate no longer
    depends on ``K``.
    """
    H2 = np.asarray(H2, dtype=float)

    def solve(k):
        noise = calibrated_noise(P, k, tstnr_db, sndr_db)
        q, a, b = optimal_allocation(np.sqrt(H2), noise, P, k)
        return SpectrumAllocation(q, H2), noise, a, b

    alloc, noise, a, b = solve(K)
    if a == 0.0 and alloc.receive_power < K * (1 - 1e-9):

        def excess(k):
            noise = calibrated_noise(P, k, tstnr_db, sndr_db)
            q, _, _ = optimal_allocation(np.sqrt(H2), noise, P, math.inf)
            return k - np.mean(q * H2)

        k_free = brentq(excess, K * 1e-9, K, rtol=1e-12)
        alloc, noise, a, b = solve(k_free)
    return CapacityPoint(capacity(alloc, noise), tstnr_db, sndr_db, K, P, a, b)


def optimize_over_K(H2, tstnr_db: float, sndr_db: float, sigma2: float | None = None,
                    grid_step_db: float = 1.0, tol_db: float = 0.01) -> CapacityPoint:
    """Maximise the rate over the receive budget ``K``.

    ``K`` is searched in dB around ``sigma2`` (default ``mean(H2)``): a coarse
    grid locates the best cell, then a bounded scalar search refines it inside the
    neighbouring cells.
    """
    H2 = np.asarray(H2, dtype=float)
    if not (math.isfinite(tstnr_db) and math.isfinite(sndr_db)):
        raise ValueError("dB values must be finite")
    s2 = float(H2.mean()) if sigma2 is None else sigma2
    lo, hi = db(s2) + K_RANGE_DB[0], db(s2) + K_RANGE_DB[1]

    def rate(kdb):
        return capacity_at_K(H2, float(undb(kdb)), tstnr_db, sndr_db).rate

    grid = np.arange(lo, hi + grid_step_db / 2, grid_step_db)
    rates = np.array([rate(k) for k in grid])
    i = int(np.argmax(rates))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(lambda k: -rate(k), bounds=(a, b), method="bounded", options={"xatol": tol_db})
    kdb = float(res.x) if -res.fun >= rates[i] else float(grid[i])
    return capacity_at_K(H2, float(undb(kdb)), tstnr_db, sndr_db)


def tg_power(model: TgModel) -> float:
    """Second moment ``K_TG`` of the truncated Gaussian."""
    s2, g = model.sigma2, model.gamma
    a = math.sqrt(g / (2 * s2))
    k = s2 - math.sqrt(2 * g * s2 / math.pi) * math.exp(-g / (2 * s2)) / math.erf(a)
    assert k > 0
    return k


def tg_papr(model: TgModel) -> tuple[float, float]:
    """``(K_TG, gamma / K_TG)``; the PAPR is linear."""
    k = tg_power(model)
    return k, model.gamma / k


def _invert_rate(rate_of_sndr, rate: float, what: str) -> float:
    lo, hi = SNDR_RANGE_DB
    f_lo, f_hi = rate_of_sndr(lo) - rate, rate_of_sndr(hi) - rate
    if f_lo > 0 or f_hi < 0:
        raise BoundsError(f"rate {rate} unreachable for {what} with SNDR in [{lo}, {hi}] dB")
    return brentq(lambda s: rate_of_sndr(s) - rate, lo, hi, xtol=1e-3)


def sndr_iid(H2, rate: float, tstnr_db: float) -> float:
    """SNDR (dB) at which a flat unit-power input reaches ``rate``."""
    H2 = np.asarray(H2, dtype=float)
    flat = SpectrumAllocation(np.ones_like(H2), H2)
    pr = flat.receive_power
    return _invert_rate(
        lambda s: capacity(flat, calibrated_noise(1.0, pr, tstnr_db, s)), rate, "i.i.d. input"
    )


def sndr_constrained(H2, rate: float, tstnr_db: float, K: float) -> float:
    """SNDR (dB) at which the optimal allocation under receive budget ``K`` reaches ``rate``."""
    return _invert_rate(lambda s: capacity_at_K(H2, K, tstnr_db, s).rate, rate, f"K={K:g}")


@dataclass(frozen=True)
class GainPoint:
    gamma_db: float
    papr_tg_db: float
    papr_gain_db: float
    sndr_gain_db: float
    g_t_db: float

    FIELDS = ("gamma_db", "papr_tg_db", "papr_gain_db", "sndr_gain_db", "g_t_db")

    def row(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)


def theoretical_gain(ch: ChannelModel, rate: float, tstnr_db: float, gamma: float,
                     papr_uniform_db: float, N: int = N_DFT) -> GainPoint:
    """PAPR, SNDR and total shaping gains (dB) of peak level ``gamma`` (linear).

    ``papr_uniform_db`` is the receive PAPR of the unshaped reference system.
    """
    H2 = channel_spectrum(ch.taps, N)
    k_tg, papr = tg_papr(TgModel.from_channel(ch, gamma))
    papr_gain = papr_uniform_db - float(db(papr))
    sndr_gain = sndr_iid(H2, rate, tstnr_db) - sndr_constrained(H2, rate, tstnr_db, k_tg)
    return GainPoint(float(db(gamma)), float(db(papr)), papr_gain, sndr_gain, papr_gain + sndr_gain)


def gain_sweep(ch: ChannelModel, rate: float, tstnr_db: float, gamma_db_grid,
               papr_uniform_db: float, N: int = N_DFT) -> list[GainPoint]:
    """:func:`theoretical_gain` over a grid of peak levels in dB."""
    return [theoretical_gain(ch, rate, tstnr_db, float(undb(g)), papr_uniform_db, N) for g in gamma_db_grid]


def best_gain(points: list[GainPoint]) -> GainPoint:
    return max(points, key=lambda p: p.g_t_db)


def rate_curve(H2, tstnr_db: float, sndr_grid_db) -> np.ndarray:
    """Optimised rate bound at each SNDR of the grid."""
    return np.array([optimize_over_K(H2, tstnr_db, s).rate for s in sndr_grid_db])
