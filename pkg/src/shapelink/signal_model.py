"""Channel impulse responses, the sampled link equation and link metrics.

The received sample at the ADC output is

    y_n = sum_i h_i x_{n-i} + z_n + eta_n = r_n + z_n + eta_n

with thermal noise z_n ~ N(0, N0/2) and ADC noise eta_n ~ N(0, NA/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad

CHANNEL_A_TAPS = (
    0.13, 0.19, 0.14, 0.09, 0.07, 0.05, 0.037, 0.031, 0.025,
    0.02, 0.016, 0.014, 0.013, 0.012, 0.011, 0.01, 0.009, 0.008,
    0.0075, 0.0072, 0.0065, 0.0071, 0.0057, 0.0055, 0.0044,
    0.0044, 0.0033, 0.0033, 0.0032, 0.0029,
)

CHANNEL_B_TAPS = (
    0.069, 0.1, 0.11, 0.098, 0.08, 0.06, 0.05, 0.04, 0.038,
    0.032, 0.028, 0.024, 0.021, 0.019, 0.017, 0.015, 0.014,
    0.013, 0.0118, 0.0108, 0.01, 0.0092, 0.0086, 0.008, 0.0075,
    0.007, 0.0066, 0.0062, 0.0058, 0.0055, 0.0052, 0.00498,
    0.00474, 0.00451, 0.00429, 0.0041, 0.0039, 0.0037,
    0.0036, 0.0034, 0.0037, 0.0034, 0.0029, 0.0028,
    0.0028, 0.0025, 0.0023, 0.0023, 0.002, 0.0017,
)

_BUILTIN = {
    "A": (CHANNEL_A_TAPS, 112e9),
    "B": (CHANNEL_B_TAPS, 224e9),
}


@dataclass(frozen=True)
class ChannelModel:
    """Discrete-time ISI channel ``h_0 .. h_{L-1}``."""

    taps: np.ndarray
    symbol_rate: float | None = None
    name: str = "custom"

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float).reshape(-1)
        if taps.size == 0:
            raise ValueError("channel needs at least one tap")
        if not np.all(np.isfinite(taps)):
            raise ValueError("channel taps must be finite")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def span(self) -> int:
        return self.taps.size

    @property
    def energy(self) -> float:
        """Received power of an i.i.d. unit-power input, ``sum h_i^2``."""
        return float(np.dot(self.taps, self.taps))

    def __hash__(self):
        return hash((self.name, self.taps.tobytes()))

    def __eq__(self, other):
        if not isinstance(other, ChannelModel):
            return NotImplemented
        return self.name == other.name and np.array_equal(self.taps, other.taps)


@dataclass(frozen=True)
class ContinuousImpulseParams:
    t0: float = 7.7e-13
    A: float = 1e-6
    B: float = 8.8e-12

    def __post_init__(self):
        if self.t0 < 0 or self.A <= 0 or self.B <= 0:
            raise ValueError("need t0 >= 0, A > 0 and B > 0")


@dataclass(frozen=True)
class NoiseSpec:
    """One-dimensional noise levels: thermal ``N0`` and ADC ``NA`` (variances N0/2, NA/2)."""

    N0: float
    NA: float

    def __post_init__(self):
        if self.N0 < 0 or self.NA < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def total(self) -> float:
        return self.N0 + self.NA

    @property
    def variance(self) -> float:
        """Variance of ``z_n + eta_n``."""
        return 0.5 * (self.N0 + self.NA)


NOISELESS = NoiseSpec(0.0, 0.0)


@dataclass(frozen=True)
class LinkMetrics:
    Pr: float
    Pt: float
    papr: float
    sndr: float
    snr: float
    tstnr: float
    enob: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "enob", enob(10 * math.log10(self.sndr), 10 * math.log10(self.papr))
        )

    @classmethod
    def measure(cls, x, r, noise: NoiseSpec, epsilon: float = 1e-4, warmup: int = 0):
        """Metrics of a transmitted frame ``x`` and its noiseless channel output ``r``."""
        x = np.asarray(x, dtype=float)[warmup:]
        p = np.asarray(r, dtype=float)[warmup:] ** 2
        pr = float(p.mean())
        pt = float(np.mean(x * x))
        inf = float("inf")
        return cls(
            Pr=pr,
            Pt=pt,
            papr=empirical_papr(p, epsilon),
            sndr=2 * pr / noise.NA if noise.NA > 0 else inf,
            snr=2 * pr / noise.total if noise.total > 0 else inf,
            tstnr=pt / noise.N0 if noise.N0 > 0 else inf,
        )


def builtin_channel(name: str) -> ChannelModel:
    """Return Channel-A (L=30, 112 Gsym/s) or Channel-B (L=50, 224 Gsym/s)."""
    key = name.strip().upper()
    if key not in _BUILTIN:
        raise ValueError(f"unknown channel {name!r}; expected 'A' or 'B'")
    taps, rate = _BUILTIN[key]
    return ChannelModel(np.array(taps), symbol_rate=rate, name=key)


def load_channel(spec: str | Path) -> ChannelModel:
    """Resolve ``A``, ``B`` or a text file with one tap per line."""
    if isinstance(spec, str) and spec.strip().upper() in _BUILTIN:
        return builtin_channel(spec)
    path = Path(spec)
    taps = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                taps.append(float(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from exc
    return ChannelModel(np.array(taps), name=path.stem)


def _loss_factor(t, p: ContinuousImpulseParams):
    s = p.t0 + t
    return p.A / (s * math.sqrt(s)) * math.exp(-math.pi * p.A**2 / s)


def _lorentz_factor(t, p: ContinuousImpulseParams):
    s = p.t0 + t
    return 2 * p.B / (math.pi * (s * s + p.B**2))


def continuous_impulse(t: float, params: ContinuousImpulseParams = ContinuousImpulseParams()) -> float:
    """Wireline impulse response ``h(t)`` as the causal convolution of its two factors.

    The integral ``int_0^t f1(tau) f2(t - tau) dtau`` is evaluated by adaptive
    quadrature; it is zero at ``t = 0`` and positive afterwards.
    """
    if t < 0:
        raise ValueError("continuous impulse response is defined for t >= 0")
    if t == 0:
        return 0.0
    val, _ = quad(
        lambda tau: _loss_factor(tau, params) * _lorentz_factor(t - tau, params),
        0.0,
        t,
        epsrel=1e-8,
        limit=400,
    )
    return val


def sample_continuous_channel(
    symbol_rate: float,
    span: int,
    params: ContinuousImpulseParams = ContinuousImpulseParams(),
    peak: float | None = None,
    phase: float = 0.0,
) -> ChannelModel:
    """Sample ``h(t0 + (n + phase)/f_s)`` for ``n < span``.

    With ``peak`` given, taps are scaled so the largest one equals it.
    """
    t = params.t0 + (np.arange(span) + phase) / symbol_rate
    taps = np.array([continuous_impulse(ti, params) for ti in t])
    if peak is not None:
        taps *= peak / taps.max()
    return ChannelModel(taps, symbol_rate=symbol_rate, name="continuous")


def convolve_frame(x, taps) -> np.ndarray:
    """Noiseless channel output with zero prehistory, same length as ``x``."""
    x = np.asarray(x, dtype=float)
    return np.convolve(x, taps)[: x.size]


def propagate(x, ch: ChannelModel, noise: NoiseSpec, rng: np.random.Generator):
    """Pass a symbol frame through the channel; returns ``(r, y)``."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty frame")
    r = convolve_frame(x, ch.taps)
    y = r.copy()
    if noise.N0 > 0:
        y += rng.normal(0.0, math.sqrt(noise.N0 / 2), x.size)
    if noise.NA > 0:
        y += rng.normal(0.0, math.sqrt(noise.NA / 2), x.size)
    return r, y


def enob(sndr_db, papr_db):
    """ADC effective number of bits for the given SNDR and PAPR (both in dB)."""
    return (sndr_db + papr_db - 4.76) / 6


def papr_quantile_index(n: int, epsilon: float) -> int:
    """Zero-based index of the (1 - epsilon) order statistic of ``n`` sorted samples."""
    k = math.ceil((1.0 - epsilon) * n - 1e-9)
    return min(max(k, 1), n) - 1


def empirical_papr(p, epsilon: float = 1e-4, check_size: bool = True) -> float:
    """Ratio of the power exceeded with probability ``epsilon`` to the mean power.

    With ``check_size`` fewer than ``10 / epsilon`` samples is an error.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError("no samples")
    if check_size and p.size < 10 / epsilon:
        raise ValueError(
            f"{p.size} samples is too few for epsilon={epsilon:g}; need at least {math.ceil(10 / epsilon)}"
        )
    k = papr_quantile_index(p.size, epsilon)
    peak = np.partition(p, k)[k]
    return float(peak / p.mean())


def db(x):
    return 10 * np.log10(x)


def undb(x_db):
    return 10 ** (np.asarray(x_db, dtype=float) / 10)


def calibrate_noise(Pt_measured: float, tstnr_db: float, Pr_measured: float, sndr_db: float) -> NoiseSpec:
    """Noise levels that realise the target TSTNR = Pt/N0 and SNDR = 2 Pr/NA."""
    if Pt_measured <= 0 or Pr_measured <= 0:
        raise ValueError("measured powers must be positive")
    return NoiseSpec(N0=float(Pt_measured / undb(tstnr_db)), NA=float(2 * Pr_measured / undb(sndr_db)))
