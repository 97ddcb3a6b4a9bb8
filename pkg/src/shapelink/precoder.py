"""Online peak-power shaping precoder for PAM over an ISI channel.

At every step the precoder forbids the constellation points whose noiseless
channel output would exceed the peak power ``gamma`` given the last ``L-1``
transmitted symbols, and maps the next ``m`` coded bits through the row of
the mapping table selected by the resulting indicator vector.  The receiver
recomputes the same rows from each trellis state, so the transmitter and the
equalizer share :func:`branch_metas`.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numba
import numpy as np

from .signal_model import ChannelModel

FALLBACK = -1
ERASED = 2

# label of point i for 4-PAM, bits MSB first
_GRAY4 = (0b10, 0b00, 0b01, 0b11)


def _reflected_gray(m: int) -> tuple[int, ...]:
    return tuple(i ^ (i >> 1) for i in range(1 << m))


@dataclass(frozen=True)
class Constellation:
    """Unit-average-power Q-PAM with a Gray labelling of ascending points."""

    Q: int
    labels: tuple[int, ...]

    def __post_init__(self):
        if self.Q < 2 or self.Q & (self.Q - 1):
            raise ValueError("Q must be a power of two >= 2")
        if sorted(self.labels) != list(range(self.Q)):
            raise ValueError("labels must be a permutation of 0..Q-1")

    @property
    def m(self) -> int:
        return self.Q.bit_length() - 1

    @property
    def scale(self) -> float:
        return float(np.sqrt(3.0 / (self.Q**2 - 1)))

    @property
    def levels(self) -> np.ndarray:
        """Unscaled odd-integer levels ``-Q+1, ..., Q-1``."""
        return np.arange(-self.Q + 1, self.Q, 2)

    @property
    def points(self) -> np.ndarray:
        return self.levels * self.scale

    def label_bits(self, label: int) -> tuple[int, ...]:
        return tuple((label >> (self.m - 1 - l)) & 1 for l in range(self.m))

    @property
    def point_of_label(self) -> np.ndarray:
        """Identity (Gray) row: label value -> point index."""
        inv = np.empty(self.Q, dtype=np.int64)
        for i, lab in enumerate(self.labels):
            inv[lab] = i
        return inv


def pam(Q: int) -> Constellation:
    """Q-PAM with the labelling used throughout (4-PAM: -3,-1,1,3 -> 10,00,01,11)."""
    if Q == 4:
        return Constellation(4, _GRAY4)
    return Constellation(Q, _reflected_gray(Q.bit_length() - 1))


def mask_index(mask) -> int:
    """Decimal value of the indicator vector with ``A_0`` as the most significant bit."""
    value = 0
    for a in mask:
        value = (value << 1) | int(a)
    return value


def mask_from_index(index: int, Q: int) -> np.ndarray:
    return np.array([(index >> (Q - 1 - i)) & 1 for i in range(Q)], dtype=np.uint8)


@dataclass(frozen=True)
class PrecoderState:
    """Last ``L-1`` transmitted symbols, newest first (zeros before the frame)."""

    history: tuple[float, ...]

    @classmethod
    def initial(cls, span: int) -> "PrecoderState":
        return cls((0.0,) * (span - 1))

    def push(self, symbol: float) -> "PrecoderState":
        if not self.history:
            return self
        return PrecoderState((float(symbol),) + self.history[:-1])

    def tail(self, ch: ChannelModel) -> float:
        """ISI contribution ``sum_{i>=1} h_i x_{n-i}``."""
        return float(np.dot(ch.taps[1:], self.history)) if self.history else 0.0


@dataclass(frozen=True)
class BranchMeta:
    """A trellis branch leaving a state: its symbol, merged label and probability."""

    point: int
    symbol: float
    merged_label: str
    probability: Fraction
    labels: tuple[int, ...]


def forbidden_mask(state: PrecoderState, ch: ChannelModel, gamma: float, c: Constellation) -> np.ndarray:
    """Indicator vector ``A``: ``A_i = 1`` iff point ``i`` keeps the output power within ``gamma``."""
    if len(state.history) != ch.span - 1:
        raise ValueError("state length must equal L-1")
    out = ch.taps[0] * c.points + state.tail(ch)
    return (out * out <= gamma).astype(np.uint8)


def build_mapping_row(mask, c: Constellation) -> np.ndarray:
    """One row of the mapping table: label value -> point index.

    Allowed points keep their own labels.  Labels of forbidden points, taken in
    ascending point order, go to the allowed point with minimal Hamming distance
    between labels, then minimal Euclidean distance between points, then the
    fewest labels assigned so far, then the lowest point.  An all-forbidden mask
    yields the fallback row (every entry ``FALLBACK``).
    """
    mask = np.asarray(mask)
    allowed = [i for i in range(c.Q) if mask[i]]
    row = np.full(c.Q, FALLBACK, dtype=np.int64)
    if not allowed:
        return row
    load = {i: 1 for i in allowed}
    for i in allowed:
        row[c.labels[i]] = i
    levels = c.levels
    for f in range(c.Q):
        if mask[f]:
            continue
        lab = c.labels[f]
        target = min(
            allowed,
            key=lambda j: (
                bin(lab ^ c.labels[j]).count("1"),
                abs(levels[j] - levels[f]),
                load[j],
                levels[j],
            ),
        )
        row[lab] = target
        load[target] += 1
    return row


@lru_cache(maxsize=None)
def mapping_table(c: Constellation) -> np.ndarray:
    """All ``2^Q`` rows, indexed by :func:`mask_index`; row 0 is the fallback row."""
    table = np.stack([build_mapping_row(mask_from_index(k, c.Q), c) for k in range(1 << c.Q)])
    table.setflags(write=False)
    return table


def merge_labels(labels, m: int) -> str:
    out = []
    for l in range(m):
        bits = {(lab >> (m - 1 - l)) & 1 for lab in labels}
        out.append(str(bits.pop()) if len(bits) == 1 else "X")
    return "".join(out)


def branch_metas(row, c: Constellation) -> list[BranchMeta]:
    """Branches of a non-fallback row, in ascending point order."""
    row = np.asarray(row)
    if np.any(row == FALLBACK):
        raise ValueError("fallback row has no label-driven branches")
    metas = []
    for p in range(c.Q):
        labels = tuple(int(lab) for lab in np.flatnonzero(row == p))
        if labels:
            metas.append(
                BranchMeta(
                    point=p,
                    symbol=float(c.points[p]),
                    merged_label=merge_labels(labels, c.m),
                    probability=Fraction(len(labels), c.Q),
                    labels=labels,
                )
            )
    return metas


def fallback_point(tail: float, h0: float, c: Constellation) -> int:
    return int(np.argmin(np.abs(h0 * c.points + tail)))


def state_branch_metas(state: PrecoderState, ch: ChannelModel, gamma: float, c: Constellation) -> list[BranchMeta]:
    """Branch metadata leaving ``state``, including the all-forbidden fallback branch."""
    mask = forbidden_mask(state, ch, gamma, c)
    k = mask_index(mask)
    if k == 0:
        p = fallback_point(state.tail(ch), ch.taps[0], c)
        return [BranchMeta(p, float(c.points[p]), "X" * c.m, Fraction(1), tuple(range(c.Q)))]
    return branch_metas(mapping_table(c)[k], c)


@lru_cache(maxsize=None)
def label_codes(c: Constellation) -> np.ndarray:
    """``codes[mask, point, bit]`` in {0, 1, ERASED}; entries of unused points are ERASED.

    Mask 0 (fallback) has every bit erased for every point.
    """
    table = mapping_table(c)
    codes = np.full((1 << c.Q, c.Q, c.m), ERASED, dtype=np.int8)
    for k in range(1, 1 << c.Q):
        for meta in branch_metas(table[k], c):
            for l, ch in enumerate(meta.merged_label):
                if ch != "X":
                    codes[k, meta.point, l] = int(ch)
    codes.setflags(write=False)
    return codes


def bits_to_labels(bits, m: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size % m:
        raise ValueError(f"bit count {bits.size} is not a multiple of {m}")
    groups = bits.reshape(-1, m)
    weights = 1 << np.arange(m - 1, -1, -1)
    return groups @ weights


def labels_to_bits(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    shifts = np.arange(m - 1, -1, -1)
    return ((labels[:, None] >> shifts) & 1).reshape(-1).astype(np.uint8)


def gray_map(bits, c: Constellation) -> np.ndarray:
    """Plain (unshaped) Gray mapping of a bit stream to symbols."""
    return c.points[c.point_of_label[bits_to_labels(bits, c.m)]]


@numba.njit(cache=True)
def _precode_kernel(labels, taps, points, gamma, table):
    n = labels.size
    L = taps.size
    Q = points.size
    idx = np.empty(n, dtype=np.int64)
    flags = np.zeros(n, dtype=np.bool_)
    hist = np.zeros(max(L - 1, 1))
    for k in range(n):
        tail = 0.0
        for i in range(1, L):
            tail += taps[i] * hist[i - 1]
        mask = 0
        for i in range(Q):
            v = taps[0] * points[i] + tail
            mask = (mask << 1) | (1 if v * v <= gamma else 0)
        if mask == 0:
            best = 0
            bestv = np.inf
            for i in range(Q):
                v = abs(taps[0] * points[i] + tail)
                if v < bestv:
                    bestv = v
                    best = i
            p = best
            flags[k] = True
        else:
            p = table[mask, labels[k]]
        idx[k] = p
        for i in range(L - 2, 0, -1):
            hist[i] = hist[i - 1]
        if L > 1:
            hist[0] = points[p]
    return idx, flags


def precode_indices(bits, ch: ChannelModel, gamma: float, c: Constellation) -> tuple[np.ndarray, np.ndarray]:
    """Point indices of the shaped frame and a per-symbol fallback indicator."""
    labels = bits_to_labels(bits, c.m)
    return _precode_kernel(labels, ch.taps, c.points, float(gamma), mapping_table(c))


def precode_frame(bits, ch: ChannelModel, gamma: float, c: Constellation) -> tuple[np.ndarray, int]:
    """Map coded bits to a peak-constrained symbol frame.

    Returns ``(symbols, fallback_count)``.  A fallback step (every point
    forbidden) transmits the point with the smallest output magnitude.
    """
    idx, flags = precode_indices(bits, ch, gamma, c)
    return c.points[idx], int(flags.sum())


def precode_reference(bits, ch: ChannelModel, gamma: float, c: Constellation) -> tuple[np.ndarray, int]:
    """Step-by-step precoder built from the public per-step operations (slow)."""
    state = PrecoderState.initial(ch.span)
    table = mapping_table(c)
    out, fallbacks = [], 0
    for lab in bits_to_labels(bits, c.m):
        mask = forbidden_mask(state, ch, gamma, c)
        k = mask_index(mask)
        if k == 0:
            p = fallback_point(state.tail(ch), ch.taps[0], c)
            fallbacks += 1
        else:
            p = int(table[k][lab])
        out.append(c.points[p])
        state = state.push(c.points[p])
    return np.array(out), fallbacks


def format_table(c: Constellation) -> list[list[str]]:
    """Mapping table as text rows: row index then the point levels in label-column order.

    Columns follow the labels of the ascending points, e.g. ``10 00 01 11`` for 4-PAM.
    """
    table = mapping_table(c)
    rows = []
    for k in range(1 << c.Q):
        row = table[k]
        cells = ["-" if row[lab] == FALLBACK else str(int(c.levels[row[lab]])) for lab in c.labels]
        rows.append([str(k)] + cells)
    return rows


def label_header(c: Constellation) -> list[str]:
    return [format(lab, f"0{c.m}b") for lab in c.labels]
