"""Seeded Monte Carlo experiments and result files.

Every frame draws its bits and noise from its own generator seeded by
``(seed, point, frame)``, so any frame can be replayed alone and partial
results can be merged in any order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .equalizer import EqualizerConfig, iterative_receive
from .precoder import Constellation, gray_map, pam, precode_indices
from .signal_model import (
    ChannelModel,
    calibrate_noise,
    convolve_frame,
    db,
    empirical_papr,
    load_channel,
    propagate,
    undb,
)
from .turbo_codec import TurboConfig, build_code

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1

# system -> (Q, code rate, equalizer mode)
SYSTEMS = {
    "shaped8": (8, 0.6, "shaped"),
    "shaped4": (4, 0.9, "shaped"),
    "uniform4_te": (4, 0.9, "uniform"),
    "uniform8_te": (8, 0.6, "uniform"),
}

_PILOT_STREAM = 0

CCDF_GRID_DB = tuple(round(0.1 * k, 1) for k in range(151))


class ConfigError(ValueError):
    pass


class FrameError(RuntimeError):
    """A component failed while processing one frame."""

    def __init__(self, sndr_db: float, frame: int, cause: Exception):
        super().__init__(f"frame {frame} at SNDR {sndr_db:g} dB: {type(cause).__name__}: {cause}")
        self.sndr_db = sndr_db
        self.frame = frame
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of a PAPR or BER experiment.

    ``gamma_db`` is ignored by the uniform systems.  ``iterations`` is the
    number of equalizer/decoder exchanges; ``decoder_iterations`` the number of
    turbo iterations inside each decoder call.
    """

    channel: str = "A"
    system: str = "shaped8"
    rate: float = 1.8
    gamma_db: float = -14.0
    tstnr_db: float = 40.0
    sndr_grid_db: tuple[float, ...] = (16.0, 17.0, 18.0, 19.0, 20.0)
    frames: int = 100
    M: int = 16
    iterations: int = 12
    epsilon: float = 1e-4
    seed: int = 1
    block_length: int = 4096
    interleaver_seed: int = 2024
    decoder_iterations: int = 2
    llr_clip: float = 4.0
    early_stop: bool = True
    max_frame_errors: int = 200
    min_bits: int = 0
    pilot_frames: int = 64
    papr_symbols: int = 2_000_000

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; choose from {sorted(SYSTEMS)}")
        Q, code_rate, _ = SYSTEMS[self.system]
        m = Q.bit_length() - 1
        if not math.isclose(self.rate, m * code_rate, rel_tol=1e-9):
            raise ConfigError(
                f"rate {self.rate} does not match {self.system}: {m} bits/symbol at code rate {code_rate}"
            )
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        for name in ("frames", "M", "iterations", "block_length", "decoder_iterations",
                     "max_frame_errors", "pilot_frames", "papr_symbols"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.min_bits < 0:
            raise ConfigError("min_bits must be non-negative")
        object.__setattr__(self, "sndr_grid_db", tuple(float(s) for s in self.sndr_grid_db))

    @property
    def Q(self) -> int:
        return SYSTEMS[self.system][0]

    @property
    def mode(self) -> str:
        return SYSTEMS[self.system][2]

    @property
    def constellation(self) -> Constellation:
        return pam(self.Q)

    @property
    def gamma(self) -> float:
        return float(undb(self.gamma_db)) if self.mode == "shaped" else math.inf

    def turbo(self) -> TurboConfig:
        c = self.constellation
        return TurboConfig(
            rate=SYSTEMS[self.system][1],
            block_length=self.block_length,
            interleaver_seed=self.interleaver_seed,
            iterations=self.decoder_iterations,
            bits_per_symbol=c.m,
        )

    def equalizer(self) -> EqualizerConfig:
        return EqualizerConfig(
            M=self.M, max_iterations=self.iterations, mode=self.mode,
            early_stop=self.early_stop, llr_clip=self.llr_clip,
        )

    def load_channel(self) -> ChannelModel:
        return load_channel(self.channel)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sndr_grid_db"] = list(self.sndr_grid_db)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if "sndr_grid_db" in data:
            data["sndr_grid_db"] = tuple(data["sndr_grid_db"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "ExperimentConfig":
        """Read a TOML key/value file (optional) and apply non-``None`` overrides."""
        data = {}
        if path is not None:
            with open(path, "rb") as fh:
                try:
                    data = tomllib.load(fh)
                except tomllib.TOMLDecodeError as exc:
                    raise ConfigError(f"{path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg: ExperimentConfig) -> str:
    return f"shapelink-{__version__}+cfg.{cfg.digest()}"


def frame_rng(seed: int, point: int, frame: int) -> np.random.Generator:
    return np.random.default_rng([seed, point, frame])


def modulate(bits, ch: ChannelModel, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Symbols of one frame and the per-symbol fallback indicator."""
    c = cfg.constellation
    if cfg.mode == "shaped":
        idx, flags = precode_indices(bits, ch, cfg.gamma, c)
        return c.points[idx], flags
    x = gray_map(bits, c)
    return x, np.zeros(x.size, dtype=bool)


# ---------------------------------------------------------------- PAPR


@dataclass
class PaprResult:
    """Receive-power statistics of noiseless frames."""

    config: dict
    provenance: str
    symbols: int
    pt: float
    pr: float
    papr_db: float
    fallback_count: int
    peak_excess: float
    ccdf_grid_db: list[float]
    ccdf: list[float]
    schema_version: int = SCHEMA_VERSION

    KIND = "papr"
    COLUMNS = ("threshold_db", "ccdf")

    def rows(self):
        return list(zip(self.ccdf_grid_db, self.ccdf))

    def meta(self) -> dict:
        return {k: getattr(self, k) for k in
                ("symbols", "pt", "pr", "papr_db", "fallback_count", "peak_excess")}

    @classmethod
    def from_parts(cls, config, provenance, meta, rows):
        grid = [float(r[0]) for r in rows]
        ccdf = [float(r[1]) for r in rows]
        return cls(config, provenance, int(meta["symbols"]), float(meta["pt"]), float(meta["pr"]),
                   float(meta["papr_db"]), int(meta["fallback_count"]), float(meta["peak_excess"]),
                   grid, ccdf)


def papr_frames(cfg: ExperimentConfig, ch: ChannelModel | None = None):
    """Noiseless frames of the configured system: yields ``(x, r, fallback_flags)``."""
    ch = cfg.load_channel() if ch is None else ch
    c = cfg.constellation
    n_bits = build_code(cfg.turbo()).n_coded
    n_sym = n_bits // c.m
    usable = n_sym - (ch.span - 1)
    if usable < 1:
        raise ConfigError("frame shorter than the channel")
    frames = math.ceil(cfg.papr_symbols / usable)
    for f in range(frames):
        rng = frame_rng(cfg.seed, _PILOT_STREAM, f)
        x, flags = modulate(rng.integers(0, 2, n_bits), ch, cfg)
        yield x, convolve_frame(x, ch.taps), flags


def run_papr_sweep(cfg: ExperimentConfig) -> PaprResult:
    """PAPR and CCDF of ``p_n / P_r`` over at least ``cfg.papr_symbols`` samples.

    Random coded-bit streams are mapped frame by frame; the first ``L``
    samples of each frame are discarded.
    """
    ch = cfg.load_channel()
    warm = ch.span
    if cfg.papr_symbols < 10 / cfg.epsilon:
        raise ConfigError(
            f"papr_symbols={cfg.papr_symbols} too few for epsilon={cfg.epsilon:g}; "
            f"need {math.ceil(10 / cfg.epsilon)}"
        )
    powers, tx, fallbacks, excess = [], 0.0, 0, 0.0
    for x, r, flags in papr_frames(cfg, ch):
        p = r[warm:] ** 2
        powers.append(p)
        tx += float(np.sum(x[warm:] ** 2))
        fallbacks += int(flags[warm:].sum())
        if cfg.mode == "shaped":
            ok = ~flags[warm:]
            if ok.any():
                excess = max(excess, float(p[ok].max() / cfg.gamma))
    p = np.concatenate(powers)
    pr = float(p.mean())
    grid = np.array(CCDF_GRID_DB)
    srt = np.sort(p / pr)
    ccdf = 1.0 - np.searchsorted(srt, undb(grid), side="right") / srt.size
    return PaprResult(
        config=cfg.to_dict(),
        provenance=provenance(cfg),
        symbols=int(p.size),
        pt=tx / p.size,
        pr=pr,
        papr_db=float(db(empirical_papr(p, cfg.epsilon))),
        fallback_count=fallbacks,
        peak_excess=excess,
        ccdf_grid_db=[float(g) for g in grid],
        ccdf=[float(v) for v in ccdf],
    )


# ---------------------------------------------------------------- BER


@dataclass
class FrameOutcome:
    bit_errors: int
    iteration_errors: np.ndarray
    iterations: int
    fallbacks: int


@dataclass
class SweepPoint:
    sndr_db: float
    n0: float
    na: float
    pt: float
    pr: float
    papr_db: float
    bits: int = 0
    bit_errors: int = 0
    frames: int = 0
    frame_errors: int = 0
    fallback_count: int = 0
    iterations_run: int = 0
    iteration_errors: list[int] = field(default_factory=list)

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits if self.bits else math.nan

    @property
    def ber_upper(self) -> float:
        """BER reported when no error was seen: the 95 % upper bound ``3 / bits``."""
        if self.bit_errors:
            return self.ber
        return 3.0 / self.bits if self.bits else math.nan

    @property
    def iteration_ber(self) -> list[float]:
        return [e / self.bits if self.bits else math.nan for e in self.iteration_errors]

    def add(self, out: FrameOutcome, block_length: int):
        self.bits += block_length
        self.bit_errors += out.bit_errors
        self.frames += 1
        self.frame_errors += int(out.bit_errors > 0)
        self.fallback_count += out.fallbacks
        self.iterations_run += out.iterations
        if not self.iteration_errors:
            self.iteration_errors = [0] * out.iteration_errors.size
        for i, e in enumerate(out.iteration_errors):
            self.iteration_errors[i] += int(e)


@dataclass
class SweepResult:
    config: dict
    provenance: str
    seed: int
    interleaver_seed: int
    points: list[SweepPoint]
    schema_version: int = SCHEMA_VERSION

    KIND = "ber"
    COLUMNS = ("sndr_db", "bits", "bit_errors", "ber", "ber_upper", "frames", "frame_errors",
               "fallback_count", "iterations_run", "pt", "pr", "papr_db", "n0", "na", "iteration_errors")

    def rows(self):
        out = []
        for p in self.points:
            out.append((p.sndr_db, p.bits, p.bit_errors, p.ber, p.ber_upper, p.frames, p.frame_errors,
                        p.fallback_count, p.iterations_run, p.pt, p.pr, p.papr_db, p.n0, p.na,
                        ";".join(str(e) for e in p.iteration_errors)))
        return out

    def meta(self) -> dict:
        return {"seed": self.seed, "interleaver_seed": self.interleaver_seed}

    @classmethod
    def from_parts(cls, config, provenance, meta, rows):
        points = []
        for r in rows:
            it = [int(v) for v in str(r[14]).split(";") if v != ""]
            points.append(SweepPoint(
                sndr_db=float(r[0]), n0=float(r[12]), na=float(r[13]), pt=float(r[9]), pr=float(r[10]),
                papr_db=float(r[11]), bits=int(r[1]), bit_errors=int(r[2]), frames=int(r[5]),
                frame_errors=int(r[6]), fallback_count=int(r[7]), iterations_run=int(r[8]),
                iteration_errors=it,
            ))
        return cls(config, provenance, int(meta["seed"]), int(meta["interleaver_seed"]), points)

    def point(self, sndr_db: float) -> SweepPoint:
        for p in self.points:
            if p.sndr_db == sndr_db:
                return p
        raise KeyError(sndr_db)


@dataclass(frozen=True)
class Calibration:
    pt: float
    pr: float
    papr_db: float


def calibrate(cfg: ExperimentConfig, ch: ChannelModel) -> Calibration:
    """Average transmit and receive power of the pilot frames (warm-up excluded)."""
    c = cfg.constellation
    code = build_code(cfg.turbo())
    warm = ch.span
    xs, ps = [], []
    for f in range(cfg.pilot_frames):
        rng = frame_rng(cfg.seed, _PILOT_STREAM, f)
        x, _ = modulate(code.encode(rng.integers(0, 2, cfg.block_length)), ch, cfg)
        xs.append(x[warm:])
        ps.append(convolve_frame(x, ch.taps)[warm:] ** 2)
    p = np.concatenate(ps)
    papr = float(db(empirical_papr(p, cfg.epsilon))) if p.size >= 10 / cfg.epsilon else math.nan
    return Calibration(float(np.mean(np.concatenate(xs) ** 2)), float(p.mean()), papr)


def simulate_frame(cfg: ExperimentConfig, ch: ChannelModel, noise, point: int, frame: int) -> FrameOutcome:
    """Encode, map, transmit and iteratively receive one frame."""
    c = cfg.constellation
    tc = cfg.turbo()
    code = build_code(tc)
    eq = cfg.equalizer()
    rng = frame_rng(cfg.seed, point + 1, frame)
    info = rng.integers(0, 2, cfg.block_length).astype(np.uint8)
    x, flags = modulate(code.encode(info), ch, cfg)
    _, y = propagate(x, ch, noise, rng)
    res = iterative_receive(y, ch, noise, c, cfg.gamma, tc, eq)
    errs = np.array([np.count_nonzero(d != info) for d in res.decisions], dtype=np.int64)
    per_it = np.concatenate([errs, np.full(eq.max_iterations - errs.size, errs[-1])])
    return FrameOutcome(int(errs[-1]), per_it, res.iterations, int(flags.sum()))


def run_ber_sweep(cfg: ExperimentConfig,
                  progress: Callable[[SweepPoint], None] | None = None) -> SweepResult:
    """BER against SNDR at fixed TSTNR.

    Each point runs until ``cfg.frames`` frames or ``cfg.max_frame_errors``
    frame errors, whichever comes first, but never stops before
    ``cfg.min_bits`` information bits.
    """
    ch = cfg.load_channel()
    cal = calibrate(cfg, ch)
    points = []
    for k, sndr in enumerate(cfg.sndr_grid_db):
        noise = calibrate_noise(cal.pt, cfg.tstnr_db, cal.pr, sndr)
        pt = SweepPoint(sndr, noise.N0, noise.NA, cal.pt, cal.pr, cal.papr_db)
        frame = 0
        while True:
            enough_bits = pt.bits >= cfg.min_bits
            if enough_bits and (frame >= cfg.frames or pt.frame_errors >= cfg.max_frame_errors):
                break
            try:
                out = simulate_frame(cfg, ch, noise, k, frame)
            except Exception as exc:
                raise FrameError(sndr, frame, exc) from exc
            pt.add(out, cfg.block_length)
            frame += 1
        points.append(pt)
        if progress is not None:
            progress(pt)
    return SweepResult(cfg.to_dict(), provenance(cfg), cfg.seed, cfg.interleaver_seed, points)


def ber_threshold(result: SweepResult, target: float = 1e-3) -> float:
    """SNDR where the BER first falls to ``target``, interpolating log BER linearly.

    Returns ``nan`` when the curve never crosses the target.
    """
    pts = sorted(result.points, key=lambda p: p.sndr_db)
    for lo, hi in zip(pts, pts[1:]):
        if lo.ber > target >= hi.ber:
            b_hi = max(hi.ber, 0.5 / hi.bits)
            if b_hi > target:
                return hi.sndr_db
            t = (math.log10(lo.ber) - math.log10(target)) / (math.log10(lo.ber) - math.log10(b_hi))
            return lo.sndr_db + t * (hi.sndr_db - lo.sndr_db)
    if pts and pts[0].ber <= target:
        return pts[0].sndr_db
    return math.nan


# ---------------------------------------------------------------- bounds


@dataclass
class BoundsResult:
    config: dict
    provenance: str
    rows_: list[tuple[float, ...]]
    schema_version: int = SCHEMA_VERSION

    KIND = "bounds"
    COLUMNS = ("gamma_db", "papr_tg_db", "papr_gain_db", "sndr_gain_db", "g_t_db")

    def rows(self):
        return self.rows_

    def meta(self) -> dict:
        return {}

    @classmethod
    def from_parts(cls, config, provenance, meta, rows):
        return cls(config, provenance, [tuple(float(v) for v in r) for r in rows])


_KINDS = {k.KIND: k for k in (PaprResult, SweepResult, BoundsResult)}


def _scalar(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_results(result, fmt: str = "csv") -> str:
    """Serialise a result with its schema version, config and provenance."""
    header = {
        "schema_version": result.schema_version,
        "kind": result.KIND,
        "provenance": result.provenance,
        "config": result.config,
        "meta": {k: _scalar(v) for k, v in result.meta().items()},
    }
    if fmt == "json":
        doc = dict(header)
        doc["columns"] = list(result.COLUMNS)
        doc["rows"] = [[_scalar(v) for v in r] for r in result.rows()]
        return json.dumps(doc, sort_keys=False, indent=1) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    for key in ("schema_version", "kind", "provenance"):
        buf.write(f"# {key}: {header[key]}\n")
    buf.write(f"# config: {json.dumps(header['config'], sort_keys=True)}\n")
    buf.write(f"# meta: {json.dumps(header['meta'], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(result.COLUMNS)
    for r in result.rows():
        w.writerow([_cell(_scalar(v)) for v in r])
    return buf.getvalue()


def emit_results(result, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``result`` as CSV or JSON (default from the file suffix)."""
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    text = render_results(result, fmt)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def parse_results(text: str):
    """Inverse of :func:`render_results`."""
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        header, rows = doc, doc["rows"]
        columns = doc["columns"]
    else:
        header = {}
        lines = text.splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                header[key] = json.loads(value) if key in ("config", "meta") else value
            else:
                body.append(line)
        reader = csv.reader(body)
        columns = next(reader)
        rows = list(reader)
    version = int(header.get("schema_version", -1))
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {version}; expected {SCHEMA_VERSION}")
    kind = _KINDS.get(header.get("kind"))
    if kind is None:
        raise ValueError(f"unknown result kind {header.get('kind')!r}")
    if tuple(columns) != kind.COLUMNS:
        raise ValueError(f"unexpected columns {columns}")
    return kind.from_parts(header["config"], header["provenance"], header["meta"], rows)


def load_results(path: str | Path):
    return parse_results(Path(path).read_text())
