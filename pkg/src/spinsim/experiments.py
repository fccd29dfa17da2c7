"""Measurement protocols built on the spin and rate models.

CW frequency sweeps, Zeeman fan maps (field along +z), angle scans of the
transition frequencies, and pulsed laser/MW transients.  Everything here is
a deterministic composition of :mod:`spinsim.spin` and
:mod:`spinsim.photodynamics`.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks as _scipy_find_peaks

from .errors import DomainError
from .photodynamics import (
    ES,
    GS,
    MANIFOLDS,
    N_LEVELS,
    MwDrive,
    RateModel,
    RateParams,
    propagator,
    steady_state,
)
from .spin import (
    GAMMA_E,
    TRIPLET_LABELS,
    FieldVector,
    Label,
    PairModel,
    TransitionSet,
    TripletEigensystem,
    ZfsParams,
    build_triplet_hamiltonian,
    doublet_frequency,
    triplet_transitions,
    zeeman_shift,
)

MAX_SWEEP_POINTS = 10**6


@dataclass(frozen=True)
class ModelParams:
    """Everything needed to simulate one emitter."""

    zfs: ZfsParams = field(default_factory=lambda: ZfsParams(950.0, 200.0))
    pair: PairModel = field(default_factory=PairModel)
    rates: RateParams = field(default_factory=RateParams)
    mw: MwDrive = field(default_factory=MwDrive)

    def rate_model(self, fld: FieldVector, rates: RateParams | None = None) -> RateModel:
        return RateModel(self.zfs, self.pair, rates or self.rates, fld, self.mw.dqt_weight)


def worker_count() -> int:
    """Thread cap from ``SPINSIM_THREADS`` (default 1)."""
    raw = os.environ.get("SPINSIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"SPINSIM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _ordered_map(fn, items):
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SweepSpec:
    f_min: float
    f_max: float
    f_step: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.f_min, self.f_max, self.f_step)):
            raise DomainError("sweep bounds must be finite")
        if not self.f_min < self.f_max:
            raise DomainError(f"f_min={self.f_min} must be below f_max={self.f_max}")
        if not self.f_step > 0:
            raise DomainError(f"f_step must be positive, got {self.f_step}")
        if (self.f_max - self.f_min) / self.f_step > MAX_SWEEP_POINTS:
            raise DomainError("sweep has more than 1e6 points")

    def frequencies(self) -> np.ndarray:
        n = int(math.floor((self.f_max - self.f_min) / self.f_step + 1e-9)) + 1
        return self.f_min + self.f_step * np.arange(n)

    @classmethod
    def with_points(cls, f_min: float, f_max: float, n: int) -> "SweepSpec":
        return cls(f_min, f_max, (f_max - f_min) / (n - 1))


@dataclass(frozen=True)
class OdmrSpectrum:
    frequencies: np.ndarray
    contrast: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        c = np.asarray(self.contrast, dtype=float)
        if f.shape != c.shape or f.ndim != 1:
            raise DomainError("spectrum arrays must be 1-D and equally long")
        if np.any(np.diff(f) <= 0):
            raise DomainError("spectrum frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "contrast", c)

    def rows(self):
        yield ("frequency_mhz", "contrast_percent")
        for f, c in zip(self.frequencies, self.contrast):
            yield (_fmt(f), _fmt(c))


def _fmt(x) -> str:
    return repr(float(x))


def write_rows(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow(row)


def cw_sweep(model: ModelParams, fld: FieldVector, spec: SweepSpec,
             manifolds: Sequence[str] = MANIFOLDS) -> OdmrSpectrum:
    freqs = spec.frequencies()
    contrast = model.rate_model(fld).contrast(freqs, model.mw, manifolds)
    return OdmrSpectrum(freqs, contrast)


# --- Zeeman fan -----------------------------------------------------------

LINE_SLOPES = {"T_MINUS": -1.0, "T_PLUS": 1.0, "DQT": 2.0, "DOUBLET": 1.0}
LINEAR_REGIME_MT = 30.0


def zero_field_intercepts(zfs: ZfsParams, dqt_convention: str = "gap") -> dict[str, float]:
    """Zero-field transition frequencies used as guide-line anchors.

    ``dqt_convention="gap"`` anchors the DQT at the exact zero-field gap (2E);
    ``"e"`` anchors it at E, the convention of the published guides.
    """
    zero = triplet_transitions(build_triplet_hamiltonian(zfs, FieldVector()))
    if dqt_convention == "gap":
        dqt = zero.frequency(Label.DQT)
    elif dqt_convention == "e":
        dqt = zfs.e_mhz
    else:
        raise DomainError(f"dqt_convention must be 'gap' or 'e', got {dqt_convention!r}")
    return {
        "T_MINUS": zero.frequency(Label.T_MINUS),
        "T_PLUS": zero.frequency(Label.T_PLUS),
        "DQT": dqt,
        "DOUBLET": 0.0,
    }


def fitted_intercepts(zfs: ZfsParams, b_values, b_min: float = LINEAR_REGIME_MT) -> dict[str, float]:
    """Intercepts that best match the exact signed ridges at fixed Zeeman slope.

    Minimax over rows with ``B >= b_min`` (all rows if none qualify): the
    intercept sits midway between the extreme offsets, which minimizes the
    largest deviation of the guide from the ridge.
    """
    b = np.asarray(b_values, dtype=float)
    use = b[b >= b_min] if np.any(b >= b_min) else b
    scale = 0.5 * zfs.g_factor * GAMMA_E
    out = {}
    for label, slope in LINE_SLOPES.items():
        y = np.array([_signed_exact(zfs, bz, label) for bz in use])
        r = y - slope * scale * use
        out[label] = 0.5 * float(r.max() + r.min())
    out["DOUBLET"] = 0.0
    return out


def _signed_exact(zfs, bz, label):
    f, sign = exact_lines(zfs, FieldVector.axial(bz))[label]
    return sign * f


def overlay_lines(zfs: ZfsParams, b_values, intercepts: dict | None = None) -> dict[str, np.ndarray]:
    """Linear Zeeman guide lines ``f0 + slope * (g/2) gamma_e B`` per label.

    Values are signed, so the 0<->-1 guide runs downward through zero.
    Defaults to :func:`fitted_intercepts` for the given field values.
    """
    b = np.asarray(b_values, dtype=float)
    f0 = fitted_intercepts(zfs, b) if intercepts is None else intercepts
    lines = {}
    for label in LINE_SLOPES:
        m_hi, m_lo = {"T_MINUS": (-1, 0), "T_PLUS": (1, 0), "DQT": (1, -1), "DOUBLET": (0.5, -0.5)}[label]
        shift = np.array([zeeman_shift(m_hi, FieldVector.axial(v)) - zeeman_shift(m_lo, FieldVector.axial(v))
                          for v in b])
        lines[label] = f0[label] + 0.5 * zfs.g_factor * shift
    return lines


@dataclass(frozen=True)
class FanMap:
    b_values: np.ndarray
    frequencies: np.ndarray
    contrast: np.ndarray
    lines: dict = field(default_factory=dict)

    def __post_init__(self):
        b = np.asarray(self.b_values, dtype=float)
        f = np.asarray(self.frequencies, dtype=float)
        c = np.asarray(self.contrast, dtype=float)
        if c.shape != (len(b), len(f)):
            raise DomainError(f"fan matrix shape {c.shape} does not match axes ({len(b)}, {len(f)})")
        object.__setattr__(self, "b_values", b)
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "contrast", c)

    def row(self, i: int) -> OdmrSpectrum:
        return OdmrSpectrum(self.frequencies, self.contrast[i])

    def rows(self):
        yield ("b_mt", "frequency_mhz", "contrast_percent")
        for b, row in zip(self.b_values, self.contrast):
            for f, c in zip(self.frequencies, row):
                yield (_fmt(b), _fmt(f), _fmt(c))

    def line_rows(self):
        yield ("b_mt", "label", "frequency_mhz")
        for label in sorted(self.lines):
            for b, f in zip(self.b_values, self.lines[label]):
                yield (_fmt(b), label, _fmt(f))


def fan_scan(model: ModelParams, b_list, spec: SweepSpec,
             manifolds: Sequence[str] = MANIFOLDS) -> FanMap:
    """One CW sweep per field value along +z, plus the linear guide lines."""
    b = np.asarray(b_list, dtype=float)
    if b.ndim != 1 or len(b) == 0:
        raise DomainError("b_list must be a nonempty 1-D sequence")
    if np.any(np.diff(b) <= 0):
        raise DomainError("b_list must be strictly increasing")
    rows = _ordered_map(
        lambda bz: cw_sweep(model, FieldVector.axial(bz), spec, manifolds).contrast, list(b)
    )
    return FanMap(b, spec.frequencies(), np.array(rows), overlay_lines(model.zfs, b))


# --- peaks and ridges -----------------------------------------------------

DEFAULT_NOISE_FLOOR = 1e-9  # percent


@dataclass(frozen=True)
class Peak:
    frequency: float
    height: float  # signed contrast at the sample maximum


def find_peaks(frequencies, contrast, noise_floor: float = DEFAULT_NOISE_FLOOR) -> list[Peak]:
    """Local maxima of ``|contrast|`` above 3x noise, refined by a parabola."""
    f = np.asarray(frequencies, dtype=float)
    y = np.abs(np.asarray(contrast, dtype=float))
    idx, _ = _scipy_find_peaks(y, height=3.0 * noise_floor)
    peaks = []
    for i in idx:
        if 0 < i < len(y) - 1:
            y0, y1, y2 = y[i - 1], y[i], y[i + 1]
            denom = y0 - 2.0 * y1 + y2
            shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
            step = 0.5 * (f[i + 1] - f[i - 1])
            pos = f[i] + shift * step
        else:
            pos = f[i]
        peaks.append(Peak(float(pos), float(np.asarray(contrast)[i])))
    return peaks


def exact_lines(zfs: ZfsParams, fld: FieldVector) -> dict[str, tuple[float, float]]:
    """Exact frequency and sign per label; sign is that of the level difference.

    The signs follow (E_-1 - E_0), (E_+1 - E_0), (E_+1 - E_-1), so a line that
    has folded through zero frequency keeps its Zeeman slope when unfolded.
    """
    eig = TripletEigensystem.from_hamiltonian(build_triplet_hamiltonian(zfs, fld))
    ep, e0, em = eig.energies
    out = {}
    for label, diff in (("T_MINUS", em - e0), ("T_PLUS", ep - e0), ("DQT", ep - em)):
        out[label] = (abs(float(diff)), 1.0 if diff >= 0 else -1.0)
    out["DOUBLET"] = (doublet_frequency(fld, zfs.g_factor), 1.0)
    return out


@dataclass(frozen=True)
class Ridges:
    b_values: np.ndarray
    positions: dict  # label -> observed peak frequency (NaN when absent)
    signed: dict  # label -> position times level-ordering sign


def track_ridges(fan: FanMap, zfs: ZfsParams, fwhm: float,
                 noise_floor: float = DEFAULT_NOISE_FLOOR) -> Ridges:
    """Follow each transition's peak across the rows of a fan map.

    A label is matched to the nearest detected peak within one FWHM of its
    exact position.  Rows where two labels sit within one FWHM of each other
    are left unresolved (NaN) for both.
    """
    labels = ("T_MINUS", "T_PLUS", "DQT", "DOUBLET")
    pos = {k: np.full(len(fan.b_values), np.nan) for k in labels}
    signed = {k: np.full(len(fan.b_values), np.nan) for k in labels}
    for r, b in enumerate(fan.b_values):
        expected = exact_lines(zfs, FieldVector.axial(b))
        peaks = np.array([p.frequency for p in find_peaks(fan.frequencies, fan.contrast[r], noise_floor)])
        for k in labels:
            f_exp, sign = expected[k]
            crowded = any(abs(f_exp - expected[o][0]) < fwhm for o in labels if o != k)
            if crowded or len(peaks) == 0:
                continue
            j = int(np.argmin(np.abs(peaks - f_exp)))
            if abs(peaks[j] - f_exp) <= fwhm:
                pos[k][r] = peaks[j]
                signed[k][r] = sign * peaks[j]
    return Ridges(fan.b_values, pos, signed)


def ridge_slopes(ridges: Ridges, b_min: float = LINEAR_REGIME_MT) -> dict[str, float]:
    """Least-squares slope (MHz/mT) of each signed ridge for ``|B| >= b_min``."""
    out = {}
    for label, y in ridges.signed.items():
        ok = (ridges.b_values >= b_min) & np.isfinite(y)
        if ok.sum() < 2:
            out[label] = math.nan
            continue
        out[label] = float(np.polyfit(ridges.b_values[ok], y[ok], 1)[0])
    return out


# --- angle dependence -----------------------------------------------------

@dataclass(frozen=True)
class AngleScan:
    angles_deg: np.ndarray
    magnitude_correction: np.ndarray
    transition_frequencies: tuple[TransitionSet, ...]
    doublet: np.ndarray

    def frequency(self, label) -> np.ndarray:
        label = Label(label)
        if label is Label.DOUBLET:
            return self.doublet.copy()
        return np.array([t.frequency(label) for t in self.transition_frequencies])

    def rows(self):
        yield ("angle_deg", "label", "frequency_mhz")
        for i, a in enumerate(self.angles_deg):
            for t in self.transition_frequencies[i].entries:
                yield (_fmt(a), t.label.value, _fmt(t.frequency))
            yield (_fmt(a), Label.DOUBLET.value, _fmt(self.doublet[i]))


def angle_scan(zfs: ZfsParams, b_mag: float, angles_deg, corrections=None,
               labeling: str = "character") -> AngleScan:
    """Field ``c * |B| (sin t, 0, cos t)`` per angle; exact transition frequencies.

    With the default labeling the 0<->+1 name can jump to another line past
    about 45 deg, where the |0>-like state becomes the lowest level; use
    ``labeling="branch"`` for continuous curves.
    """
    angles = np.asarray(angles_deg, dtype=float)
    corr = np.ones_like(angles) if corrections is None else np.asarray(corrections, dtype=float)
    if corr.shape != angles.shape:
        raise DomainError("corrections must align with angles")
    if np.any(corr <= 0):
        raise DomainError("magnitude corrections must be positive")
    sets, dbl = [], []
    for a, c in zip(angles, corr):
        fld = FieldVector.from_angle(c * b_mag, a)
        sets.append(triplet_transitions(build_triplet_hamiltonian(zfs, fld), labeling=labeling))
        dbl.append(doublet_frequency(fld, zfs.g_factor))
    return AngleScan(angles, corr, tuple(sets), np.array(dbl))


# --- pulsed transients ----------------------------------------------------

@dataclass(frozen=True)
class Segment:
    laser_on: bool
    mw_on: bool
    duration: float

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise DomainError(f"segment duration must be positive and finite, got {self.duration}")


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in self.segments)
        if not segs:
            raise DomainError("pulse sequence is empty")
        object.__setattr__(self, "segments", segs)

    def __add__(self, other: "PulseSequence") -> "PulseSequence":
        return PulseSequence(self.segments + other.segments)

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.segments)


@dataclass(frozen=True)
class PulseTrace:
    times: np.ndarray
    pl: np.ndarray
    populations: np.ndarray  # (len(times), 9)

    def rows(self):
        yield ("time_us", "pl_per_us")
        for t, p in zip(self.times, self.pl):
            yield (_fmt(t), _fmt(p))


def ground_state() -> np.ndarray:
    p = np.zeros(N_LEVELS)
    p[GS] = 1.0
    return p


def pulsed_transient(model: ModelParams, seq: PulseSequence, resolution: float,
                     fld: FieldVector, p0=None) -> PulseTrace:
    """Piecewise evolution with laser and MW toggled per segment.

    Starts from ``p0`` (default: all population in GS).  Samples every
    ``resolution`` us inside each segment and at every segment boundary.
    """
    if not (math.isfinite(resolution) and resolution > 0):
        raise DomainError(f"resolution must be positive, got {resolution}")
    p = ground_state() if p0 is None else np.asarray(p0, dtype=float)
    dark = replace(model.rates, k_pump=0.0)
    models = {}
    times, states = [0.0], [p.copy()]
    t = 0.0
    for seg in seq.segments:
        key = (seg.laser_on, seg.mw_on)
        if key not in models:
            rm = model.rate_model(fld, model.rates if seg.laser_on else dark)
            gen = rm.generator(model.mw if seg.mw_on else None)
            models[key] = (gen, propagator(gen, resolution))
        gen, step = models[key]
        n_full = int(math.floor(seg.duration / resolution + 1e-9))
        rest = seg.duration - n_full * resolution
        for _ in range(n_full):
            p = step @ p
            t += resolution
            times.append(t)
            states.append(p.copy())
        if rest > 1e-12 * resolution:
            p = propagator(gen, rest) @ p
            t += rest
            times.append(t)
            states.append(p.copy())
    pops = np.clip(np.array(states), 0.0, None)
    return PulseTrace(np.array(times), model.rates.k_rad * pops[:, ES], pops)


def laser_steady_state(model: ModelParams, fld: FieldVector) -> np.ndarray:
    return steady_state(model.rate_model(fld).generator())
