"""Recover (D, E, g, tilt, field scale) from measured resonance frequencies.

The forward model is exact diagonalization of the triplet Hamiltonian; the
objective is the weighted mean squared residual, minimized by bounded
Nelder-Mead from a fixed grid of starting points.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, IngestError, UnderdeterminedError
from .experiments import LINE_SLOPES, zero_field_intercepts
from .spin import (
    GAMMA_E,
    LABELINGS,
    FieldVector,
    Label,
    ZfsParams,
    triplet_frequencies,
    triplet_frequencies_xz,
)

DEFAULT_SIGMA = 10.0
D_MAX = 3000.0
D_UNIT = 1000.0
SEED_D = (375.0, 1125.0, 1875.0, 2625.0)
SEED_R = (0.25, 0.75)
TILT_RANGE = 90.0
SCALE_BOUNDS = (0.5, 1.5)
G_BOUNDS = (1.0, 3.0)
OBJECTIVE_FLOOR = 1e-16  # MHz^2; residuals at rounding level

_COLUMN = {Label.T_MINUS: 0, Label.T_PLUS: 1, Label.DQT: 2}


@dataclass(frozen=True)
class ResonanceObservation:
    field: FieldVector
    label: Label
    frequency: float
    sigma: float = DEFAULT_SIGMA
    angle_deg: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise DomainError(f"observation frequency must be > 0, got {self.frequency}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError(f"observation sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class FitParams:
    d_mhz: float
    e_mhz: float = 0.0
    g_factor: float = 2.0
    tilt_deg: float = 0.0
    field_scale: float | dict = 1.0

    def scale_for(self, angle_deg) -> float:
        if isinstance(self.field_scale, dict):
            return self.field_scale.get(angle_deg, 1.0)
        return float(self.field_scale)


@dataclass(frozen=True)
class FitResult:
    d_mhz: float
    e_mhz: float
    g_factor: float
    tilt_deg: float
    field_scale: float | dict
    residual_rms: float
    converged: bool
    n_restarts_used: int
    objective: float = 0.0
    unidentifiable: tuple[str, ...] = ()
    seeds: tuple = ()

    def params(self) -> FitParams:
        return FitParams(self.d_mhz, self.e_mhz, self.g_factor, self.tilt_deg, self.field_scale)

    def zfs(self) -> ZfsParams:
        return ZfsParams(self.d_mhz, self.e_mhz, self.g_factor)


@dataclass(frozen=True)
class FitOptions:
    xatol: float = 1e-6
    loose_xatol: float = 1e-2
    loose_maxfev: int = 20
    finalists: int = 4  # seeds given a second loose round
    finalist_maxfev: int = 40
    polish_step: float = 0.05  # polish simplex size relative to the seed simplex
    restart_step: float = 1e-4
    max_polish: int = 8
    maxfev: int = 20000
    fit_g: bool = True
    g_fixed: float = 2.0
    scale_mode: str = "none"  # none | single | per-angle
    labeling: str = "character"  # character | branch, see triplet_transitions

    def __post_init__(self):
        if self.scale_mode not in ("none", "single", "per-angle"):
            raise DomainError(f"scale_mode must be none, single or per-angle, got {self.scale_mode!r}")
        if self.labeling not in LABELINGS:
            raise DomainError(f"labeling must be one of {LABELINGS}, got {self.labeling!r}")


# --- forward model --------------------------------------------------------

def tilt_field(fields: np.ndarray, tilt_deg: float) -> np.ndarray:
    """Express lab-frame fields in a defect frame tilted by ``tilt_deg`` about y."""
    t = math.radians(tilt_deg)
    c, s = math.cos(t), math.sin(t)
    b = np.array(fields, dtype=float, copy=True)
    bx, bz = b[..., 0].copy(), b[..., 2].copy()
    b[..., 0] = c * bx - s * bz
    b[..., 2] = s * bx + c * bz
    return b


def _predict_arrays(d, e, g, fields, columns, doublet_mask, labeling="character"):
    """Exact frequencies for stacked fields; ``columns`` picks the label per row."""
    out = np.empty(len(fields))
    trip = ~doublet_mask
    if trip.any():
        f = triplet_frequencies(d, e, g, fields[trip], labeling)
        out[trip] = f[np.arange(f.shape[0]), columns[trip]]
    if doublet_mask.any():
        out[doublet_mask] = 0.5 * g * GAMMA_E * np.linalg.norm(fields[doublet_mask], axis=1)
    return out


def predict(params: FitParams, obs: ResonanceObservation, mode: str = "exact",
            intercepts: dict | None = None, dqt_convention: str = "gap",
            labeling: str = "character") -> float:
    """Forward model for one observation.

    ``mode="exact"`` diagonalizes; ``mode="linear"`` evaluates the linear Zeeman
    line ``f0 + slope (g/2) gamma_e |B|`` with ``f0`` from ``intercepts`` or
    the zero-field transitions.
    """
    label = Label(obs.label)
    b = tilt_field(obs.field.as_array() * params.scale_for(obs.angle_deg), params.tilt_deg)
    if mode == "linear":
        if intercepts is None:
            zfs = ZfsParams.conventional(params.d_mhz, params.e_mhz, params.g_factor)
            intercepts = zero_field_intercepts(zfs, dqt_convention)
        mag = float(np.linalg.norm(b))
        return float(intercepts[label.value] + LINE_SLOPES[label.value] * 0.5 * params.g_factor * GAMMA_E * mag)
    if mode != "exact":
        raise DomainError(f"mode must be 'exact' or 'linear', got {mode!r}")
    is_doublet = np.array([label is Label.DOUBLET])
    col = np.array([_COLUMN.get(label, 0)])
    return float(_predict_arrays(params.d_mhz, params.e_mhz, params.g_factor, b[None, :], col, is_doublet,
                                 labeling)[0])


# --- objective plumbing ---------------------------------------------------

class _Problem:
    """Packed observation arrays and the map from search vector to parameters."""

    def __init__(self, observations: Sequence[ResonanceObservation], options: FitOptions,
                 fit_tilt: bool):
        self.obs = list(observations)
        self.fields = np.array([o.field.as_array() for o in self.obs])
        self.freq = np.array([o.frequency for o in self.obs])
        w = 1.0 / np.array([o.sigma for o in self.obs]) ** 2
        self.weights = w / w.sum()
        self.doublet = np.array([o.label is Label.DOUBLET for o in self.obs])
        self.columns = np.array([_COLUMN.get(o.label, 0) for o in self.obs])
        self.triplet = ~self.doublet
        # integer indices are cheaper than masks inside the objective
        self.doublet_idx = np.flatnonzero(self.doublet)
        self.triplet_idx = np.flatnonzero(self.triplet)
        self.n_doublet = int(self.doublet.sum())
        self.n_triplet = len(self.obs) - self.n_doublet
        self.trip_rows = np.arange(self.n_triplet)
        self.trip_cols = self.columns[self.triplet]
        self.doublet_mag = np.linalg.norm(self.fields[self.doublet], axis=1)
        self.planar = not self.fields[:, 1].any()
        self.trip_bx = self.fields[self.triplet, 0]
        self.trip_bz = self.fields[self.triplet, 2]
        self.options = options
        self.fit_tilt = fit_tilt
        self.angles = sorted({o.angle_deg for o in self.obs if o.angle_deg is not None})
        mode = options.scale_mode
        self.n_scales = {"none": 0, "single": 1, "per-angle": len(self.angles)}[mode]
        self.fit_g = options.fit_g and mode == "none"
        if mode == "per-angle":
            index = {a: i for i, a in enumerate(self.angles)}
            self.scale_index = np.array([index.get(o.angle_deg, -1) for o in self.obs])
        else:
            self.scale_index = np.zeros(len(self.obs), dtype=int)
        self.doublet_scale = self.scale_index[self.doublet_idx]
        self.triplet_scale = self.scale_index[self.triplet_idx]

    # vector layout: d/1000, r=E/(D/3), [g], [tilt/90], [scales...]
    def bounds(self):
        b = [(0.0, D_MAX / D_UNIT), (0.0, 1.0)]
        if self.fit_g:
            b.append(G_BOUNDS)
        if self.fit_tilt:
            b.append((-1.0, 1.0))
        b.extend([SCALE_BOUNDS] * self.n_scales)
        return b

    def unpack(self, x):
        d = x[0] * D_UNIT
        e = x[1] * d / 3.0
        i = 2
        g = self.options.g_fixed
        if self.fit_g:
            g = x[i]
            i += 1
        tilt = 0.0
        if self.fit_tilt:
            tilt = x[i] * TILT_RANGE
            i += 1
        scales = np.asarray(x[i:i + self.n_scales], dtype=float)
        return d, e, g, tilt, scales

    def residuals(self, x):
        d, e, g, tilt, scales = self.unpack(x)
        k = 0.5 * g * GAMMA_E
        per_angle = self.options.scale_mode == "per-angle"

        def zeeman(idx):
            if not self.n_scales:
                return k
            s = scales[idx]
            if per_angle:
                s = np.where(idx >= 0, s, 1.0)
            return k * s

        out = np.empty(len(self.obs))
        if self.n_doublet:
            out[self.doublet_idx] = zeeman(self.doublet_scale) * self.doublet_mag
        if self.n_triplet:
            kt = np.broadcast_to(zeeman(self.triplet_scale), (self.n_triplet,))
            if self.planar:
                c, sn = math.cos(math.radians(tilt)), math.sin(math.radians(tilt))
                bx, bz = self.trip_bx, self.trip_bz
                f = triplet_frequencies_xz(d, e, kt * (c * bx - sn * bz), kt * (sn * bx + c * bz),
                                           self.options.labeling)
            else:
                b = tilt_field(self.fields[self.triplet_idx] * (kt / k)[:, None], tilt)
                f = triplet_frequencies(d, e, g, b, self.options.labeling)
            out[self.triplet_idx] = f[self.trip_rows, self.trip_cols]
        return out - self.freq

    def objective(self, x):
        r = self.residuals(x)
        return float(self.weights @ (r * r))

    def steps(self):
        """Initial simplex edge per coordinate, in search units."""
        st = [0.1, 0.1]
        if self.fit_g:
            st.append(0.05)
        if self.fit_tilt:
            st.append(10.0 / TILT_RANGE)
        st.extend([0.02] * self.n_scales)
        return np.array(st)

    def simplex(self, x0, scale=1.0):
        lo, hi = np.array(self.bounds()).T
        step = self.steps() * scale
        sim = np.tile(x0, (len(x0) + 1, 1))
        for i in range(len(x0)):
            up = x0[i] + step[i]
            sim[i + 1, i] = up if up <= hi[i] else x0[i] - step[i]
        return sim

    def seed_vectors(self, scale0):
        seeds = []
        for d in SEED_D:
            for r in SEED_R:
                x = [d / D_UNIT, r]
                if self.fit_g:
                    x.append(self.options.g_fixed)
                if self.fit_tilt:
                    x.append(0.0)
                x.extend(scale0)
                seeds.append(np.array(x, dtype=float))
        return seeds


def _run(problem: _Problem, seeds, options: FitOptions):
    bounds = problem.bounds()

    def loose(x0, maxfev):
        return minimize(problem.objective, x0, method="Nelder-Mead", bounds=bounds,
                        options={"xatol": options.loose_xatol, "fatol": np.inf, "maxfev": maxfev,
                                 "initial_simplex": problem.simplex(x0)})

    first = [loose(x0, options.loose_maxfev) for x0 in seeds]
    # a basin's depth is not settled after a few steps, so the leading seeds
    # get another round before one is chosen; stable sort keeps seed order on ties
    order = sorted(range(len(seeds)), key=lambda k: first[k].fun)[:max(1, options.finalists)]
    best = None
    for k in order:
        res = loose(first[k].x, options.finalist_maxfev)
        if res.fun > first[k].fun:
            res = first[k]
        # strict '<' keeps the earlier finalist on ties
        if best is None or res.fun < best[1].fun:
            best = (k, res)
    k, res = best
    # restarting from the polished point re-inflates a simplex that collapsed
    # in a narrow valley; stop once a restart no longer improves the objective
    step = options.polish_step
    for _ in range(options.max_polish):
        prev = res.fun
        polish = minimize(problem.objective, res.x, method="Nelder-Mead", bounds=bounds,
                          options={"xatol": options.xatol, "fatol": np.inf, "maxfev": options.maxfev,
                                   "adaptive": len(res.x) > 4,
                                   "initial_simplex": problem.simplex(res.x, step)})
        step = options.restart_step
        if polish.fun <= res.fun:
            res = polish
        if not polish.fun < prev * (1 - 1e-6) or res.fun < OBJECTIVE_FLOOR:
            break
    return k, res


def _result(problem: _Problem, res, seeds, unidentifiable=()):
    d, e, g, tilt, scales = problem.unpack(res.x)
    r = problem.residuals(res.x)
    if problem.options.scale_mode == "per-angle":
        scale = {a: float(s) for a, s in zip(problem.angles, scales)}
    elif problem.options.scale_mode == "single":
        scale = float(scales[0])
    else:
        scale = 1.0
    return FitResult(
        d_mhz=float(d),
        e_mhz=float(min(e, abs(d) / 3.0)),
        g_factor=float(g),
        tilt_deg=float(abs(tilt)),
        field_scale=scale,
        residual_rms=float(np.sqrt(np.mean(r * r))),
        converged=bool(res.success),
        n_restarts_used=len(seeds),
        objective=float(res.fun),
        unidentifiable=tuple(unidentifiable),
        seeds=tuple(tuple(float(v) for v in s) for s in seeds),
    )


# --- public fitters -------------------------------------------------------

def _field_key(f: FieldVector):
    return (round(f.bx, 9), round(f.by, 9), round(f.bz, 9))


def fit_zfs(observations: Sequence[ResonanceObservation], options: FitOptions | None = None) -> FitResult:
    """Fit (D, E, g) to labeled resonance frequencies at known fields."""
    options = options or FitOptions()
    obs = list(observations)
    n_free = 3 if options.fit_g else 2
    if len(obs) < n_free:
        raise UnderdeterminedError(f"{len(obs)} observations for {n_free} free parameters")
    triplet = [o for o in obs if o.label is not Label.DOUBLET]
    if not triplet:
        raise UnderdeterminedError("no triplet observations; missing labels T_MINUS, T_PLUS, DQT")
    fields = {_field_key(o.field) for o in triplet}
    if len(fields) < 2:
        present = sorted({o.label.value for o in triplet})
        raise UnderdeterminedError(
            f"triplet observations at only {len(fields)} distinct field; need >= 2 "
            f"(labels present: {', '.join(present)})"
        )
    problem = _Problem(obs, FitOptions(**{**options.__dict__, "scale_mode": "none"}), fit_tilt=False)
    seeds = problem.seed_vectors([])
    _, res = _run(problem, seeds, options)
    return _result(problem, res, seeds)


NEAR_AXIS_DEG = 20.0


def fit_angle_series(observations: Sequence[ResonanceObservation],
                     options: FitOptions | None = None) -> FitResult:
    """Joint fit of (D, E, g or field scale, tilt) to a rotated-field scan.

    g and the field scale enter only as their product, so g is held at
    ``options.g_fixed`` whenever scales are fitted.  The default options
    label lines by branch, matching ridges traced continuously through the
    rotation; character labels make the objective piecewise in the tilt.
    """
    options = options or FitOptions(scale_mode="single", labeling="branch")
    obs = list(observations)
    if any(o.angle_deg is None for o in obs):
        raise UnderdeterminedError("angle series observations need angle_deg")
    angles = sorted({o.angle_deg for o in obs})
    if options.scale_mode == "per-angle" and len(angles) < 2:
        raise UnderdeterminedError("per-angle field scales need observations at more than one angle")
    triplet = [o for o in obs if o.label is not Label.DOUBLET]
    if not triplet:
        # isotropic data: only the field scale (or g) is constrained
        problem = _Problem(obs, options, fit_tilt=False)
        scale0 = _initial_scales(obs, problem, options)
        x0 = np.array([1.0, 0.0] + ([options.g_fixed] if problem.fit_g else []) + scale0)
        bounds = problem.bounds()
        res = minimize(problem.objective, x0, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": options.xatol, "fatol": np.inf, "maxfev": options.maxfev})
        return _result(problem, res, [x0], unidentifiable=("d_mhz", "e_mhz", "tilt_deg"))
    if len(angles) < 3:
        raise UnderdeterminedError(f"angle series has {len(angles)} distinct angles; need >= 3")
    if min(abs(a) for a in angles) > NEAR_AXIS_DEG or max(abs(a) for a in angles) < 90 - NEAR_AXIS_DEG:
        raise UnderdeterminedError(
            f"angle series must include angles within {NEAR_AXIS_DEG:g} deg of 0 and of 90"
        )
    problem = _Problem(obs, options, fit_tilt=True)
    seeds = problem.seed_vectors(_initial_scales(obs, problem, options))
    _, res = _run(problem, seeds, options)
    return _result(problem, res, seeds)


def _initial_scales(obs, problem: _Problem, options: FitOptions) -> list[float]:
    """Field scales implied by the doublet lines (1 where no doublet is seen)."""
    if problem.n_scales == 0:
        return []

    def ratio(group):
        r = [o.frequency / (0.5 * options.g_fixed * GAMMA_E * o.field.magnitude())
             for o in group if o.label is Label.DOUBLET and o.field.magnitude() > 0]
        if not r:
            return 1.0
        return float(np.clip(np.mean(r), *SCALE_BOUNDS))

    if options.scale_mode == "single":
        return [ratio(obs)]
    return [ratio([o for o in obs if o.angle_deg == a]) for a in problem.angles]


# --- synthetic data and CSV I/O ------------------------------------------

def synthesize(params: FitParams, fields: Sequence[FieldVector], labels=None,
               angles: Sequence[float] | None = None, sigma: float = DEFAULT_SIGMA,
               noise: float = 0.0, rng: np.random.Generator | None = None, labeling: str = "character"):
    """Observations generated by the exact forward model, optionally noisy."""
    labels = [Label(x) for x in (labels or list(Label))]
    out = []
    for i, f in enumerate(fields):
        a = None if angles is None else float(angles[i])
        for label in labels:
            o = ResonanceObservation(f, label, 1.0, sigma, a)
            freq = predict(params, o, labeling=labeling)
            if noise:
                freq += noise * rng.standard_normal()
            if freq > 0:
                out.append(ResonanceObservation(f, label, freq, sigma, a))
    return out


OBS_HEADER = ("b_mt_x", "b_mt_y", "b_mt_z", "angle_deg", "label", "frequency_mhz", "sigma_mhz")


def write_observations(path, observations) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for o in observations:
            w.writerow([repr(o.field.bx), repr(o.field.by), repr(o.field.bz),
                        "" if o.angle_deg is None else repr(o.angle_deg),
                        o.label.value, repr(o.frequency), repr(o.sigma)])


def read_observations(path) -> list[ResonanceObservation]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in OBS_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"{path}: missing columns {', '.join(missing)}")
        for n, row in enumerate(reader, start=2):
            try:
                angle = row["angle_deg"].strip()
                sigma = row["sigma_mhz"].strip()
                out.append(ResonanceObservation(
                    FieldVector(float(row["b_mt_x"]), float(row["b_mt_y"]), float(row["b_mt_z"])),
                    Label(row["label"].strip()),
                    float(row["frequency_mhz"]),
                    float(sigma) if sigma else DEFAULT_SIGMA,
                    float(angle) if angle else None,
                ))
            except (ValueError, KeyError) as exc:
                raise IngestError(f"{path} line {n}: {exc}") from None
    if not out:
        raise IngestError(f"{path}: no observations")
    return out
