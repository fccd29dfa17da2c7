"""Classical rate-equation model of the spin complex.

Nine levels: ground (GS) and excited (ES) states of the optically active
defect, the three sublevels of the local metastable triplet (LMS), and the
four eigenstates of the remote metastable spin pair (RMS).

Generator convention: ``M[i, j] >= 0`` (i != j) is the rate j -> i in
inverse microseconds and ``M[j, j] = -sum_i M[i, j]``, so ``dp/dt = M p``.

Pathways encoded by the generator:

* GS -> ES optical pumping, ES -> GS radiative decay;
* ES -> LMS intersystem crossing, spin selective in ``m_s``;
* LMS -> RMS charge transfer conserving spin projection (``m_s = +-1`` feeds
  T+-, ``m_s = 0`` feeds T0 and S), plus a weak spin-independent LMS -> GS
  leak;
* RMS -> GS recombination, ``k_rec_s * s + k_rec_t * (1 - s)`` for singlet
  fraction ``s``;
* field-dependent incoherent mixing among RMS sublevels, fast when levels
  are closer than ``mix_fwhm_mhz`` (this is what erases the spin memory of
  the pair at low field);
* optional microwave mixing with a Lorentzian line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, ModelError
from .spin import (
    PAIR_SX_TOTAL,
    FieldVector,
    PairModel,
    SX,
    SX2,
    ZfsParams,
    TripletEigensystem,
    build_pair_hamiltonian,
    build_triplet_hamiltonian,
    pair_eigenstates,
)

LEVELS = ("GS", "ES", "LMS(+1)", "LMS(0)", "LMS(-1)", "RMS1", "RMS2", "RMS3", "RMS4")
GS, ES = 0, 1
LMS = (2, 3, 4)
RMS = (5, 6, 7, 8)
N_LEVELS = len(LEVELS)

MANIFOLDS = ("lms", "rms")


def lorentzian(detuning, fwhm):
    """Unit-height Lorentzian."""
    hw = 0.5 * fwhm
    return hw * hw / (np.square(detuning) + hw * hw)


@dataclass(frozen=True)
class RateParams:
    """Kinetic rates in inverse microseconds.

    None of these are measured values; they are chosen to give percent-level
    contrast and a visible photon-bunching shoulder.  ``k_isc`` and
    ``ct_weights`` are ordered (+1, 0, -1).
    """

    k_pump: float = 10.0
    k_rad: float = 100.0
    k_isc: tuple[float, float, float] = (2.0, 8.0, 2.0)
    k_ct: float = 5.0
    k_rec_s: float = 20.0
    k_rec_t: float = 0.5
    k_lms_gs: float = 0.2
    ct_weights: tuple[float, float, float] = (1.0, 1.0, 0.5)
    k_mix: float = 50.0
    mix_fwhm_mhz: float = 200.0

    def __post_init__(self):
        object.__setattr__(self, "k_isc", tuple(float(k) for k in self.k_isc))
        object.__setattr__(self, "ct_weights", tuple(float(k) for k in self.ct_weights))
        if len(self.k_isc) != 3 or len(self.ct_weights) != 3:
            raise DomainError("k_isc and ct_weights need three entries (+1, 0, -1)")
        scalars = ("k_pump", "k_rad", "k_ct", "k_rec_s", "k_rec_t", "k_lms_gs", "k_mix")
        for name in scalars:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DomainError(f"rate {name}={value!r} must be finite and >= 0")
        for name in ("k_isc", "ct_weights"):
            if any(not math.isfinite(v) or v < 0 for v in getattr(self, name)):
                raise DomainError(f"{name}={getattr(self, name)!r} must be finite and >= 0")
        if not self.mix_fwhm_mhz > 0:
            raise DomainError(f"mix_fwhm_mhz must be positive, got {self.mix_fwhm_mhz}")
        if not self.k_rec_s > self.k_rec_t:
            raise DomainError(
                f"singlet recombination k_rec_s={self.k_rec_s} must exceed "
                f"triplet recombination k_rec_t={self.k_rec_t}"
            )


@dataclass(frozen=True)
class AmplifierTable:
    """Drive-amplitude multiplier vs frequency, linearly interpolated."""

    frequencies: tuple[float, ...]
    multipliers: tuple[float, ...]

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        m = np.asarray(self.multipliers, dtype=float)
        if f.ndim != 1 or f.shape != m.shape or len(f) < 1:
            raise DomainError("amplifier table needs matching, nonempty columns")
        if np.any(np.diff(f) <= 0):
            raise DomainError("amplifier table frequencies must be strictly increasing")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise DomainError("amplifier multipliers must be finite and >= 0")

    def __call__(self, frequency):
        return np.interp(frequency, self.frequencies, self.multipliers)

    @classmethod
    def from_csv(cls, path) -> "AmplifierTable":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(tuple(data[:, 0]), tuple(data[:, 1]))


@dataclass(frozen=True)
class MwDrive:
    """Incoherent microwave drive.

    ``drive_rate`` is the mixing rate on resonance for unit matrix element;
    ``dqt_weight`` scales the two-quantum ``|<i|Sx^2|j>|^2`` contribution.
    """

    frequency: float = 0.0
    drive_rate: float = 5.0
    linewidth_fwhm: float = 30.0
    dqt_weight: float = 1.0
    amplifier: AmplifierTable | None = None

    def __post_init__(self):
        if not math.isfinite(self.frequency):
            raise DomainError("MW frequency must be finite")
        if not (math.isfinite(self.drive_rate) and self.drive_rate >= 0):
            raise DomainError(f"drive_rate must be >= 0, got {self.drive_rate}")
        if not (math.isfinite(self.linewidth_fwhm) and self.linewidth_fwhm > 0):
            raise DomainError(f"linewidth_fwhm must be > 0, got {self.linewidth_fwhm}")
        if not self.dqt_weight >= 0:
            raise DomainError("dqt_weight must be >= 0")

    def at(self, frequency: float) -> "MwDrive":
        return replace(self, frequency=float(frequency))

    def gain(self, frequency):
        if self.amplifier is None:
            return np.ones_like(np.asarray(frequency, dtype=float))
        return self.amplifier(frequency)


@dataclass(frozen=True)
class LevelScheme:
    levels: tuple[str, ...]
    lms_energies: tuple[float, ...]
    rms_energies: tuple[float, ...]
    rms_singlet_fractions: tuple[float, ...]


@dataclass(frozen=True)
class GeneratorMatrix:
    matrix: np.ndarray
    scheme: LevelScheme | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ModelError(f"generator must be square, got {m.shape}")
        off = m - np.diag(np.diag(m))
        if np.any(off < 0):
            i, j = np.argwhere(off < 0)[0]
            raise ModelError(f"negative rate {m[i, j]:.3g} for transition {j} -> {i}")
        scale = max(1.0, float(np.max(np.abs(m))))
        if np.max(np.abs(m.sum(axis=0))) > 1e-9 * scale:
            raise ModelError("generator columns do not sum to zero")
        object.__setattr__(self, "matrix", m)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class _LineSet:
    """Resonant transitions available to the MW drive at one field point."""

    frequencies: np.ndarray
    weights: np.ndarray
    sources: np.ndarray
    targets: np.ndarray
    manifolds: tuple[str, ...]


class RateModel:
    """Level scheme and rates at one field point.

    Building the eigenstates once and reusing them across MW frequencies is
    what keeps frequency sweeps cheap.
    """

    def __init__(self, zfs: ZfsParams, pair: PairModel, rates: RateParams,
                 field: FieldVector, dqt_weight: float = 1.0):
        self.zfs = zfs
        self.pair = pair
        self.rates = rates
        self.field = field
        self.triplet = TripletEigensystem.from_hamiltonian(build_triplet_hamiltonian(zfs, field))
        self.pair_states = pair_eigenstates(build_pair_hamiltonian(pair, field))
        self.base = self._base_matrix()
        self.lines = self._lines(dqt_weight)
        self.scheme = LevelScheme(
            LEVELS,
            tuple(float(e) for e in self.triplet.energies),
            tuple(s.energy_mhz for s in self.pair_states),
            tuple(s.singlet_fraction for s in self.pair_states),
        )

    def _base_matrix(self) -> np.ndarray:
        r = self.rates
        m = np.zeros((N_LEVELS, N_LEVELS))
        m[ES, GS] += r.k_pump
        m[GS, ES] += r.k_rad

        w = self.triplet.populations()  # rows m_s (+1, 0, -1), cols eigenstates
        vecs = np.array([s.vector for s in self.pair_states]).T  # ST basis x states
        ov = np.abs(vecs) ** 2  # rows T+, T0, T-, S
        # per-m_s destination weights over RMS states, each summing to 1
        dest = np.array([ov[0], 0.5 * (ov[1] + ov[3]), ov[2]])
        isc = np.asarray(r.k_isc)
        ctw = np.asarray(r.ct_weights)
        for i, lvl in enumerate(LMS):
            m[lvl, ES] += float(isc @ w[:, i])
            m[GS, lvl] += r.k_lms_gs
            flow = r.k_ct * (ctw * w[:, i]) @ dest
            for j, rl in enumerate(RMS):
                m[rl, lvl] += flow[j]

        for j, s in enumerate(self.pair_states):
            f = s.singlet_fraction
            m[GS, RMS[j]] += r.k_rec_s * f + r.k_rec_t * (1.0 - f)

        if r.k_mix > 0:
            e = np.array([s.energy_mhz for s in self.pair_states])
            for a in range(4):
                for b in range(4):
                    if a != b:
                        m[RMS[a], RMS[b]] += r.k_mix * lorentzian(e[a] - e[b], r.mix_fwhm_mhz)
        return _close_columns(m)

    def _lines(self, dqt_weight) -> _LineSet:
        freqs, weights, src, dst, man = [], [], [], [], []
        ev = self.triplet.vectors
        vh = ev.conj().T
        w1 = np.abs(vh @ SX @ ev) ** 2 + dqt_weight * np.abs(vh @ SX2 @ ev) ** 2
        for a in range(3):
            for b in range(a + 1, 3):
                freqs.append(abs(self.triplet.energies[a] - self.triplet.energies[b]))
                weights.append(w1[a, b])
                src.append(LMS[a])
                dst.append(LMS[b])
                man.append("lms")
        pv = np.array([s.vector for s in self.pair_states]).T
        w2 = np.abs(pv.conj().T @ PAIR_SX_TOTAL @ pv) ** 2
        for a in range(4):
            for b in range(a + 1, 4):
                freqs.append(abs(self.pair_states[a].energy_mhz - self.pair_states[b].energy_mhz))
                weights.append(w2[a, b])
                src.append(RMS[a])
                dst.append(RMS[b])
                man.append("rms")
        return _LineSet(np.array(freqs), np.array(weights), np.array(src), np.array(dst), tuple(man))

    def generators(self, frequencies, mw: MwDrive, manifolds: Sequence[str] = MANIFOLDS) -> np.ndarray:
        """Stacked generators ``(n, 9, 9)`` with the drive tuned to each frequency."""
        f = np.atleast_1d(np.asarray(frequencies, dtype=float))
        for name in manifolds:
            if name not in MANIFOLDS:
                raise DomainError(f"unknown manifold {name!r}; expected one of {MANIFOLDS}")
        out = np.broadcast_to(self.base, (len(f), N_LEVELS, N_LEVELS)).copy()
        gain = mw.drive_rate * mw.gain(f)
        lines = self.lines
        for k in range(len(lines.frequencies)):
            if lines.manifolds[k] not in manifolds or lines.weights[k] == 0:
                continue
            rate = gain * lorentzian(f - lines.frequencies[k], mw.linewidth_fwhm) * lines.weights[k]
            a, b = lines.sources[k], lines.targets[k]
            out[:, a, b] += rate
            out[:, b, a] += rate
            out[:, a, a] -= rate
            out[:, b, b] -= rate
        return out

    def generator(self, mw: MwDrive | None = None, manifolds: Sequence[str] = MANIFOLDS) -> GeneratorMatrix:
        if mw is None:
            return GeneratorMatrix(self.base.copy(), self.scheme)
        return GeneratorMatrix(self.generators([mw.frequency], mw, manifolds)[0], self.scheme)

    def steady_state_off(self) -> np.ndarray:
        return steady_state(GeneratorMatrix(self.base, self.scheme))

    def contrast(self, frequencies, mw: MwDrive, manifolds: Sequence[str] = MANIFOLDS) -> np.ndarray:
        """CW contrast in percent at each MW frequency."""
        p_off = self.steady_state_off()
        pl_off = pl_rate(p_off, self.rates)
        if pl_off <= 0:
            raise ModelError("model is dark with MW off (PL reference is zero)")
        p_on = _solve_stationary(self.generators(frequencies, mw, manifolds))
        pl_on = self.rates.k_rad * p_on[:, ES]
        return (pl_on - pl_off) / pl_off * 100.0


def _close_columns(m: np.ndarray) -> np.ndarray:
    m = m.copy()
    np.fill_diagonal(m, 0.0)
    m[np.diag_indices_from(m)] = -m.sum(axis=0)
    return m


def assemble_generator(zfs: ZfsParams, pair: PairModel, rates: RateParams,
                       field: FieldVector, mw: MwDrive | None = None) -> GeneratorMatrix:
    dqt = mw.dqt_weight if mw is not None else 1.0
    return RateModel(zfs, pair, rates, field, dqt).generator(mw)


def closed_classes(m: np.ndarray) -> list[list[int]]:
    """Closed communicating classes of the jump graph (j -> i when M[i, j] > 0)."""
    adj = (m.T > 0).astype(int)
    np.fill_diagonal(adj, 0)
    n, labels = connected_components(adj, directed=True, connection="strong")
    classes = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(len(m)), members)
        if not np.any(adj[np.ix_(members, outside)]):
            classes.append(members.tolist())
    return classes


def _solve_stationary(stack: np.ndarray) -> np.ndarray:
    a = stack.copy()
    a[:, 0, :] = 1.0
    rhs = np.zeros(a.shape[:2])
    rhs[:, 0] = 1.0
    p = np.linalg.solve(a, rhs[..., None])[..., 0]
    if np.any(p < -1e-12):
        raise ModelError(f"steady state has negative population {p.min():.3g}")
    return np.where(p < 0.0, 0.0, p)


def steady_state(m: GeneratorMatrix) -> np.ndarray:
    """Stationary populations with one balance row replaced by normalization."""
    mat = m.matrix if isinstance(m, GeneratorMatrix) else np.asarray(m, dtype=float)
    classes = closed_classes(mat)
    if len(classes) != 1:
        names = m.scheme.levels if isinstance(m, GeneratorMatrix) and m.scheme else None
        desc = [[names[i] if names else i for i in c] for c in classes]
        raise ModelError(f"stationary state not unique; disconnected closed classes {desc}")
    return _solve_stationary(mat[None])[0]


def pl_rate(p, rates: RateParams) -> float:
    """Photon emission rate ``k_rad p_ES`` (inverse microseconds)."""
    return float(rates.k_rad * np.asarray(p)[ES])


def odmr_contrast(zfs: ZfsParams, pair: PairModel, rates: RateParams, field: FieldVector,
                  mw: MwDrive, manifolds: Sequence[str] = MANIFOLDS) -> float:
    """``(PL_on - PL_off) / PL_off * 100`` for a single MW frequency."""
    model = RateModel(zfs, pair, rates, field, mw.dqt_weight)
    return float(model.contrast([mw.frequency], mw, manifolds)[0])


# --- time evolution -------------------------------------------------------

MAX_STEP_FACTOR = 0.1


def _fix_columns(p: np.ndarray) -> np.ndarray:
    # exact propagators of a generator are column-stochastic
    d = np.diag(p).copy()
    p[np.diag_indices_from(p)] = 1.0 - (p.sum(axis=0) - d)
    return p


def rk4_propagator(m: np.ndarray, h: float) -> np.ndarray:
    """One classical RK4 step for ``dp/dt = M p`` written as a matrix."""
    a = h * m
    a2 = a @ a
    a3 = a2 @ a
    a4 = a3 @ a
    p = np.eye(len(m)) + a + a2 / 2.0 + a3 / 6.0 + a4 / 24.0
    return _fix_columns(p)


def _matrix_power(p: np.ndarray, n: int) -> np.ndarray:
    result = np.eye(len(p))
    base = p.copy()
    while n:
        if n & 1:
            result = _fix_columns(base @ result)
        n >>= 1
        if n:
            base = _fix_columns(base @ base)
    return result


def step_count(m: np.ndarray, t: float) -> int:
    rate = float(np.max(np.abs(np.diag(m))))
    if rate == 0.0 or t == 0.0:
        return 0
    return max(1, math.ceil(t * rate / MAX_STEP_FACTOR))


def propagator(m: GeneratorMatrix | np.ndarray, t: float) -> np.ndarray:
    """Fixed-step RK4 flow map over ``t`` microseconds (step <= 0.1/max|M_jj|)."""
    mat = m.matrix if isinstance(m, GeneratorMatrix) else np.asarray(m, dtype=float)
    if not math.isfinite(t) or t < 0:
        raise DomainError(f"evolution time must be finite and >= 0, got {t}")
    n = step_count(mat, t)
    if n == 0:
        return np.eye(len(mat))
    return _matrix_power(rk4_propagator(mat, t / n), n)


def evolve(m: GeneratorMatrix | np.ndarray, p0, t: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    if abs(p0.sum() - 1.0) > 1e-9:
        raise DomainError(f"initial populations sum to {p0.sum()}, expected 1")
    p = propagator(m, t) @ p0
    if np.any(p < -1e-12):
        raise ModelError(f"evolved population went negative ({p.min():.3g})")
    return np.where(p < 0.0, 0.0, p)


def slowest_rate(m: GeneratorMatrix | np.ndarray) -> float:
    """Smallest nonzero relaxation rate ``|Re lambda|`` of the generator."""
    mat = m.matrix if isinstance(m, GeneratorMatrix) else np.asarray(m, dtype=float)
    lam = np.abs(np.linalg.eigvals(mat).real)
    scale = max(1.0, float(np.max(np.abs(mat))))
    nz = lam[lam > 1e-9 * scale]
    return float(nz.min()) if len(nz) else 0.0


# --- photon statistics ----------------------------------------------------

def g2(zfs: ZfsParams, pair: PairModel, rates: RateParams, field: FieldVector,
       tau_grid, background: float = 0.0) -> np.ndarray:
    """Second-order correlation of the emitted light at delays ``tau_grid`` (us).

    After a photon the emitter is in GS, so ``g2(tau) = p_ES(tau | GS) / p_ES``.
    ``background`` mixes in uncorrelated light: ``(g2 + b) / (1 + b)``.
    """
    gen = assemble_generator(zfs, pair, rates, field)
    pss = steady_state(gen)
    if pss[ES] <= 0:
        raise ModelError("model is dark; g2 undefined")
    start = np.zeros(N_LEVELS)
    start[GS] = 1.0
    taus = np.asarray(tau_grid, dtype=float)
    out = np.array([evolve(gen, start, t)[ES] for t in taus.ravel()]) / pss[ES]
    out = out.reshape(taus.shape)
    return apply_background(out, background)


def apply_background(g2_values, background: float):
    if background < 0:
        raise DomainError(f"background must be >= 0, got {background}")
    return (np.asarray(g2_values) + background) / (1.0 + background)


def background_for_dip(target_g2_zero: float, pure_g2_zero: float = 0.0) -> float:
    """Background level that lifts the model's zero-delay value to ``target``."""
    if not pure_g2_zero <= target_g2_zero < 1.0:
        raise DomainError(f"target g2(0)={target_g2_zero} must lie in [{pure_g2_zero}, 1)")
    return (target_g2_zero - pure_g2_zero) / (1.0 - target_g2_zero)
