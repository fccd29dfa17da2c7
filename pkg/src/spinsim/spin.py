"""Spin Hamiltonians of the hBN spin complex.

Two spin systems are modelled:

* the local metastable S = 1 triplet, with zero-field splitting ``D``, ``E``
  and an electron Zeeman term, in the basis ``(|+1>, |0>, |-1>)`` quantized
  along the crystal c axis (out-of-plane, ``z``);
* the remote metastable spin pair, two S = 1/2 electrons with isotropic
  exchange ``J`` and a local-field difference acting on spin 1 only,
  expressed in the singlet/triplet basis ``(T+, T0, T-, S)``.

Units: fields in mT, energies and frequencies in MHz.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

#: Electron gyromagnetic ratio, MHz per mT.
GAMMA_E = 28.025

_R2 = 1.0 / math.sqrt(2.0)

# spin-1 operators, basis (|+1>, |0>, |-1>)
SX = _R2 * np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex)
SY = _R2 * np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex)
SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)
SX2 = SX @ SX
_ZFS_AXIAL = (SZ @ SZ - 2.0 / 3.0 * np.eye(3)).real
_ZFS_RHOMBIC = (SX @ SX - SY @ SY).real
_AX9 = _ZFS_AXIAL.reshape(1, 9)
_RH9 = _ZFS_RHOMBIC.reshape(1, 9)
_SX9 = SX.real.reshape(1, 9)
_SZ9 = SZ.real.reshape(1, 9)

# spin-1/2 operators and the two-spin product basis (uu, ud, du, dd)
_sx = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
_sy = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
_sz = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
_i2 = np.eye(2)
S1 = tuple(np.kron(op, _i2) for op in (_sx, _sy, _sz))
S2 = tuple(np.kron(_i2, op) for op in (_sx, _sy, _sz))

#: Columns are T+, T0, T-, S written in the product basis.
ST_BASIS = np.array(
    [
        [1, 0, 0, 0],
        [0, _R2, 0, _R2],
        [0, _R2, 0, -_R2],
        [0, 0, 1, 0],
    ],
    dtype=complex,
)
PAIR_LABELS = ("T+", "T0", "T-", "S")


def _to_st(op):
    return ST_BASIS.conj().T @ op @ ST_BASIS


#: Pair operators in the (T+, T0, T-, S) basis.
PAIR_SX_TOTAL = _to_st(S1[0] + S2[0])
PAIR_SZ_TOTAL = _to_st(S1[2] + S2[2])


class Label(str, enum.Enum):
    T_MINUS = "T_MINUS"
    T_PLUS = "T_PLUS"
    DQT = "DQT"
    DOUBLET = "DOUBLET"

    def __str__(self):
        return self.value


TRIPLET_LABELS = (Label.T_MINUS, Label.T_PLUS, Label.DQT)


@dataclass(frozen=True)
class FieldVector:
    """Static magnetic field in mT (crystal frame, ``z`` out-of-plane)."""

    bx: float = 0.0
    by: float = 0.0
    bz: float = 0.0

    def __post_init__(self):
        for name in ("bx", "by", "bz"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"field component {name}={value!r} is not finite")
            object.__setattr__(self, name, float(value))

    @classmethod
    def from_angle(cls, magnitude: float, theta_deg: float) -> "FieldVector":
        """Field ``|B| (sin t, 0, cos t)``; 0 deg is out-of-plane, 90 deg in-plane."""
        t = math.radians(theta_deg)
        return cls(magnitude * math.sin(t), 0.0, magnitude * math.cos(t))

    @classmethod
    def axial(cls, bz: float) -> "FieldVector":
        return cls(0.0, 0.0, bz)

    def magnitude(self) -> float:
        return math.sqrt(self.bx**2 + self.by**2 + self.bz**2)

    def as_array(self) -> np.ndarray:
        return np.array([self.bx, self.by, self.bz])

    def scaled(self, factor: float) -> "FieldVector":
        return FieldVector(self.bx * factor, self.by * factor, self.bz * factor)


class ZfsConventionWarning(UserWarning):
    pass


def remap_zfs(d_mhz: float, e_mhz: float) -> tuple[float, float, tuple[int, int, int]]:
    """Re-express (D, E) in the principal-axis frame where ``|D| >= 3|E|``, ``E >= 0``.

    Returns ``(d, e, axes)``; ``axes`` lists the old axis indices that become
    the new ``x, y, z``.  ``H(d, e, B[axes])`` has the same spectrum as the
    original ``H(D, E, B)`` for every field.
    """
    principal = np.array([-d_mhz / 3 + e_mhz, -d_mhz / 3 - e_mhz, 2 * d_mhz / 3])
    z = int(np.argmax(np.abs(principal)))
    # ties keep the original z axis
    if abs(abs(principal[z]) - abs(principal[2])) <= 1e-12 * max(1.0, abs(principal[2])):
        z = 2
    x, y = (i for i in range(3) if i != z)
    if principal[x] < principal[y]:
        x, y = y, x
    d_new = 1.5 * principal[z]
    e_new = 0.5 * (principal[x] - principal[y])
    return float(d_new), float(e_new), (x, y, z)


@dataclass(frozen=True)
class ZfsParams:
    """Triplet zero-field splitting (MHz) and g-factor.

    The constructor enforces the conventional frame ``0 <= E <= |D|/3``; use
    :meth:`conventional` to accept arbitrary (D, E) with a remap.
    """

    d_mhz: float
    e_mhz: float = 0.0
    g_factor: float = 2.0

    def __post_init__(self):
        for name in ("d_mhz", "e_mhz", "g_factor"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name}={value!r} is not finite")
            object.__setattr__(self, name, float(value))
        if self.g_factor <= 0:
            raise DomainError(f"g_factor must be positive, got {self.g_factor}")
        tol = 1e-9 * max(1.0, abs(self.d_mhz))
        if self.e_mhz < -tol or self.e_mhz > abs(self.d_mhz) / 3 + tol:
            raise DomainError(
                f"(D, E) = ({self.d_mhz}, {self.e_mhz}) outside 0 <= E <= |D|/3; "
                "use ZfsParams.conventional() to remap"
            )

    @classmethod
    def conventional(cls, d_mhz: float, e_mhz: float = 0.0, g_factor: float = 2.0) -> "ZfsParams":
        if 0 <= e_mhz <= abs(d_mhz) / 3:
            return cls(d_mhz, e_mhz, g_factor)
        d_new, e_new, axes = remap_zfs(d_mhz, e_mhz)
        warnings.warn(
            f"(D, E) = ({d_mhz}, {e_mhz}) MHz outside |D| >= 3E; remapped to "
            f"({d_new:.6g}, {e_new:.6g}) MHz, principal axes {axes}",
            ZfsConventionWarning,
            stacklevel=2,
        )
        return cls(d_new, e_new, g_factor)


@dataclass(frozen=True)
class TripletHamiltonian:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (3, 3):
            raise DomainError(f"triplet Hamiltonian must be 3x3, got {m.shape}")
        if np.max(np.abs(m - m.conj().T)) > 1e-9:
            raise DomainError("triplet Hamiltonian is not Hermitian")
        object.__setattr__(self, "matrix", m)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


@dataclass(frozen=True)
class Transition:
    label: Label
    frequency: float
    strength: float


@dataclass(frozen=True)
class TransitionSet:
    entries: tuple[Transition, ...]

    def frequency(self, label) -> float:
        label = Label(label)
        for t in self.entries:
            if t.label is label:
                return t.frequency
        raise KeyError(label)

    def strength(self, label) -> float:
        label = Label(label)
        for t in self.entries:
            if t.label is label:
                return t.strength
        raise KeyError(label)

    def as_dict(self) -> dict[str, float]:
        return {t.label.value: t.frequency for t in self.entries}


def zeeman_shift(ms: float, field: FieldVector) -> float:
    """Linear Zeeman shift ``gamma_e |B| ms`` in MHz."""
    if ms not in (-1, -0.5, 0, 0.5, 1):
        raise DomainError(f"ms must be one of 0, +-1/2, +-1; got {ms}")
    if not isinstance(field, FieldVector):
        field = FieldVector(*field)
    return GAMMA_E * field.magnitude() * ms


def doublet_frequency(field: FieldVector, g_factor: float = 2.0) -> float:
    """S = 1/2 resonance ``(g/2) gamma_e |B|``; depends only on ``|B|``."""
    if not isinstance(field, FieldVector):
        field = FieldVector(*field)
    return 0.5 * g_factor * GAMMA_E * field.magnitude()


def triplet_matrices(d_mhz, e_mhz, g_factor, fields) -> np.ndarray:
    """Stack of triplet Hamiltonians for an ``(n, 3)`` array of fields.

    Real-valued when every field lies in the xz plane.
    """
    b = np.asarray(fields, dtype=float)
    if b.ndim == 1:
        b = b[None, :]
    k = 0.5 * g_factor * GAMMA_E
    static = d_mhz * _ZFS_AXIAL + e_mhz * _ZFS_RHOMBIC
    if not b[:, 1].any():
        flat = static.reshape(1, 9) + (k * b[:, 0:1]) * _SX9 + (k * b[:, 2:3]) * _SZ9
        return flat.reshape(-1, 3, 3)
    zeeman = k * (b[:, 0, None, None] * SX + b[:, 1, None, None] * SY + b[:, 2, None, None] * SZ)
    return static + zeeman


def build_triplet_hamiltonian(zfs: ZfsParams, field: FieldVector) -> TripletHamiltonian:
    h = triplet_matrices(zfs.d_mhz, zfs.e_mhz, zfs.g_factor, field.as_array())[0]
    return TripletHamiltonian(h)


_SZ_TIE = 1e-9
_EPS = np.finfo(float).eps


_NEXT = np.array([1, 2, 0])
_PREV = np.array([2, 0, 1])


def _label_rows(evals: np.ndarray, evecs: np.ndarray):
    w = evecs * evecs if evecs.dtype.kind == "f" else (evecs * evecs.conj()).real
    i0 = w[:, 1, :].argmax(axis=1)
    a = _NEXT[i0]
    c = _PREV[i0]
    r = np.arange(len(i0))
    dsz = (w[r, 0, a] - w[r, 2, a]) - (w[r, 0, c] - w[r, 2, c])
    a_plus = dsz > 0
    # eigenvectors of nearly degenerate levels are only good to ~eps |H| / gap
    gap = np.abs(evals[r, a] - evals[r, c])
    noise = 64 * _EPS * np.abs(evals).max(axis=1) / np.maximum(gap, np.finfo(float).tiny)
    tie = np.abs(dsz) <= np.maximum(_SZ_TIE, noise)
    if tie.any():
        a_plus[tie] = evals[r[tie], a[tie]] >= evals[r[tie], c[tie]]
    ip = np.where(a_plus, a, c)
    return ip, i0, a + c - ip


def label_states(evals: np.ndarray, evecs: np.ndarray) -> np.ndarray:
    """Indices of the (+1, 0, -1) eigenstates for stacked 3x3 eigenproblems.

    The ``0`` state has the largest ``|<0|psi>|^2``.  Of the other two, the
    one with larger ``<Sz>`` is ``+1``; when ``<Sz>`` ties (within 1e-9, or
    within eigenvector round-off for nearly degenerate levels) the
    higher-energy state is ``+1``.
    """
    if evals.ndim == 1:
        return label_states(evals[None], evecs[None])[0]
    return np.stack(_label_rows(evals, evecs), axis=-1)


LABELINGS = ("character", "branch")


def _check_labeling(labeling: str) -> None:
    if labeling not in LABELINGS:
        raise DomainError(f"labeling must be one of {LABELINGS}, got {labeling!r}")


def _branch_rows(h: np.ndarray):
    """Indices into ascending eigenvalues of the (+1, 0, -1) branches.

    Each branch keeps the energy rank its level has for a field of the same
    size along +z, so labels stay continuous as the field is rotated.  For an
    axial field this agrees with :func:`label_states`.
    """
    d = -1.5 * h[..., 1, 1].real
    e = h[..., 0, 2].real
    kz = 0.5 * (h[..., 0, 0] - h[..., 2, 2]).real
    s = np.sqrt(e * e + kz * kz + 2.0 * np.abs(h[..., 0, 1]) ** 2)
    lp, l0, lm = d / 3 + s, -2 * d / 3, d / 3 - s
    # ranks as a stable sort of (lp, l0, lm) would give them; lp >= lm always
    ip = (l0 < lp).astype(int) + (lm < lp)
    i0 = (lp <= l0).astype(int) + (lm < l0)
    return ip, i0, 3 - ip - i0


def _transition_weights(evecs, dqt_weight):
    """Drive weights ``|<i|Sx|j>|^2 + dqt_weight |<i|Sx^2|j>|^2`` between eigenstates."""
    vh = np.conj(np.swapaxes(evecs, -1, -2))
    sx = vh @ SX @ evecs
    sx2 = vh @ SX2 @ evecs
    return np.abs(sx) ** 2 + dqt_weight * np.abs(sx2) ** 2


def triplet_frequencies(d_mhz, e_mhz, g_factor, fields, labeling: str = "character") -> np.ndarray:
    """``(n, 3)`` array of (T_MINUS, T_PLUS, DQT) frequencies for stacked fields."""
    return _frequencies(triplet_matrices(d_mhz, e_mhz, g_factor, fields), labeling)


def triplet_frequencies_xz(d_mhz, e_mhz, kx, kz, labeling: str = "character") -> np.ndarray:
    """As :func:`triplet_frequencies` for xz-plane fields given as Zeeman terms.

    ``kx``, ``kz`` are ``(g/2) gamma_e B_x`` and ``(g/2) gamma_e B_z`` in MHz.
    """
    flat = (d_mhz * _AX9 + e_mhz * _RH9) + kx[:, None] * _SX9 + kz[:, None] * _SZ9
    return _frequencies(flat.reshape(-1, 3, 3), labeling)


def _frequencies(h, labeling="character"):
    if labeling == "branch":
        evals = np.linalg.eigvalsh(h)
        ip, i0, im = _branch_rows(h)
    else:
        _check_labeling(labeling)
        evals, evecs = np.linalg.eigh(h)
        ip, i0, im = _label_rows(evals, evecs)
    r = np.arange(len(ip))
    ep, e0, em = evals[r, ip], evals[r, i0], evals[r, im]
    out = np.empty((len(r), 3))
    out[:, 0] = np.abs(em - e0)
    out[:, 1] = np.abs(ep - e0)
    out[:, 2] = np.abs(ep - em)
    return out


@dataclass(frozen=True)
class TripletEigensystem:
    """Eigenstates ordered (+1, 0, -1) by dominant ``|m_s>`` character."""

    energies: np.ndarray  # (3,)
    vectors: np.ndarray  # (3 basis, 3 states)

    @classmethod
    def from_hamiltonian(cls, h: TripletHamiltonian, labeling: str = "character") -> "TripletEigensystem":
        _check_labeling(labeling)
        evals, evecs = np.linalg.eigh(h.matrix)
        if labeling == "branch":
            idx = np.array(_branch_rows(h.matrix))
        else:
            idx = label_states(evals, evecs)
        return cls(evals[idx], evecs[:, idx])

    def populations(self) -> np.ndarray:
        """``|<m_s|i>|^2``, rows m_s = (+1, 0, -1), columns eigenstates."""
        return np.abs(self.vectors) ** 2


def triplet_transitions(h: TripletHamiltonian, dqt_weight: float = 1.0,
                        labeling: str = "character") -> TransitionSet:
    """Labeled 0<->-1, 0<->+1 and -1<->+1 transitions with relative strengths.

    ``labeling="character"`` names states by their dominant ``|m_s>``;
    ``"branch"`` follows energy ranks from the axial case instead, which is
    what a ridge traced through a field rotation measures.
    """
    eig = TripletEigensystem.from_hamiltonian(h, labeling)
    ep, e0, em = eig.energies
    w = _transition_weights(eig.vectors, dqt_weight)
    raw = np.array([w[1, 2], w[0, 1], w[0, 2]])
    peak = raw.max()
    strengths = raw / peak if peak > 0 else np.zeros(3)
    freqs = (abs(em - e0), abs(ep - e0), abs(ep - em))
    return TransitionSet(
        tuple(
            Transition(label, float(f), float(min(1.0, s)))
            for label, f, s in zip(TRIPLET_LABELS, freqs, strengths)
        )
    )


@dataclass(frozen=True)
class PairModel:
    """Weakly coupled spin pair of the remote metastable configuration.

    The local-field defaults (20, 20) MHz are not measured values; they set
    the size of the doublet splitting and must be treated as tunable.
    """

    j_mhz: float = 0.0
    delta_x_mhz: float = 20.0
    delta_z_mhz: float = 20.0

    def __post_init__(self):
        for name in ("j_mhz", "delta_x_mhz", "delta_z_mhz"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name}={value!r} is not finite")
            object.__setattr__(self, name, float(value))


@dataclass(frozen=True)
class PairHamiltonian:
    """4x4 pair Hamiltonian in the (T+, T0, T-, S) basis, MHz."""

    matrix: np.ndarray


@dataclass(frozen=True)
class PairEigenstate:
    energy_mhz: float
    singlet_fraction: float
    ms_expectation: float
    vector: np.ndarray = field(repr=False, compare=False)


def build_pair_hamiltonian(model: PairModel, field: FieldVector) -> PairHamiltonian:
    """Pair Hamiltonian; the pair is quantized along its own field axis."""
    if not isinstance(field, FieldVector):
        field = FieldVector(*field)
    b = GAMMA_E * field.magnitude()
    h = (
        b * (S1[2] + S2[2])
        + model.j_mhz * sum(a @ c for a, c in zip(S1, S2))
        + model.delta_x_mhz * S1[0]
        + model.delta_z_mhz * S1[2]
    )
    return PairHamiltonian(_to_st(h))


def _canonical_eigenbasis(h: np.ndarray):
    """Eigen-decomposition with a deterministic basis inside degenerate subspaces.

    Inside a degenerate cluster the basis diagonalizes the singlet projector
    (largest singlet fraction first), then the total ``Sz``.
    """
    evals, evecs = np.linalg.eigh(h)
    scale = max(1.0, float(np.max(np.abs(evals))))
    tol = 1e-9 * scale
    vecs = evecs.copy()
    start = 0
    n = len(evals)
    while start < n:
        stop = start + 1
        while stop < n and evals[stop] - evals[stop - 1] < tol:
            stop += 1
        if stop - start > 1:
            v = evecs[:, start:stop]
            ps = v.conj().T[:, 3:4] @ v[3:4, :]  # restricted |S><S|
            s, u = np.linalg.eigh(ps)
            order = np.argsort(-s, kind="stable")
            s, u = s[order], u[:, order]
            v = v @ u
            # secondary: total Sz inside equal-singlet groups
            k = 0
            while k < len(s):
                m = k + 1
                while m < len(s) and abs(s[m] - s[k]) < tol:
                    m += 1
                if m - k > 1:
                    sub = v[:, k:m]
                    zz = sub.conj().T @ PAIR_SZ_TOTAL @ sub
                    zv, zu = np.linalg.eigh(zz)
                    sub = sub @ zu[:, ::-1]
                    v[:, k:m] = sub
                k = m
            vecs[:, start:stop] = v
            evals[start:stop] = np.mean(evals[start:stop])
        start = stop
    # fix global phase: largest component real positive
    for k in range(n):
        j = int(np.argmax(np.abs(vecs[:, k])))
        vecs[:, k] *= np.exp(-1j * np.angle(vecs[j, k]))
    return evals, vecs


def pair_eigenstates(h: PairHamiltonian) -> list[PairEigenstate]:
    """Four eigenstates, ascending energy, with singlet fraction and ``<S1z+S2z>``."""
    m = np.asarray(h.matrix if isinstance(h, PairHamiltonian) else h, dtype=complex)
    evals, vecs = _canonical_eigenbasis(m)
    out = []
    for k in range(4):
        v = vecs[:, k]
        s = float(np.clip(abs(v[3]) ** 2, 0.0, 1.0))
        ms = float(abs(v[0]) ** 2 - abs(v[2]) ** 2)
        out.append(PairEigenstate(float(evals[k]), s, ms, v))
    return out
