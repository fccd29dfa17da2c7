"""Emitter survey statistics: ZPL histograms, densities and ODMR fractions."""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from .errors import DomainError, IngestError

TILE_UM2 = 900.0  # one 30 x 30 um^2 map tile
MATERIALS = ("hBN", "cHBN")
TRANSITIONS = ("S1", "S1_2")
ZPL_RANGE_NM = (400.0, 1000.0)
HIST_RANGE_NM = (550.0, 900.0)
LONG_WAVELENGTH_NM = (700.0, 850.0)

CSV_HEADER = ("emitter_id", "flake_id", "material", "zpl_nm", "fwhm_nm",
              "map_area_um2", "odmr_active", "transitions")

_MATERIAL_ALIASES = {"hbn": "hBN", "chbn": "cHBN", "c-hbn": "cHBN"}
_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


@dataclass(frozen=True)
class EmitterRecord:
    emitter_id: str
    flake_id: str
    material: str
    zpl_nm: float | None
    fwhm_nm: float | None
    map_area_um2: float
    odmr_active: bool
    transitions: frozenset = frozenset()

    def __post_init__(self):
        if self.material not in MATERIALS:
            raise DomainError(f"material must be one of {MATERIALS}, got {self.material!r}")
        if self.zpl_nm is not None and not (ZPL_RANGE_NM[0] <= self.zpl_nm <= ZPL_RANGE_NM[1]):
            raise DomainError(f"zpl_nm={self.zpl_nm} outside [{ZPL_RANGE_NM[0]:g}, {ZPL_RANGE_NM[1]:g}] nm")
        if self.fwhm_nm is not None and not self.fwhm_nm > 0:
            raise DomainError(f"fwhm_nm must be > 0, got {self.fwhm_nm}")
        if not (math.isfinite(self.map_area_um2) and self.map_area_um2 > 0):
            raise DomainError(f"map_area_um2 must be > 0, got {self.map_area_um2}")
        t = frozenset(self.transitions)
        unknown = t - set(TRANSITIONS)
        if unknown:
            raise DomainError(f"unknown transitions {sorted(unknown)}")
        if "S1" in t and "S1_2" not in t:
            raise DomainError("transition S1 without S1_2: every S = 1 emitter also shows the S = 1/2 line")
        object.__setattr__(self, "transitions", t)


@dataclass(frozen=True)
class Rejection:
    row: int  # 1-based line number in the file, header is line 1
    reason: str


@dataclass
class IngestResult:
    records: list
    rejections: list
    flake_areas: dict = field(default_factory=dict)  # flake_id -> (material, area)
    n_area_rows: int = 0

    @property
    def rows_read(self) -> int:
        return len(self.records) + len(self.rejections) + self.n_area_rows


def _material(raw: str) -> str:
    key = raw.strip().lower()
    if key not in _MATERIAL_ALIASES:
        raise DomainError(f"unknown material {raw!r}")
    return _MATERIAL_ALIASES[key]


def _optional_float(raw: str):
    raw = raw.strip()
    return float(raw) if raw else None


def _flag(raw: str) -> bool:
    key = raw.strip().lower()
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    raise DomainError(f"odmr_active must be a boolean, got {raw!r}")


def _transitions(raw: str) -> frozenset:
    raw = raw.strip()
    if not raw:
        return frozenset()
    return frozenset(p.strip() for p in re.split(r"[+;|]", raw))


def ingest(source) -> IngestResult:
    """Parse a survey CSV; bad rows go to the rejection report with line numbers.

    A row with an empty ``emitter_id`` declares a scanned flake without
    emitters: it contributes area (and a zero density) but no record.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _ingest_lines(fh)
    return _ingest_lines(source)


def _ingest_lines(fh: Iterable[str]) -> IngestResult:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IngestError("empty input: missing CSV header") from None
    missing = [c for c in CSV_HEADER if c not in header]
    if missing:
        raise IngestError(f"CSV header missing columns: {', '.join(missing)}")
    col = {name: header.index(name) for name in CSV_HEADER}
    result = IngestResult([], [])
    areas: dict = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            result.rejections.append(Rejection(line_no, f"expected {len(header)} fields, got {len(row)}"))
            continue
        get = {k: row[i] for k, i in col.items()}
        try:
            material = _material(get["material"])
            flake = get["flake_id"].strip()
            if not flake:
                raise DomainError("flake_id is empty")
            area = float(get["map_area_um2"])
            if not (math.isfinite(area) and area > 0):
                raise DomainError(f"map_area_um2 must be > 0, got {area}")
            prior = areas.get(flake)
            if prior is not None and prior != (material, area):
                raise DomainError(f"flake {flake} declared earlier with (material, area) = {prior}")
            if not get["emitter_id"].strip():
                areas[flake] = (material, area)
                result.n_area_rows += 1
                continue
            rec = EmitterRecord(
                emitter_id=get["emitter_id"].strip(),
                flake_id=flake,
                material=material,
                zpl_nm=_optional_float(get["zpl_nm"]),
                fwhm_nm=_optional_float(get["fwhm_nm"]),
                map_area_um2=area,
                odmr_active=_flag(get["odmr_active"]),
                transitions=_transitions(get["transitions"]),
            )
        except (ValueError, DomainError) as exc:
            result.rejections.append(Rejection(line_no, str(exc)))
            continue
        areas[flake] = (material, area)
        result.records.append(rec)
    result.flake_areas = areas
    return result


# --- statistics -----------------------------------------------------------

@dataclass(frozen=True)
class Fraction:
    k: int
    n: int
    value: float
    ci_low: float
    ci_high: float

    @property
    def percent(self) -> float:
        return 100.0 * self.value


def wilson_fraction(k: int, n: int, confidence: float = 0.95) -> Fraction:
    if n <= 0:
        raise DomainError("fraction of an empty set")
    ci = binomtest(k, n).proportion_ci(confidence_level=confidence, method="wilson")
    value = k / n
    # clamp rounding so the interval always contains the estimate
    return Fraction(k, n, value, min(float(ci.low), value), max(float(ci.high), value))


def odmr_fraction(records: Sequence[EmitterRecord]) -> Fraction:
    records = list(records)
    if not records:
        raise DomainError("odmr_fraction needs at least one record")
    return wilson_fraction(sum(r.odmr_active for r in records), len(records))


def by_material(records: Iterable[EmitterRecord]) -> dict[str, list]:
    out = defaultdict(list)
    for r in records:
        out[r.material].append(r)
    return {m: out[m] for m in MATERIALS if out[m]}


def long_wavelength_fraction(records: Sequence[EmitterRecord], threshold_nm: float = LONG_WAVELENGTH_NM[0],
                             upper_nm: float = LONG_WAVELENGTH_NM[1]) -> dict[str, Fraction]:
    """Per-material fraction of ZPLs in ``(threshold_nm, upper_nm]``."""
    if not threshold_nm < upper_nm:
        raise DomainError("threshold must be below the upper bound")
    out = {}
    for material, recs in by_material(records).items():
        with_zpl = [r for r in recs if r.zpl_nm is not None]
        if not with_zpl:
            raise DomainError(f"no ZPL values for {material}")
        k = sum(threshold_nm < r.zpl_nm <= upper_nm for r in with_zpl)
        out[material] = wilson_fraction(k, len(with_zpl))
    return out


@dataclass(frozen=True)
class DensityStats:
    per_flake: dict  # flake_id -> emitters per tile
    mean: float
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float


def flake_densities(records: Sequence[EmitterRecord], flake_areas: Mapping | None = None) -> dict[str, dict]:
    """Emitters per 900 um^2 tile for each flake, grouped by material.

    ``flake_areas`` (flake_id -> (material, area)) adds flakes that have no
    emitter records; they count as density 0.
    """
    counts: dict = defaultdict(int)
    meta: dict = {}
    for r in records:
        counts[r.flake_id] += 1
        key = (r.material, r.map_area_um2)
        if meta.setdefault(r.flake_id, key) != key:
            raise DomainError(f"flake {r.flake_id} has inconsistent material or area")
    for flake, key in (flake_areas or {}).items():
        if meta.setdefault(flake, tuple(key)) != tuple(key):
            raise DomainError(f"flake {flake} area declaration disagrees with its records")
    out: dict = defaultdict(dict)
    for flake in sorted(meta):
        material, area = meta[flake]
        out[material][flake] = counts[flake] * TILE_UM2 / area
    return dict(out)


def density_stats(records: Sequence[EmitterRecord], flake_areas: Mapping | None = None) -> dict[str, DensityStats]:
    out = {}
    for material, per_flake in flake_densities(records, flake_areas).items():
        v = np.array([per_flake[k] for k in sorted(per_flake)])
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        out[material] = DensityStats(dict(per_flake), float(v.mean()), float(v.min()),
                                     float(q1), float(med), float(q3), float(v.max()))
    return out


@dataclass(frozen=True)
class ZplHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def mode_bin(self) -> tuple[float, float]:
        i = int(np.argmax(self.counts))
        return float(self.edges[i]), float(self.edges[i + 1])


def zpl_histogram(records: Sequence[EmitterRecord], bin_nm: float = 10.0) -> ZplHistogram:
    """Counts on a grid anchored at 550 nm covering [550, 900] nm.

    The grid is extended by whole bins when a ZPL falls outside, so the
    counts always sum to the number of records with a ZPL.
    """
    if not (math.isfinite(bin_nm) and bin_nm > 0):
        raise DomainError(f"bin_nm must be > 0, got {bin_nm}")
    z = np.sort(np.array([r.zpl_nm for r in records if r.zpl_nm is not None], dtype=float))
    lo, hi = HIST_RANGE_NM
    if z.size:
        lo -= bin_nm * math.ceil(max(0.0, lo - z[0]) / bin_nm)
        hi += bin_nm * math.ceil(max(0.0, z[-1] - hi) / bin_nm)
    n_bins = int(round((hi - lo) / bin_nm))
    if lo + n_bins * bin_nm < hi - 1e-9:
        n_bins += 1
    edges = lo + bin_nm * np.arange(n_bins + 1)
    counts, _ = np.histogram(z, bins=edges)
    return ZplHistogram(edges, counts)


@dataclass(frozen=True)
class MaterialSummary:
    material: str
    count: int
    histogram: ZplHistogram
    density: DensityStats
    odmr: Fraction
    long_wavelength: Fraction | None


@dataclass(frozen=True)
class CensusSummary:
    materials: dict
    rejections: tuple = ()
    bin_nm: float = 10.0
    long_range_nm: tuple = LONG_WAVELENGTH_NM


def summarize(ingested: IngestResult, bin_nm: float = 10.0,
              long_range_nm: tuple = LONG_WAVELENGTH_NM) -> CensusSummary:
    records = ingested.records
    dens = density_stats(records, ingested.flake_areas)
    groups = by_material(records)
    out = {}
    for material in MATERIALS:
        recs = groups.get(material, [])
        if not recs:
            continue
        has_zpl = any(r.zpl_nm is not None for r in recs)
        out[material] = MaterialSummary(
            material,
            len(recs),
            zpl_histogram(recs, bin_nm),
            dens[material],
            odmr_fraction(recs),
            long_wavelength_fraction(recs, *long_range_nm)[material] if has_zpl else None,
        )
    return CensusSummary(out, tuple(ingested.rejections), bin_nm, tuple(long_range_nm))


def _f(x) -> str:
    return f"{x:.6g}"


def report_text(summary: CensusSummary) -> str:
    lines = []
    lo, hi = summary.long_range_nm
    for m, s in summary.materials.items():
        lines.append(f"[{m}]")
        lines.append(f"count = {s.count}")
        lines.append(f"odmr_active = {s.odmr.k}/{s.odmr.n} = {s.odmr.percent:.1f}% "
                     f"(95% Wilson {100 * s.odmr.ci_low:.1f}-{100 * s.odmr.ci_high:.1f}%)")
        if s.long_wavelength is not None:
            lw = s.long_wavelength
            lines.append(f"zpl_in_({lo:g},{hi:g}]nm = {lw.k}/{lw.n} = {lw.percent:.1f}%")
        d = s.density
        lines.append(f"density_per_tile mean = {_f(d.mean)} min = {_f(d.minimum)} q1 = {_f(d.q1)} "
                     f"median = {_f(d.median)} q3 = {_f(d.q3)} max = {_f(d.maximum)} "
                     f"(flakes = {len(d.per_flake)})")
        a, b = s.histogram.mode_bin
        lines.append(f"zpl_mode_bin = [{a:g}, {b:g}) nm")
        lines.append("")
    lines.append(f"rejected_rows = {len(summary.rejections)}")
    for r in summary.rejections:
        lines.append(f"  line {r.row}: {r.reason}")
    return "\n".join(lines) + "\n"


def write_report(summary: CensusSummary, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def table(name, header, rows):
        p = out / name
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)

    p = out / "summary.txt"
    p.write_text(report_text(summary), encoding="utf-8")
    paths.append(p)
    rows = []
    for m, s in summary.materials.items():
        lw = s.long_wavelength
        rows.append([m, s.count, s.odmr.k, _f(s.odmr.value), _f(s.odmr.ci_low), _f(s.odmr.ci_high),
                     "" if lw is None else _f(lw.value), _f(s.density.mean), _f(s.density.minimum),
                     _f(s.density.q1), _f(s.density.median), _f(s.density.q3), _f(s.density.maximum)])
    table("summary.csv", ["material", "count", "odmr_active", "odmr_fraction", "odmr_ci_low", "odmr_ci_high",
                          "long_wavelength_fraction", "density_mean", "density_min", "density_q1",
                          "density_median", "density_q3", "density_max"], rows)
    table("zpl_histogram.csv", ["material", "bin_low_nm", "bin_high_nm", "count"],
          [[m, _f(s.histogram.edges[i]), _f(s.histogram.edges[i + 1]), int(c)]
           for m, s in summary.materials.items() for i, c in enumerate(s.histogram.counts)])
    table("density.csv", ["material", "flake_id", "emitters_per_tile"],
          [[m, k, _f(v)] for m, s in summary.materials.items() for k, v in sorted(s.density.per_flake.items())])
    table("rejections.csv", ["line", "reason"], [[r.row, r.reason] for r in summary.rejections])
    return paths
