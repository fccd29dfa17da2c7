"""INI-style run configuration with defaults, validation and line numbers.

Sections and keys::

    [zfs]    d_mhz e_mhz g_factor
    [pair]   j_mhz delta_x_mhz delta_z_mhz
    [rates]  k_pump k_rad k_isc_p1 k_isc_0 k_isc_m1 k_ct k_rec_s k_rec_t
             k_lms_gs ct_weight_p1 ct_weight_0 ct_weight_m1 k_mix mix_fwhm_mhz
    [mw]     drive_rate linewidth_fwhm_mhz dqt_weight amplifier_table_path
    [sweep]  f_min_mhz f_max_mhz f_step_mhz

Every omitted key takes its default and the substitution is logged.
"""

from __future__ import annotations

import configparser
import hashlib
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DomainError
from .experiments import ModelParams, SweepSpec
from .photodynamics import AmplifierTable, MwDrive, RateParams
from .spin import PairModel, ZfsConventionWarning, ZfsParams

log = logging.getLogger("spinsim.config")

DEFAULTS: dict[str, dict[str, object]] = {
    "zfs": {"d_mhz": 950.0, "e_mhz": 200.0, "g_factor": 2.0},
    "pair": {"j_mhz": 0.0, "delta_x_mhz": 20.0, "delta_z_mhz": 20.0},
    "rates": {
        "k_pump": 10.0, "k_rad": 100.0,
        "k_isc_p1": 2.0, "k_isc_0": 8.0, "k_isc_m1": 2.0,
        "k_ct": 5.0, "k_rec_s": 20.0, "k_rec_t": 0.5, "k_lms_gs": 0.2,
        "ct_weight_p1": 1.0, "ct_weight_0": 1.0, "ct_weight_m1": 0.5,
        "k_mix": 50.0, "mix_fwhm_mhz": 200.0,
    },
    "mw": {"drive_rate": 5.0, "linewidth_fwhm_mhz": 30.0, "dqt_weight": 1.0, "amplifier_table_path": ""},
    "sweep": {"f_min_mhz": 100.0, "f_max_mhz": 4500.0, "f_step_mhz": 2.0},
}

_NONNEGATIVE = {f"rates.{k}" for k in DEFAULTS["rates"] if k != "mix_fwhm_mhz"} | {"mw.drive_rate", "mw.dqt_weight"}
_POSITIVE = {"zfs.g_factor", "rates.mix_fwhm_mhz", "mw.linewidth_fwhm_mhz", "sweep.f_step_mhz"}


@dataclass(frozen=True)
class Config:
    zfs: ZfsParams
    pair: PairModel
    rates: RateParams
    mw: MwDrive
    sweep: SweepSpec
    defaults_applied: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()
    sha256: str = ""
    values: dict = field(default_factory=dict)

    def model(self) -> ModelParams:
        return ModelParams(self.zfs, self.pair, self.rates, self.mw)


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_map(text: str) -> tuple[dict, dict]:
    """``(section -> line, (section, key) -> line)`` from a raw scan of the text."""
    sections, keys = {}, {}
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1).strip()
            sections.setdefault(current, n)
            continue
        if current is None or line[:1].isspace():
            continue
        m = _KEY_RE.match(line)
        if m:
            keys.setdefault((current, m.group(1).strip().lower()), n)
    return sections, keys


def parse_config(text: str, base_dir: Path | str | None = None) -> Config:
    """Validate a configuration text; errors carry the offending line number."""
    parser = configparser.ConfigParser(strict=True, interpolation=None,
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.section}.{exc.option}", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparsable line", line) from None
    sec_lines, key_lines = _line_map(text)

    values: dict[str, dict[str, object]] = {}
    applied = []
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(DEFAULTS)}",
                              sec_lines.get(section))
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}", key_lines.get((section, key)))
    for section, defaults in DEFAULTS.items():
        values[section] = {}
        for key, default in defaults.items():
            name = f"{section}.{key}"
            line = key_lines.get((section, key))
            if parser.has_option(section, key):
                raw = parser.get(section, key).strip()
                if isinstance(default, str):
                    values[section][key] = raw
                    continue
                try:
                    value = float(raw)
                except ValueError:
                    raise ConfigError(f"{name} = {raw!r} is not a number", line) from None
                if value != value or value in (float("inf"), float("-inf")):
                    raise ConfigError(f"{name} must be finite", line)
                if name in _NONNEGATIVE and value < 0:
                    raise ConfigError(f"{name} = {value:g} must be >= 0", line)
                if name in _POSITIVE and value <= 0:
                    raise ConfigError(f"{name} = {value:g} must be > 0", line)
                values[section][key] = value
            else:
                values[section][key] = default
                applied.append(name)
                log.info("default applied: %s = %r", name, default)

    def where(*names):
        lines = [key_lines.get(tuple(n.split("."))) for n in names]
        lines = [n for n in lines if n is not None]
        return max(lines) if lines else None

    z, p, r, m, s = (values[k] for k in ("zfs", "pair", "rates", "mw", "sweep"))
    notes = []
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ZfsConventionWarning)
            zfs = ZfsParams.conventional(z["d_mhz"], z["e_mhz"], z["g_factor"])
        for w in caught:
            notes.append(str(w.message))
            log.warning("%s", w.message)
    except DomainError as exc:
        raise ConfigError(str(exc), where("zfs.d_mhz", "zfs.e_mhz", "zfs.g_factor")) from None
    try:
        pair = PairModel(p["j_mhz"], p["delta_x_mhz"], p["delta_z_mhz"])
    except DomainError as exc:
        raise ConfigError(str(exc), where("pair.j_mhz", "pair.delta_x_mhz", "pair.delta_z_mhz")) from None
    try:
        rates = RateParams(
            k_pump=r["k_pump"], k_rad=r["k_rad"],
            k_isc=(r["k_isc_p1"], r["k_isc_0"], r["k_isc_m1"]),
            k_ct=r["k_ct"], k_rec_s=r["k_rec_s"], k_rec_t=r["k_rec_t"], k_lms_gs=r["k_lms_gs"],
            ct_weights=(r["ct_weight_p1"], r["ct_weight_0"], r["ct_weight_m1"]),
            k_mix=r["k_mix"], mix_fwhm_mhz=r["mix_fwhm_mhz"],
        )
    except DomainError as exc:
        raise ConfigError(str(exc), where("rates.k_rec_s", "rates.k_rec_t")) from None
    amplifier = None
    if m["amplifier_table_path"]:
        path = Path(m["amplifier_table_path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            amplifier = AmplifierTable.from_csv(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"mw.amplifier_table_path: {exc}", where("mw.amplifier_table_path")) from None
    try:
        mw = MwDrive(drive_rate=m["drive_rate"], linewidth_fwhm=m["linewidth_fwhm_mhz"],
                     dqt_weight=m["dqt_weight"], amplifier=amplifier)
    except DomainError as exc:
        raise ConfigError(str(exc), where("mw.drive_rate", "mw.linewidth_fwhm_mhz")) from None
    try:
        sweep = SweepSpec(s["f_min_mhz"], s["f_max_mhz"], s["f_step_mhz"])
    except DomainError as exc:
        raise ConfigError(str(exc), where("sweep.f_min_mhz", "sweep.f_max_mhz", "sweep.f_step_mhz")) from None
    return Config(zfs, pair, rates, mw, sweep, tuple(applied), tuple(notes),
                  hashlib.sha256(text.encode("utf-8")).hexdigest(), values)


def load_config(path) -> Config:
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_config(text, base_dir=path.parent)
