"""``spinsim`` command-line front end.

Exit codes: 0 success, 2 usage, 3 configuration, 4 input/output,
5 model or domain error.  Failures print ``spinsim: <category>: <message>``
on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .census import ingest, summarize, write_report
from .config import Config, load_config, parse_config
from .errors import ConfigError, IngestError, SpinSimError
from .experiments import (
    PulseSequence,
    Segment,
    SweepSpec,
    angle_scan,
    cw_sweep,
    fan_scan,
    pulsed_transient,
    write_rows,
)
from .fitting import FitOptions, fit_angle_series, fit_zfs, read_observations
from .photodynamics import MANIFOLDS, background_for_dip, g2
from .spin import LABELINGS, FieldVector, ZfsParams, doublet_frequency

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_MODEL = 0, 2, 3, 4, 5

log = logging.getLogger("spinsim")


class UsageError(Exception):
    pass


# --- argument helpers -----------------------------------------------------

def parse_range(text: str) -> np.ndarray:
    """``start:stop:step`` (stop included when on the grid) or a comma list."""
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise UsageError(f"range {text!r} needs step > 0 and stop >= start")
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            return start + step * np.arange(n)
        return np.array([float(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise UsageError(f"cannot parse range {text!r}; use start:stop:step or a,b,c") from None


def parse_triple(text: str) -> FieldVector:
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"--b-mt expects bx,by,bz in mT, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--b-mt expects three components, got {len(parts)}")
    return FieldVector(*parts)


def field_from_args(args, required=True) -> FieldVector | None:
    if args.b_mt is not None and (args.b_mag is not None or args.theta_deg is not None):
        raise UsageError("give either --b-mt or --b-mag/--theta-deg, not both")
    if args.b_mt is not None:
        return parse_triple(args.b_mt)
    if args.b_mag is not None:
        return FieldVector.from_angle(args.b_mag, args.theta_deg or 0.0)
    if args.theta_deg is not None:
        raise UsageError("--theta-deg needs --b-mag")
    if required:
        raise UsageError("a field is required: --b-mt bx,by,bz or --b-mag M [--theta-deg T]")
    return None


def add_field_args(p):
    p.add_argument("--b-mt", help="field vector bx,by,bz in mT")
    p.add_argument("--b-mag", type=float, help="field magnitude in mT")
    p.add_argument("--theta-deg", type=float, help="angle from out-of-plane, degrees")


def sweep_from_args(args, cfg: Config) -> SweepSpec:
    s = cfg.sweep
    return SweepSpec(args.f_min if args.f_min is not None else s.f_min,
                     args.f_max if args.f_max is not None else s.f_max,
                     args.f_step if args.f_step is not None else s.f_step)


def add_sweep_args(p):
    p.add_argument("--f-min", type=float, help="override sweep.f_min_mhz")
    p.add_argument("--f-max", type=float, help="override sweep.f_max_mhz")
    p.add_argument("--f-step", type=float, help="override sweep.f_step_mhz")


def config_from_args(args) -> Config:
    if args.config is None:
        return parse_config("")
    return load_config(args.config)


# --- manifests ------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifest(output, argv, cfg: Config | None, inputs=()) -> Path:
    """Provenance record written next to ``output``."""
    data = {
        "command": list(argv),
        "config_sha256": cfg.sha256 if cfg is not None else None,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "output": {"path": str(output), "sha256": sha256_file(output)},
        "tool": "spinsim",
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = manifest_path(output)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _emit(path, rows, argv, cfg, inputs=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_rows(path, rows)
    write_manifest(path, argv, cfg, inputs)
    log.info("wrote %s", path)


def _config_inputs(args, cfg):
    files = []
    if getattr(args, "config", None):
        files.append(Path(args.config))
    amp = cfg.values.get("mw", {}).get("amplifier_table_path") if cfg else ""
    if amp:
        p = Path(amp)
        if args.config and not p.is_absolute():
            p = Path(args.config).parent / p
        files.append(p)
    return files


# --- subcommands ----------------------------------------------------------

def cmd_spectrum(args, argv):
    cfg = config_from_args(args)
    manifolds = tuple(args.manifolds.split(",")) if args.manifolds else MANIFOLDS
    spec = cw_sweep(cfg.model(), field_from_args(args), sweep_from_args(args, cfg), manifolds)
    _emit(args.out, spec.rows(), argv, cfg, _config_inputs(args, cfg))


def cmd_fan(args, argv):
    cfg = config_from_args(args)
    fan = fan_scan(cfg.model(), parse_range(args.b_list), sweep_from_args(args, cfg))
    _emit(args.out, fan.rows(), argv, cfg, _config_inputs(args, cfg))
    if args.lines:
        _emit(args.lines, fan.line_rows(), argv, cfg, _config_inputs(args, cfg))


def cmd_angle(args, argv):
    cfg = config_from_args(args)
    angles = parse_range(args.angles)
    corr = parse_range(args.corrections) if args.corrections else None
    if corr is not None and len(corr) == 1:
        corr = np.full_like(angles, corr[0])
    scan = angle_scan(cfg.zfs, args.b_mag, angles, corr, labeling=args.labeling)
    _emit(args.out, scan.rows(), argv, cfg, _config_inputs(args, cfg))


def _segment(text: str) -> Segment:
    try:
        laser, mw, duration = text.split(",")
        flag = {"1": True, "0": False, "on": True, "off": False}
        return Segment(flag[laser.strip().lower()], flag[mw.strip().lower()], float(duration))
    except (ValueError, KeyError):
        raise UsageError(f"--segment expects laser,mw,duration_us (e.g. 1,0,2.5), got {text!r}") from None


def cmd_pulse(args, argv):
    cfg = config_from_args(args)
    if not args.segment:
        raise UsageError("pulse needs at least one --segment laser,mw,duration_us")
    seq = PulseSequence(tuple(_segment(s) for s in args.segment))
    fld = field_from_args(args)
    f_mw = args.mw_freq if args.mw_freq is not None else doublet_frequency(fld, cfg.zfs.g_factor)
    model = replace(cfg.model(), mw=cfg.mw.at(f_mw))
    trace = pulsed_transient(model, seq, args.resolution, fld)
    _emit(args.out, trace.rows(), argv, cfg, _config_inputs(args, cfg))


def cmd_g2(args, argv):
    cfg = config_from_args(args)
    if args.background is not None and args.dip is not None:
        raise UsageError("give either --background or --dip, not both")
    b = args.background or 0.0
    if args.dip is not None:
        b = background_for_dip(args.dip)
    taus = parse_range(args.tau)
    vals = g2(cfg.zfs, cfg.pair, cfg.rates, field_from_args(args), taus, b)
    rows = [("tau_us", "g2")] + [(repr(float(t)), repr(float(v))) for t, v in zip(taus, vals)]
    _emit(args.out, rows, argv, cfg, _config_inputs(args, cfg))


def _fit_rows(res):
    header = ["d_mhz", "e_mhz", "g_factor", "tilt_deg", "field_scale", "residual_rms_mhz",
              "converged", "n_restarts_used", "unidentifiable"]
    if isinstance(res.field_scale, dict):
        scale = ";".join(f"{a:g}={s!r}" for a, s in sorted(res.field_scale.items()))
    else:
        scale = repr(res.field_scale)
    return [header, [repr(res.d_mhz), repr(res.e_mhz), repr(res.g_factor), repr(res.tilt_deg), scale,
                     repr(res.residual_rms), str(res.converged).lower(), res.n_restarts_used,
                     "+".join(res.unidentifiable)]]


def cmd_fit(args, argv):
    obs = read_observations(args.inp)
    opts = FitOptions(fit_g=not args.fix_g, g_fixed=args.g)
    res = fit_zfs(obs, opts)
    _emit(args.out, _fit_rows(res), argv, None, [args.inp])


def cmd_fit_angle(args, argv):
    obs = read_observations(args.inp)
    opts = FitOptions(scale_mode=args.scale_mode, g_fixed=args.g, labeling=args.labeling)
    res = fit_angle_series(obs, opts)
    _emit(args.out, _fit_rows(res), argv, None, [args.inp])


def cmd_census(args, argv):
    result = ingest(args.inp)
    summary = summarize(result, bin_nm=args.bin_nm)
    for path in write_report(summary, args.report):
        write_manifest(path, argv, None, [args.inp])
    for r in result.rejections:
        log.warning("rejected line %d: %s", r.row, r.reason)


def cmd_figures(args, argv):
    """Data tables behind the spectrum, fan and angle figures."""
    cfg = config_from_args(args)
    out = Path(args.out_dir)
    model = cfg.model()
    inputs = _config_inputs(args, cfg)
    f1 = replace(model, zfs=ZfsParams(850.0, 0.0, cfg.zfs.g_factor))
    spec = cw_sweep(f1, FieldVector.axial(66.0), SweepSpec(500.0, 4000.0, 1.0))
    _emit(out / "fig1f.csv", spec.rows(), argv, cfg, inputs)
    fan = fan_scan(model, parse_range("12:160:4"), SweepSpec(10.0, 9010.0, 6.0))
    _emit(out / "fig4a.csv", fan.rows(), argv, cfg, inputs)
    _emit(out / "fig4a_lines.csv", fan.line_rows(), argv, cfg, inputs)
    scan = angle_scan(model.zfs, 66.0, parse_range("0:90:5"), labeling="branch")
    _emit(out / "fig4d.csv", scan.rows(), argv, cfg, inputs)


# --- dispatch -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spinsim", description="Spin-complex ODMR simulation, fitting and survey statistics.")
    p.add_argument("--version", action="version", version=f"spinsim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log applied defaults and outputs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="configuration file (defaults when omitted)")
        sp.add_argument("--out", required=name != "figures", help="output CSV path")
        return sp

    sp = with_config("spectrum", "CW ODMR spectrum at one field")
    add_field_args(sp)
    add_sweep_args(sp)
    sp.add_argument("--manifolds", help="comma list from lms,rms (default both)")
    sp.set_defaults(func=cmd_spectrum)

    sp = with_config("fan", "CW spectra over a list of axial fields")
    sp.add_argument("--b-list", required=True, help="fields in mT, start:stop:step or a,b,c")
    sp.add_argument("--lines", help="also write linear Zeeman guide lines here")
    add_sweep_args(sp)
    sp.set_defaults(func=cmd_fan)

    sp = with_config("angle", "transition frequencies vs field angle")
    sp.add_argument("--b-mag", type=float, required=True, help="field magnitude in mT")
    sp.add_argument("--angles", required=True, help="degrees, start:stop:step or a,b,c")
    sp.add_argument("--corrections", help="per-angle magnitude multipliers (one value or one per angle)")
    sp.add_argument("--labeling", choices=LABELINGS, default="character",
                    help="name lines by dominant m_s (character) or follow them through the rotation (branch)")
    sp.set_defaults(func=cmd_angle)

    sp = with_config("pulse", "PL transient for a laser/MW pulse sequence")
    add_field_args(sp)
    sp.add_argument("--segment", action="append", help="laser,mw,duration_us; repeat in order")
    sp.add_argument("--resolution", type=float, default=0.01, help="sampling interval, us")
    sp.add_argument("--mw-freq", type=float, help="MW frequency during MW-on segments, MHz (default: doublet line)")
    sp.set_defaults(func=cmd_pulse)

    sp = with_config("g2", "photon correlation g2(tau)")
    add_field_args(sp)
    sp.add_argument("--tau", default="0:2:0.01", help="delays in us, start:stop:step")
    sp.add_argument("--background", type=float, help="uncorrelated background level b")
    sp.add_argument("--dip", type=float, help="choose b so that g2(0) equals this value")
    sp.set_defaults(func=cmd_g2)

    fit_help = {"fit": "fit D, E and g to resonances at several fields",
                "fit-angle": "fit D, E, tilt and field scale to a rotated-field series"}
    for name, func in (("fit", cmd_fit), ("fit-angle", cmd_fit_angle)):
        sp = sub.add_parser(name, help=fit_help[name])
        sp.add_argument("--in", dest="inp", required=True, help="observation CSV")
        sp.add_argument("--out", required=True, help="result CSV path")
        sp.add_argument("--g", type=float, default=2.0, help="g-factor when held fixed")
        if name == "fit":
            sp.add_argument("--fix-g", action="store_true", help="hold g at --g")
        else:
            sp.add_argument("--scale-mode", choices=("none", "single", "per-angle"), default="single")
            sp.add_argument("--labeling", choices=LABELINGS, default="branch",
                            help="how the observed line labels were assigned (default branch)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("census", help="emitter survey statistics")
    sp.add_argument("--in", dest="inp", required=True, help="survey CSV")
    sp.add_argument("--report", required=True, help="output directory")
    sp.add_argument("--bin-nm", type=float, default=10.0, help="ZPL histogram bin width")
    sp.set_defaults(func=cmd_census)

    sp = with_config("figures", "write fig1f.csv, fig4a.csv and fig4d.csv")
    sp.add_argument("--out-dir", required=True, help="output directory")
    sp.set_defaults(func=cmd_figures)
    return p


def _fail(category: str, message, code: int) -> int:
    print(f"spinsim: {category}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; see spinsim --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="spinsim: %(levelname)s: %(message)s")
        args.func(args, ["spinsim", *argv])
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except IngestError as exc:
        return _fail("io", exc, EXIT_IO)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except SpinSimError as exc:
        return _fail(exc.category, exc, EXIT_MODEL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
