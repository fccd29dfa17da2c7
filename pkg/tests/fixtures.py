"""Census fixtures rebuilt from the published aggregates."""

from __future__ import annotations

import csv
import io

import numpy as np

from spinsim.census import CSV_HEADER


def emitter_rows(material, n, flake="F1", area=900.0, n_active=0, long_zpls=0, rng=None, zpl_mode=580.0):
    """``n`` emitters, ``n_active`` ODMR-active and ``long_zpls`` with ZPL in (700, 850]."""
    rng = rng or np.random.default_rng(0)
    rows = []
    for i in range(n):
        if i < long_zpls:
            zpl = float(rng.uniform(705.0, 845.0))
        else:
            zpl = float(np.clip(rng.normal(zpl_mode, 12.0), 545.0, 695.0))
        active = i < n_active
        rows.append({
            "emitter_id": f"{material}-{flake}-{i}",
            "flake_id": flake,
            "material": material,
            "zpl_nm": f"{zpl:.2f}",
            "fwhm_nm": "5.0",
            "map_area_um2": f"{area:g}",
            "odmr_active": "1" if active else "0",
            "transitions": "S1_2" if active else "",
        })
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def density_rows():
    """Flakes of 1800 um^2 whose per-tile densities are 3, 6.5 and 18."""
    rows = []
    for flake, count in (("A", 6), ("B", 13), ("C", 36)):
        rows += emitter_rows("hBN", count, flake=flake, area=1800.0, rng=np.random.default_rng(len(flake) + count))
    return rows
