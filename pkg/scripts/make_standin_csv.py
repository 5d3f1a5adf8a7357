"""Regenerate data/cloud_aerosol_standin.csv.

A 200-usable-step synthetic stand-in for the cloud-aerosol observation
layout: effect COD, cause AOD, six meteorological proxy columns, realistic
scales and offsets, plus three rows with missing cells to exercise the
drop-row path. Deterministic.
"""

import csv
import sys
from pathlib import Path

import numpy as np

N_USABLE = 200
MISSING_ROWS = {40, 97, 155}  # 0-based row indices carrying a missing cell
COLUMNS = ["t", "COD", "AOD", "SST", "EIS", "w500", "RH700", "RH850", "RH900"]


def build_rows() -> list[list[str]]:
    n = N_USABLE + len(MISSING_ROWS)
    rng = np.random.default_rng(20240917)
    z = np.empty(n)
    prev = 0.0
    for t in range(n):
        prev = 0.9 * prev + rng.normal(0.0, 0.4)
        z[t] = prev
    sst = 291.0 + 1.6 * np.tanh(z) + rng.normal(0.0, 0.3, n)
    eis = 4.0 - 1.1 * z + rng.normal(0.0, 0.5, n)
    w500 = 0.02 * z + rng.normal(0.0, 0.015, n)
    rh700 = 45.0 + 6.0 * np.tanh(z + 0.3) + rng.normal(0.0, 3.0, n)
    rh850 = 60.0 + 8.0 * np.tanh(z - 0.2) + rng.normal(0.0, 3.5, n)
    rh900 = 72.0 + 5.0 * np.tanh(z) + rng.normal(0.0, 2.5, n)
    aod = np.empty(n)
    prev = 0.12
    for t in range(n):
        prev = 0.5 * prev + 0.03 * z[t] + 0.06 + rng.normal(0.0, 0.02)
        aod[t] = max(prev, 0.01)
    cod = np.empty(n)
    prev = 9.0
    for t in range(n):
        prev = 0.45 * prev + 2.2 * z[t] + 14.0 * aod[t] + 3.0 + rng.normal(0.0, 1.0)
        cod[t] = max(prev, 0.5)

    rows = []
    for t in range(n):
        row = [str(t), f"{cod[t]:.6f}", f"{aod[t]:.6f}", f"{sst[t]:.6f}",
               f"{eis[t]:.6f}", f"{w500[t]:.6f}", f"{rh700[t]:.6f}",
               f"{rh850[t]:.6f}", f"{rh900[t]:.6f}"]
        if t in MISSING_ROWS:
            row[1 + (t % 7)] = ""  # blank out one role column
        rows.append(row)
    return rows


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else (
        Path(__file__).resolve().parent.parent / "data" / "cloud_aerosol_standin.csv"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        writer.writerows(build_rows())
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
