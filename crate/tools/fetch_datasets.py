#!/usr/bin/env python3
"""Builds data/*.csv and data/manifest.txt from the KEEL repository copies
shipped in the `keel-ds` wheel on PyPI.

    python3 tools/fetch_datasets.py                 # downloads keel-ds 0.2.5
    python3 tools/fetch_datasets.py --wheel keel_ds-0.2.5-py3-none-any.whl

Categorical columns (german) are one-hot encoded. The label stays the last
column; the Rust loader maps the two label values to -1/+1.
"""

import argparse
import io
import pathlib
import subprocess
import sys
import tempfile
import zipfile

# output name -> path inside the wheel
SOURCES = {
    "austra": "keel_ds/data/balanced/raw/australian.dat",
    "breast": "keel_ds/data/balanced/raw/wisconsin.dat",
    "diabetes": "keel_ds/data/balanced/raw/pima.dat",
    "german": "keel_ds/data/balanced/raw/german.dat",
    "haberman": "keel_ds/data/imbalanced/raw/haberman.dat",
    "heart": "keel_ds/data/balanced/raw/heart.dat",
    "ionosphere": "keel_ds/data/balanced/raw/ionosphere.dat",
    "liver": "keel_ds/data/balanced/raw/bupa.dat",
    "pima": "keel_ds/data/balanced/raw/pima.dat",
    "wdbc": "keel_ds/data/balanced/raw/wdbc.dat",
}


def is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def convert(text):
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        rows.append([f.strip() for f in line.split(",")])
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("ragged rows")
    columns = []
    for j in range(width - 1):
        col = [r[j] for r in rows]
        if all(is_number(v) for v in col):
            columns.append([col])
        else:
            levels = sorted(set(col))
            columns.append([["1" if v == lv else "0" for v in col] for lv in levels])
    flat = [c for group in columns for c in group]
    header = [f"x{k + 1}" for k in range(len(flat))] + ["label"]
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for i, r in enumerate(rows):
        out.write(",".join([c[i] for c in flat] + [r[-1]]) + "\n")
    return out.getvalue(), len(rows), len(flat)


def fetch_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "keel-ds==0.2.5", "--no-deps", "-d", dest],
        check=True,
    )
    return next(pathlib.Path(dest).glob("keel_ds-*.whl"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data"))
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        args.out.mkdir(parents=True, exist_ok=True)
        lines = ["# name        path              label"]
        with zipfile.ZipFile(wheel) as z:
            for name, member in sorted(SOURCES.items()):
                csv, n, d = convert(z.read(member).decode("utf-8"))
                (args.out / f"{name}.csv").write_text(csv)
                lines.append(f"{name:<13} {name + '.csv':<17} last")
                print(f"{name}: {n} x {d}")
    (args.out / "manifest.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
