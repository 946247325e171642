#!/usr/bin/env python3
"""Regenerate the vendored CSV datasets in data/ from scikit-learn.

Tests never call this; the CSVs are committed.
"""
import csv
import pathlib

from sklearn.datasets import load_breast_cancer, load_diabetes

OUT = pathlib.Path(__file__).resolve().parent.parent / "data"


def write(name, bunch):
    path = OUT / name
    header = [str(f).replace(" ", "_") for f in bunch.feature_names] + ["target"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, y in zip(bunch.data, bunch.target):
            w.writerow([repr(float(v)) for v in row] + [repr(float(y)) if name.startswith("diabetes") else str(int(y))])
    print(f"wrote {path} ({len(bunch.target)} rows)")


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    write("diabetes.csv", load_diabetes(scaled=False))
    write("breast_cancer.csv", load_breast_cancer())
