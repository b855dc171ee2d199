#!/usr/bin/env python3
"""Convert bundled copies of the UCI benchmark datasets into plain CSV.

The UCI archive itself is not always reachable, so the files are taken from
redistributions published on package registries:

  * keel_ds wheel (PyPI):        optdigits, penbased (pendigits), segment, letter
  * linfa-datasets crate:        winequality-red

Usage:
  pip download --no-deps keel-ds -d /tmp/keel
  curl -sO https://static.crates.io/crates/linfa-datasets/linfa-datasets-0.7.1.crate
  python3 scripts/prepare_datasets.py /tmp/keel/keel_ds-*.whl linfa-datasets-0.7.1.crate data/
"""
import csv
import gzip
import io
import sys
import tarfile
import zipfile


def keel_rows(text):
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        yield [c.strip() for c in line.split(",")]


def write_csv(path, rows, n_features, names=None):
    header = names or [f"f{i}" for i in range(n_features)] + ["label"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"{path}: {len(rows)} rows")


def main(wheel, crate, out):
    z = zipfile.ZipFile(wheel)

    def keel(name):
        return list(keel_rows(z.read(f"keel_ds/data/balanced/raw/{name}.dat").decode()))

    # optdigits ships as the official training file followed by the test file.
    rows = keel("optdigits")
    write_csv(f"{out}/optdigits.tra.csv", rows[:3823], 64)
    write_csv(f"{out}/optdigits.tes.csv", rows[3823:], 64)

    rows = keel("penbased")
    write_csv(f"{out}/pendigits.csv", rows, 16)

    rows = keel("segment")
    write_csv(f"{out}/segment.csv", rows, 19)

    rows = keel("letter")
    write_csv(f"{out}/letter.csv", rows, 16)

    with tarfile.open(crate) as tar:
        member = next(m for m in tar.getmembers() if m.name.endswith("winequality-red.csv.gz"))
        raw = gzip.decompress(tar.extractfile(member).read()).decode()
    reader = list(csv.reader(io.StringIO(raw)))
    names = [h.replace(" ", "_") for h in reader[0]]
    write_csv(f"{out}/winequality-red.csv", reader[1:], len(names) - 1, names)


if __name__ == "__main__":
    main(*sys.argv[1:4])
