#!/usr/bin/env python3
"""Convert headerless ``label,bag_id,f1,...,fm`` benchmark files to the
``bag_id,label,f1,...,fm`` layout read by :func:`stemil.data.load_mil_csv`.

The classic Musk1/Musk2/Elephant/Fox/Tiger benchmarks are distributed in this
headerless layout, e.g. inside the ``mil`` wheel on PyPI
(``mil/data/datasets/csv/musk1.csv``). Usage::

    python scripts/convert_mil_csv.py musk1.csv data/musk1.csv
    python scripts/convert_mil_csv.py --from-wheel mil-1.0.5-py3-none-any.whl musk1 data/musk1.csv
"""
import argparse
import csv
import io
import sys
import zipfile


def convert(lines, out):
    writer = csv.writer(out, lineterminator="\n")
    header_written = False
    for lineno, row in enumerate(csv.reader(lines), start=1):
        if not row:
            continue
        label, bag_id, feats = row[0].strip(), row[1].strip(), [v.strip() for v in row[2:]]
        if label not in ("0", "1"):
            sys.exit(f"line {lineno}: label {label!r} is not 0/1")
        if not header_written:
            writer.writerow(["bag_id", "label"] + [f"f{j + 1}" for j in range(len(feats))])
            header_written = True
        writer.writerow([bag_id, label] + feats)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--from-wheel", metavar="WHEEL", help="read NAME from the mil wheel instead of a file")
    ap.add_argument("source", help="input CSV, or dataset name with --from-wheel")
    ap.add_argument("dest")
    args = ap.parse_args(argv)
    if args.from_wheel:
        with zipfile.ZipFile(args.from_wheel) as zf:
            text = zf.read(f"mil/data/datasets/csv/{args.source}.csv").decode("utf-8")
        lines = io.StringIO(text)
    else:
        lines = open(args.source, encoding="utf-8", newline="")
    with lines, open(args.dest, "w", encoding="utf-8", newline="") as out:
        convert(lines, out)


if __name__ == "__main__":
    main()
