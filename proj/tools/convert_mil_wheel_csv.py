#!/usr/bin/env python3
"""Convert the classical MIL benchmark CSVs shipped in the `mil` PyPI wheel
(mil/data/datasets/csv/*.csv, rows `label,bag_id,f0,...`) to MILCSV
(`bag_id,label,f0,...`).

    pip download mil==1.0.5 --no-deps -d /tmp/mil
    python3 tools/convert_mil_wheel_csv.py /tmp/mil/mil-1.0.5-py3-none-any.whl data/

Bag ids become `<dataset>_<id>`. Values are written with repr(), which for
the integer-valued MUSK features yields plain integers.
"""
import csv
import io
import pathlib
import sys
import zipfile

DATASETS = ("musk1", "musk2", "elephant")


def fmt(v: str) -> str:
    x = float(v)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def convert(rows, name):
    out = []
    for row in rows:
        if not row:
            continue
        label, bag = int(float(row[0])), int(float(row[1]))
        out.append(",".join([f"{name}_{bag}", str(label)] + [fmt(v) for v in row[2:]]))
    return "\n".join(out) + "\n"


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    wheel, dest = pathlib.Path(sys.argv[1]), pathlib.Path(sys.argv[2])
    dest.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        for name in DATASETS:
            text = z.read(f"mil/data/datasets/csv/{name}.csv").decode()
            body = convert(csv.reader(io.StringIO(text)), name)
            (dest / f"{name}.milcsv").write_text(body, newline="\n")
            print(f"wrote {dest / (name + '.milcsv')}")


if __name__ == "__main__":
    main()
