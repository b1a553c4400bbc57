#!/usr/bin/env python3
# Copyright 2026 The BPLF Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Writes the 5,000-image MNIST subset shipped with mlxtend as IDX files.

The subset lives in mlxtend/data/data/mnist_5k.csv.gz (784 pixels then the
label per row). It is read from an installed mlxtend, from a wheel given with
--wheel, or from a wheel fetched with `pip download`.

The CSV is sorted by digit. Rows are written in a fixed shuffled order so
that any prefix covers all ten classes.
"""

import argparse
import gzip
import io
import pathlib
import random
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def csv_from_installed():
    try:
        import mlxtend  # noqa: F401
    except ImportError:
        return None
    path = pathlib.Path(sys.modules["mlxtend"].__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    return path.read_bytes() if path.exists() else None


def csv_from_wheel(wheel):
    with zipfile.ZipFile(wheel) as zf:
        return zf.read(MEMBER)


def csv_from_pip():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet", "-d", tmp, "mlxtend==0.24.0"],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        return csv_from_wheel(wheel)


def write_idx(path, dims, payload):
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims)) + b"".join(struct.pack(">I", d) for d in dims)
    path.write_bytes(header + bytes(payload))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/mnist", help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="seed of the row order")
    parser.add_argument("--wheel", help="mlxtend wheel to read instead of downloading")
    parser.add_argument("--if-missing", action="store_true", help="do nothing when both files already exist")
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    if args.if_missing and (out / "images-idx3-ubyte").exists() and (out / "labels-idx1-ubyte").exists():
        print(f"{out} already populated")
        return

    raw = csv_from_wheel(args.wheel) if args.wheel else (csv_from_installed() or csv_from_pip())
    rows = []
    for row in io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw)), encoding="ascii"):
        values = [int(float(v)) for v in row.strip().split(",") if v]
        if len(values) != 785:
            raise SystemExit(f"unexpected row length {len(values)}")
        rows.append(values)
    random.Random(args.seed).shuffle(rows)
    pixels, labels = bytearray(), bytearray()
    for values in rows:
        pixels.extend(values[:784])
        labels.append(values[784])
    count = len(labels)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte", [count, 28, 28], pixels)
    write_idx(out / "labels-idx1-ubyte", [count], labels)
    print(f"wrote {count} images to {out}")


if __name__ == "__main__":
    main()
