#!/usr/bin/env python3
"""Fetch the 5,000-digit MNIST subset (CSV, 784 pixels then the label per row).

The file ships inside the mlxtend wheel; this downloads the wheel with pip and
extracts it to data/mnist_5k.csv.gz.
"""
import argparse
import glob
import pathlib
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "mnist_5k.csv.gz"))
    ap.add_argument("--version", default="0.24.0", help="mlxtend wheel version")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    if out.exists():
        print(f"{out} already present")
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", f"mlxtend=={args.version}",
                        "--no-deps", "--quiet", "-d", tmp], check=True)
        wheel = glob.glob(f"{tmp}/mlxtend-*.whl")[0]
        with zipfile.ZipFile(wheel) as z:
            data = z.read(MEMBER)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"wrote {out} ({len(data)} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
