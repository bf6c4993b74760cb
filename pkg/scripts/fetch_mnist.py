#!/usr/bin/env python3
"""Download the four MNIST IDX files into data/mnist (or a given directory).

The package itself never touches the network; this helper exists so a fresh
clone can populate the data directory. Set MNIST_MIRROR to point at an
internal mirror if the public ones are unreachable.
"""

import argparse
import gzip
import os
import struct
import sys
import urllib.request
from pathlib import Path

FILES = [
    ("train-images-idx3-ubyte.gz", 2051),
    ("train-labels-idx1-ubyte.gz", 2049),
    ("t10k-images-idx3-ubyte.gz", 2051),
    ("t10k-labels-idx1-ubyte.gz", 2049),
]

MIRRORS = [
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
]


def verify(path: Path, magic: int) -> None:
    with gzip.open(path, "rb") as f:
        found, count = struct.unpack(">II", f.read(8))
    if found != magic:
        raise ValueError(f"{path.name}: magic {found}, expected {magic}")
    print(f"  {path.name}: magic {found}, {count} items")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data/mnist")
    args = parser.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    mirrors = ([os.environ["MNIST_MIRROR"]] if os.environ.get("MNIST_MIRROR")
               else MIRRORS)
    for name, magic in FILES:
        out = dest / name
        if out.exists():
            print(f"already present: {out}")
            verify(out, magic)
            continue
        last_err = None
        for base in mirrors:
            url = base.rstrip("/") + "/" + name
            try:
                print(f"fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as r:
                    out.write_bytes(r.read())
                verify(out, magic)
                break
            except Exception as e:  # try the next mirror
                last_err = e
                out.unlink(missing_ok=True)
        else:
            print(f"failed to fetch {name}: {last_err}", file=sys.stderr)
            return 1
    print(f"MNIST ready under {dest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
