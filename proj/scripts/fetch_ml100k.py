#!/usr/bin/env python3
"""Rebuild MovieLens-100K u.data / u.item in their published layout.

The GroupLens archive is the canonical source; pass --zip to use a local copy
of ml-100k.zip. Without it, the ratings and item tables bundled in the
pytorch-widedeep wheel on PyPI are converted back to the original files.

Requires pandas + pyarrow for the wheel route.
"""

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL = "pytorch-widedeep==1.7.0"
DATA = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"
ITEMS = "pytorch_widedeep/datasets/data/MovieLens100k_items.parquet.brotli"


def from_zip(zip_path: Path, out: Path) -> None:
    with zipfile.ZipFile(zip_path) as zf:
        for name in ("u.data", "u.item"):
            (out / name).write_bytes(zf.read(f"ml-100k/{name}"))


def from_wheel(out: Path) -> None:
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL],
            check=True,
        )
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            ratings = pd.read_parquet(io.BytesIO(zf.read(DATA)))
            items = pd.read_parquet(io.BytesIO(zf.read(ITEMS)))

    ratings = ratings[["user_id", "movie_id", "rating", "timestamp"]]
    ratings.to_csv(out / "u.data", sep="\t", header=False, index=False)

    items = items.copy()
    items["video_release_date"] = ""
    items = items.fillna("")
    lines = ["|".join(str(v) for v in row) for row in items.itertuples(index=False)]
    (out / "u.item").write_text("\n".join(lines) + "\n", encoding="latin-1")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/ml-100k"))
    ap.add_argument("--zip", type=Path, help="local ml-100k.zip from GroupLens")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    if args.zip:
        from_zip(args.zip, args.out)
    else:
        from_wheel(args.out)

    n = sum(1 for _ in open(args.out / "u.data"))
    print(f"wrote {args.out}/u.data ({n} ratings) and u.item")
    return 0 if n == 100000 else 1


if __name__ == "__main__":
    sys.exit(main())
