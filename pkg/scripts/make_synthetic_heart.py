#!/usr/bin/env python3
"""Write the four synthetic heart-disease site files into a directory."""
import argparse

from dcwb.dataio import clean_heart, heart_schema, load_heart_file
from dcwb.synthetic import write_heart_files


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    args = ap.parse_args()
    hs = heart_schema()
    for site, path in write_heart_files(args.out_dir).items():
        raw = load_heart_file(path, hs)
        kept = clean_heart(raw, schema=hs)
        print(f"{site:12s} {path.name:28s} raw {raw.n_rows:4d}  complete cases {kept.n_rows:4d}")


if __name__ == "__main__":
    main()
