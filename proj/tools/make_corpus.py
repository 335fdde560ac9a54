#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Builds data/shakespeare.jsonl from the Gutenberg texts shipped in the
`shakespeare` sdist on PyPI (pip download --no-deps --no-binary :all: shakespeare).

Each play is cut into documents of at least MIN_BYTES at paragraph breaks.
"""
import argparse
import json
import pathlib
import tarfile

PLAYS = [
    "hamlet", "macbeth", "lear", "othello", "romeo_and_juliet",
    "julius_caesar", "tempest", "twelfth_night",
]
MIN_BYTES = 4000


def split_play(text):
    docs, cur = [], []
    size = 0
    for para in text.replace("\r\n", "\n").split("\n\n"):
        if not para.strip():
            continue
        cur.append(para.strip("\n"))
        size += len(para) + 2
        if size >= MIN_BYTES:
            docs.append("\n\n".join(cur) + "\n")
            cur, size = [], 0
    if cur:
        docs.append("\n\n".join(cur) + "\n")
    return docs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("sdist", help="path to shakespeare-0.6.tar.gz")
    ap.add_argument("--out", default="data/shakespeare.jsonl")
    args = ap.parse_args()
    with tarfile.open(args.sdist) as tar:
        members = {pathlib.Path(m.name).name: m for m in tar.getmembers()}
        with open(args.out, "w", encoding="utf-8") as out:
            for play in PLAYS:
                raw = tar.extractfile(members[f"{play}_gut.txt"]).read().decode("utf-8")
                for doc in split_play(raw):
                    out.write(json.dumps({"text": doc, "source": play}) + "\n")


if __name__ == "__main__":
    main()
