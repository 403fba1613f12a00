"""Assemble data/shakespeare.txt from the Gutenberg texts in the `shakespeare`
sdist on PyPI (public domain; Gutenberg boilerplate already stripped upstream).

    pip download --no-deps shakespeare==0.6
    tar xzf shakespeare-0.6.tar.gz
    python scripts/build_corpus.py shakespeare-0.6/shksprdata/texts data/shakespeare.txt

Each output document is a run of consecutive paragraphs from one work, cut
once it reaches PASSAGE_BYTES; documents are separated by a blank line.
Single speeches are too short for their byte histograms to say much about
style, which is what the non-i.i.d. sharding clusters on.
"""

import re
import sys
from pathlib import Path

WORKS = [
    "sonnets", "rape_of_lucrece", "lovers_complaint", "passionate_pilgrim",
    "phoenix_and_the_turtle", "hamlet", "macbeth", "lear", "othello",
    "romeo_and_juliet", "julius_caesar", "tempest", "midsummer_nights_dream",
    "twelfth_night", "much_ado_about_nothing", "henry_v", "richard_iii",
    "as_you_like_it",
]
PASSAGE_BYTES = 2000


def passages(text: str):
    paras = [p.strip("\n") for p in re.split(r"\n(?:[ \t]*\n)+", text) if p.strip()]
    cur, size = [], 0
    for p in paras:
        cur.append(p)
        size += len(p) + 1
        if size >= PASSAGE_BYTES:
            yield "\n".join(cur)
            cur, size = [], 0
    if cur:
        yield "\n".join(cur)


def main(src: str, dst: str) -> None:
    docs = []
    for name in WORKS:
        docs.extend(passages(Path(src, f"{name}_gut.txt").read_text("ascii").strip()))
    Path(dst).write_text("\n\n".join(docs) + "\n", "ascii")
    print(f"{len(docs)} documents -> {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
