#!/usr/bin/env python3
"""Extract a plain-text language-modeling corpus from the comments of sqlite3.h.

SQLite is in the public domain, and its public header carries a large amount of
English prose in its comment blocks. This script turns that prose into a
pre-tokenized corpus (one sentence per line, lowercase, punctuation split off,
numbers replaced by N) and writes interleaved train/valid/test splits.

    python3 scripts/make_sqlite_corpus.py /usr/include/sqlite3.h data/sqlite-comments
"""
import re
import sys
from pathlib import Path

TOKEN = re.compile(r"[a-z_][a-z0-9_]*(?:'[a-z]+)?|[0-9][0-9.,x]*|[^\sa-z0-9_]")


def comment_paragraphs(src):
    for block in re.findall(r"/\*(.*?)\*/", src, re.S):
        lines = []
        for line in block.splitlines():
            line = re.sub(r"^\s*\*+", "", line).strip()
            if set(line) <= set("*-=/"):
                line = ""
            lines.append(line)
        for para in "\n".join(lines).split("\n\n"):
            para = " ".join(para.split())
            if para:
                yield para


def clean(para):
    para = re.sub(r"<[^>]*>", " ", para)
    para = re.sub(r"\[([^\]|]*)\|([^\]]*)\]", r"\2", para)
    para = re.sub(r"\[([^\]]*)\]", r"\1", para)
    para = para.replace("^", " ")
    para = re.sub(r"&[a-z]+;", " ", para)
    return " ".join(para.split())


def sentences(para):
    for sent in re.split(r"(?<=[.?!])\s+(?=[A-Z(\"])", para):
        toks = []
        for tok in TOKEN.findall(sent.lower()):
            if tok[0].isdigit():
                tok = "N"
            toks.append(tok)
        # code-heavy fragments carry little language structure
        letters = sum(t.isalpha() for t in toks)
        if len(toks) >= 4 and letters >= 0.6 * len(toks):
            yield " ".join(toks)


def main():
    header, out = Path(sys.argv[1]), Path(sys.argv[2])
    text = header.read_text(encoding="utf-8", errors="replace")
    sents = [s for p in comment_paragraphs(text) for s in sentences(clean(p))]
    splits = {"train": [], "valid": [], "test": []}
    for i, s in enumerate(sents):
        slot = i % 10
        if slot <= 5:
            splits["train"].append(s)
        elif slot == 8:
            splits["valid"].append(s)
        elif slot == 9:
            splits["test"].append(s)
        # slots 6 and 7 are left out to keep the training slice near 50k tokens
    out.mkdir(parents=True, exist_ok=True)
    for name, lines in splits.items():
        (out / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        ntok = sum(len(l.split()) + 1 for l in lines)
        print(f"{name}: {len(lines)} sentences, {ntok} tokens (with end-of-sentence)")


if __name__ == "__main__":
    main()
