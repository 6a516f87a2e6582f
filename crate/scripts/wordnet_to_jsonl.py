#!/usr/bin/env python3
"""Convert a WordNet 3.x dict/ directory into word-definition JSON lines.

Keeps single-token lowercase alphabetic lemmas, ranks them by tagged sense
frequency (the index files' tagsense_cnt), takes the top --words lemmas and
up to --max-defs glosses per lemma in WordNet's sense order. Example
sentences are stripped from glosses.

    python3 scripts/wordnet_to_jsonl.py /path/to/dict data/wordnet_en.jsonl
"""

import argparse
import json
import re
from pathlib import Path

POS = ["noun", "verb", "adj", "adv"]
WORD_RE = re.compile(r"^[a-z]{3,14}$")


def read_index(path):
    """lemma -> (tagsense_cnt, [synset offsets in sense order])"""
    out = {}
    for line in path.read_text(encoding="latin-1").splitlines():
        if line.startswith(" "):
            continue
        f = line.split()
        lemma, p_cnt = f[0], int(f[3])
        synset_cnt = int(f[2])
        tagged = int(f[5 + p_cnt])
        offsets = f[6 + p_cnt:6 + p_cnt + synset_cnt]
        out[lemma] = (tagged, offsets)
    return out


def read_glosses(path):
    out = {}
    for line in path.read_text(encoding="latin-1").splitlines():
        if line.startswith(" ") or "|" not in line:
            continue
        offset = line.split(" ", 1)[0]
        gloss = line.split("|", 1)[1].strip()
        parts = [p.strip() for p in gloss.split(";")]
        definition = "; ".join(p for p in parts if p and not p.startswith('"'))
        definition = re.sub(r"\s+", " ", definition).strip()
        if definition:
            out[offset] = definition
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dict_dir", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--words", type=int, default=5000)
    ap.add_argument("--max-defs", type=int, default=5)
    args = ap.parse_args()

    tagged = {}
    senses = {}
    glosses = {}
    for pos in POS:
        glosses[pos] = read_glosses(args.dict_dir / f"data.{pos}")
        for lemma, (cnt, offsets) in read_index(args.dict_dir / f"index.{pos}").items():
            if not WORD_RE.match(lemma):
                continue
            tagged[lemma] = tagged.get(lemma, 0) + cnt
            senses.setdefault(lemma, []).append([(pos, o) for o in offsets])

    ranked = sorted(tagged, key=lambda w: (-tagged[w], w))[: args.words]
    n_pairs = 0
    with args.out.open("w", encoding="utf-8") as out:
        for word in sorted(ranked):
            # round-robin over parts of speech, each in sense order
            lists = senses[word]
            order = []
            for i in range(max(len(l) for l in lists)):
                order.extend(l[i] for l in lists if i < len(l))
            seen = set()
            for pos, offset in order:
                d = glosses[pos].get(offset)
                if d is None or d in seen:
                    continue
                seen.add(d)
                out.write(json.dumps({"word": word, "definition": d, "lang": "en", "source": "wordnet"}) + "\n")
                n_pairs += 1
                if len(seen) == args.max_defs:
                    break
    print(f"{len(ranked)} words, {n_pairs} pairs -> {args.out}")


if __name__ == "__main__":
    main()
