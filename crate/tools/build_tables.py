#!/usr/bin/env python3
"""Regenerate crates/core/data/{lexicon.tsv,features.tsv}.

Inputs are the CMU Pronouncing Dictionary (pip package `cmudict`) and the
panphon articulatory feature table (pip package `panphon`):

    pip download cmudict panphon --no-deps -d /tmp/wheels
    python3 tools/build_tables.py /tmp/wheels/cmudict-*.whl /tmp/wheels/panphon-*.whl
"""
import csv
import io
import re
import sys
import zipfile
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"

# ARPAbet (stress stripped) -> IPA segment ids. Diphthongs are split into
# two segments so every id is a single base symbol (or affricate).
ARPABET = {
    "AA": ["ɑ"], "AE": ["æ"], "AH": ["ʌ"], "AO": ["ɔ"], "AW": ["a", "ʊ"],
    "AY": ["a", "ɪ"], "EH": ["ɛ"], "ER": ["ə", "ɹ"], "EY": ["e", "ɪ"],
    "IH": ["ɪ"], "IY": ["i"], "OW": ["o", "ʊ"], "OY": ["ɔ", "ɪ"],
    "UH": ["ʊ"], "UW": ["u"],
    "B": ["b"], "CH": ["tʃ"], "D": ["d"], "DH": ["ð"], "F": ["f"],
    "G": ["ɡ"], "HH": ["h"], "JH": ["dʒ"], "K": ["k"], "L": ["l"],
    "M": ["m"], "N": ["n"], "NG": ["ŋ"], "P": ["p"], "R": ["ɹ"],
    "S": ["s"], "SH": ["ʃ"], "T": ["t"], "TH": ["θ"], "V": ["v"],
    "W": ["w"], "Y": ["j"], "Z": ["z"], "ZH": ["ʒ"],
}
# unstressed AH is schwa
AH0 = ["ə"]

# segment id -> panphon row key
PANPHON_KEY = {"tʃ": "t͡ʃ", "dʒ": "d͡ʒ"}


def read_member(wheel, suffix):
    with zipfile.ZipFile(wheel) as z:
        name = next(n for n in z.namelist() if n.endswith(suffix))
        return z.read(name).decode("utf-8")


def main(cmu_wheel, panphon_wheel):
    lex_lines = []
    seen = set()
    inventory = set()
    for line in read_member(cmu_wheel, "cmudict.dict").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        word, *phones = line.split()
        word = re.sub(r"\(\d+\)$", "", word)
        if word in seen or not re.fullmatch(r"[a-z][a-z'.\-]*", word):
            continue
        seen.add(word)
        segs = []
        for p in phones:
            base = p.rstrip("012")
            segs.extend(AH0 if p == "AH0" else ARPABET[base])
        inventory.update(segs)
        lex_lines.append(f"{word}\t{' '.join(segs)}")

    rows = {}
    reader = csv.reader(io.StringIO(read_member(panphon_wheel, "data/ipa_all.csv")))
    header = next(reader)
    for r in reader:
        rows.setdefault(r[0], r[1:])
    feat_lines = ["segment\t" + "\t".join(header[1:])]
    for seg in sorted(inventory):
        feat_lines.append(seg + "\t" + "\t".join(rows[PANPHON_KEY.get(seg, seg)]))

    (OUT / "lexicon.tsv").write_text("\n".join(lex_lines) + "\n", encoding="utf-8")
    (OUT / "features.tsv").write_text("\n".join(feat_lines) + "\n", encoding="utf-8")
    print(f"{len(lex_lines)} lexicon entries, {len(inventory)} segments")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
