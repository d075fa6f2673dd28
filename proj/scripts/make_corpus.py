#!/usr/bin/env python3
"""Generate a deterministic synthetic text corpus for desk-scale runs.

Draws words from a Zipf-distributed vocabulary of pronounceable nonsense
words, groups them into sentences and paragraphs, and writes plain ASCII
text. The same seed and size always produce byte-identical output, which
keeps training runs reproducible across machines.
"""

import argparse
import random


def build_vocab(rng: random.Random, size: int) -> list[str]:
    onsets = ["b", "br", "c", "ch", "d", "dr", "f", "fl", "g", "gr", "h",
              "j", "k", "l", "m", "n", "p", "pl", "pr", "r", "s", "sh",
              "sk", "sl", "sp", "st", "t", "th", "tr", "v", "w", "z"]
    nuclei = ["a", "ai", "e", "ea", "ee", "i", "o", "oa", "oo", "ou", "u"]
    codas = ["", "b", "ck", "d", "g", "l", "m", "n", "nd", "ng", "nt",
             "p", "r", "rd", "s", "sh", "st", "t", "th"]
    vocab: list[str] = []
    seen = set()
    while len(vocab) < size:
        syllables = rng.choice([1, 1, 2, 2, 2, 3])
        word = "".join(rng.choice(onsets) + rng.choice(nuclei) +
                       rng.choice(codas) for _ in range(syllables))
        if word not in seen:
            seen.add(word)
            vocab.append(word)
    return vocab


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output text file")
    ap.add_argument("--bytes", type=int, default=1_000_000,
                    help="approximate output size in bytes (default 1MB)")
    ap.add_argument("--seed", type=int, default=7, help="generator seed")
    ap.add_argument("--vocab", type=int, default=2000,
                    help="vocabulary size (default 2000)")
    args = ap.parse_args()

    rng = random.Random(args.seed)
    vocab = build_vocab(rng, args.vocab)
    # Zipf-like weights: rank r gets weight 1/(r+2.7).
    weights = [1.0 / (r + 2.7) for r in range(len(vocab))]

    out: list[str] = []
    total = 0
    sentences_in_par = 0
    while total < args.bytes:
        words = rng.choices(vocab, weights=weights,
                            k=rng.randint(4, 14))
        words[0] = words[0].capitalize()
        sentence = " ".join(words) + rng.choice([".", ".", ".", "?", "!"])
        sentences_in_par += 1
        if sentences_in_par >= rng.randint(3, 7):
            sentence += "\n\n"
            sentences_in_par = 0
        else:
            sentence += " "
        out.append(sentence)
        total += len(sentence)

    with open(args.out, "w", encoding="ascii", newline="") as fh:
        fh.write("".join(out))
    print(f"wrote {total} bytes to {args.out}")


if __name__ == "__main__":
    main()
