#!/usr/bin/env python3
"""Convert MovieLens-100K into an mkbe bundle.

Reads the atomic files ml-100k.{inter,item,user} (optionally gzipped, latin-1)
and writes schema.tsv, {train,valid,test}.tsv, numeric.tsv, categorical.tsv,
text.tsv and a run config into the output directory.

Ratings become five relations rated_1..rated_5 and are split at random,
keeping every entity in train; attributes all go to train.
"""

import argparse
import gzip
import json
import os
import random
import sys


def read_rows(path):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path += ".gz"
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt", encoding="latin-1", newline="") as f:
        lines = f.read().splitlines()
    header = [h.split(":")[0] for h in lines[0].split("\t")]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            print(f"{path}:{lineno}: skipped malformed row", file=sys.stderr)
            continue
        yield dict(zip(header, fields))


def clean(text):
    return " ".join(text.replace("\t", " ").split())


SCHEMA = [
    *[(f"rated_{k}", "entity", f"rating={k}", "R") for k in range(1, 6)],
    ("release_year", "numeric", "year", "M"),
    ("genre", "categorical", "", "M"),
    ("title", "short_text", "", "T"),
    ("age", "numeric", "", "U"),
    ("gender", "categorical", "", "U"),
    ("occupation", "categorical", "", "U"),
    ("zip", "categorical", "", "U"),
]


def build(raw_dir, out_dir, seed, valid, test):
    os.makedirs(out_dir, exist_ok=True)
    ratings = [(f"u{r['user_id']}", f"rated_{int(float(r['rating']))}", f"m{r['item_id']}")
               for r in read_rows(os.path.join(raw_dir, "ml-100k.inter"))]
    rng = random.Random(seed)
    order = list(range(len(ratings)))
    rng.shuffle(order)
    n_valid, n_test = round(valid * len(ratings)), round(test * len(ratings))
    # Every user and movie keeps at least one train rating.
    degree = {}
    for s, _, o in ratings:
        degree[s] = degree.get(s, 0) + 1
        degree[o] = degree.get(o, 0) + 1
    held, train = [], []
    for i in order:
        s, _, o = ratings[i]
        if len(held) < n_valid + n_test and degree[s] > 1 and degree[o] > 1:
            degree[s] -= 1
            degree[o] -= 1
            held.append(i)
        else:
            train.append(i)
    splits = {
        "valid": sorted(held[:n_valid]),
        "test": sorted(held[n_valid:]),
        "train": sorted(train),
    }
    for name, idx in splits.items():
        with open(os.path.join(out_dir, f"{name}.tsv"), "w", encoding="utf-8", newline="\n") as f:
            f.writelines("\t".join(ratings[i]) + "\n" for i in idx)

    numeric, categorical, text = [], [], []
    for m in read_rows(os.path.join(raw_dir, "ml-100k.item")):
        e = f"m{m['item_id']}"
        if m["release_year"].isdigit():
            numeric.append((e, "release_year", m["release_year"]))
        categorical += [(e, "genre", g) for g in m["class"].split()]
        if clean(m["movie_title"]):
            text.append((e, "title", clean(m["movie_title"])))
    for u in read_rows(os.path.join(raw_dir, "ml-100k.user")):
        e = f"u{u['user_id']}"
        numeric.append((e, "age", u["age"]))
        categorical += [(e, "gender", u["gender"]), (e, "occupation", u["occupation"]), (e, "zip", u["zip_code"])]
    for name, rows in (("numeric", numeric), ("categorical", categorical), ("text", text)):
        with open(os.path.join(out_dir, f"{name}.tsv"), "w", encoding="utf-8", newline="\n") as f:
            f.writelines("\t".join(r) + "\n" for r in rows)
    with open(os.path.join(out_dir, "schema.tsv"), "w", encoding="utf-8", newline="\n") as f:
        f.writelines("\t".join(r) + "\n" for r in SCHEMA)

    config = {
        "output_dir": "out",
        "seed": seed,
        "kb": {"schema": "schema.tsv", "train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv",
               "numeric": "numeric.tsv", "categorical": "categorical.tsv", "text": "text.tsv",
               "year_filter": True},
        "train": {"model": {"dim": 64, "numeric_selu": True}, "learning_rate": 0.01, "batch_size": 512,
                  "epochs": 150, "label_smoothing": 0.1, "eval_every": 5, "patience": 2,
                  "groups": ["R", "M", "U"]},
        "eval": {"ks": [1, 2, 3]},
        "impute": {"targets": [{"relation": "release_year"}, {"relation": "genre"}]},
    }
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(config, f, indent=2)
        f.write("\n")

    entities = {s for s, _, _ in ratings} | {o for _, _, o in ratings}
    stats = {"entities": len(entities), "links": len(ratings), **{k: len(v) for k, v in splits.items()},
             "numeric": len(numeric), "categorical": len(categorical), "text": len(text)}
    print(json.dumps(stats))
    return stats


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--valid", type=float, default=0.1)
    p.add_argument("--test", type=float, default=0.1)
    a = p.parse_args(argv)
    build(a.raw_dir, a.out_dir, a.seed, a.valid, a.test)


if __name__ == "__main__":
    main()
