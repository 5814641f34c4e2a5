#!/usr/bin/env python3
"""End-to-end smoke test for the retroseq_py extension module.

Build the module first:

    cargo build -p retroseq-py --release

then run this script from the repository root:

    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    names = ["libretroseq_py.so", "retroseq_py.so", "libretroseq_py.dylib"]
    for profile in ("release", "debug"):
        for name in names:
            cand = ROOT / "target" / profile / name
            if cand.exists():
                loader = importlib.machinery.ExtensionFileLoader("retroseq_py", str(cand))
                spec = importlib.util.spec_from_loader("retroseq_py", loader)
                mod = importlib.util.module_from_spec(spec)
                loader.exec_module(mod)
                print(f"loaded {cand}")
                return mod
    sys.exit("no built extension found; run `cargo build -p retroseq-py --release` first")


def check(label, cond):
    print(f"{'ok' if cond else 'FAIL'}: {label}")
    if not cond:
        sys.exit(1)


def main():
    rs = load_module()

    # Tokenization and normalization primitives.
    toks = rs.lex("foo.bar(x, 'hi')")
    check("lex splits punctuation", toks == ["foo", ".", "bar", "(", "x", ",", "'hi'", ")"])
    intent, code, mapping = rs.normalize_pair(
        "append 'x' to `my_list`", "my_list.append('x')"
    )
    check("pair normalization abstracts both sides",
          "var0" in code and "var0" in intent and mapping.get("var0") == "my_list")
    check("snippet normalization renames positionally",
          rs.normalize_snippet("alpha.beta(gamma)").startswith("var0"))
    check("intent tokenizer lowercases",
          rs.tokenize_intent("Sort THE list") == ["sort", "the", "list"])

    # BLEU sanity: perfect match scores 100.
    refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w", "v"]]
    check("self-BLEU is 100", abs(rs.corpus_bleu(refs, refs) - 100.0) < 1e-9)

    # Synthetic corpus -> datastore.
    train, dev, test = rs.synth(seed=7, pairs=120, dup_rate=0.5)
    check("synth split sizes", len(train) + len(dev) + len(test) == 120)
    db = rs.Database.build(train, chunk_size=4, hybrid=True, embed_dim=16, salt="smoke")
    check("database has entries", len(db) > 0 and db.chunk_size == 4 and db.mode == "hybrid")

    hits = db.query_intent(train[0][0], k=2)
    check("intent query returns k hits", len(hits) == 2)
    chunks, continuations, dist, src = hits[0]
    check("nearest intent hit is the source itself", src == 0 and dist < 1e-5)

    r = db.overlap(test)
    check("test overlap is a rate", 0.0 <= r <= 1.0)

    with tempfile.TemporaryDirectory() as td:
        db_path = f"{td}/smoke.rsdb"
        db.save(db_path)
        db2 = rs.Database.load(db_path)
        check("database round-trips", len(db2) == len(db) and db2.mode == "hybrid")

        # Tiny training run: enough to prove the loop turns over.
        model, metrics = rs.train(
            db, train, dev_pairs=dev[:8],
            d_model=16, heads=2, nl_layers=1, nb_layers=1, dec_layers=2,
            dropout=0.0, epochs=2, batch_size=16, lr=1e-3, seed=0,
            max_code_len=48, max_nl_len=24,
        )
        check("one metrics row per epoch", len(metrics) == 2)
        losses = [m[1] for m in metrics]
        check("loss is finite and falls", all(l == l for l in losses) and losses[-1] < losses[0])

        out1 = model.generate(db, train[0][0], beam=2, max_len=24)
        out2 = model.generate(db, train[0][0], beam=2, max_len=24)
        check("generation is deterministic", out1 == out2 and isinstance(out1, str))

        bleu, hyps = model.evaluate(db, test[:4], beam=1, max_len=24)
        check("evaluate returns a score per pair", len(hyps) == 4 and 0.0 <= bleu <= 100.0)

        model_path = f"{td}/smoke.rsmd"
        model.save(model_path)
        model2 = rs.Model.load(model_path)
        check("checkpoint round-trips bit-exactly", model2.to_bytes() == model.to_bytes())
        check("reloaded model decodes identically",
              model2.generate(db, train[0][0], beam=2, max_len=24) == out1)
        check("config is JSON", '"d_model":16' in model.config_json().replace(" ", ""))
        check("param count is positive", model.n_params > 0)

    print("smoke test passed")


if __name__ == "__main__":
    main()
