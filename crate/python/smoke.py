"""Smoke test for the demoselect_py extension.

Build and run from the repository root:

    cargo build --release -p demoselect-py --features extension-module
    cp target/release/libdemoselect_py.so python/demoselect_py.so
    python3 python/smoke.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import demoselect_py as ds


def main():
    assert ds.tokenize("Hello, world") == ["hello", ",", "world"]
    assert ds.tokenize("你好", "char") == ["你", "好"]
    m = ds.score_pair("a b c", "a b c", "a")
    assert abs(m["RL"] - 1.0) < 1e-12, m
    assert len(ds.hash_text("some text", 64, 1)) == 64

    corpus = ds.Corpus.synth(seed=0, candidates=60, train=40, dev=20)
    print(corpus)
    cand = corpus.ids("candidates")
    dev = corpus.ids("dev")
    assert corpus.case(dev[0])["id"] == dev[0]

    emb = ds.Embeddings.hashed(corpus, dim=64, seed=0)
    assert emb.dim == 64 and len(emb) == len(corpus)

    with tempfile.TemporaryDirectory() as tmp:
        corpus.save(tmp)
        again = ds.Corpus.load(tmp)
        assert again.ids("dev") == dev
        path = os.path.join(tmp, "vectors.jsonl")
        emb.save(path)
        assert ds.Embeddings.load(path, again).vector(dev[0]) == emb.vector(dev[0])

    pol = ds.Policy.identity(64)
    ids, logps = pol.sample(emb, cand, dev[0], 3, seed=7)
    assert len(ids) == 3 and len(set(ids)) == 3
    assert all(lp <= 0 for lp in logps)
    again_ids, _ = pol.sample(emb, cand, dev[0], 3, seed=7)
    assert again_ids == ids
    recomputed = pol.log_probs(emb, cand, dev[0], ids)
    assert all(abs(a - b) < 1e-12 for a, b in zip(logps, recomputed))
    grad = pol.grad_logp(emb, cand, dev[0], ids)
    assert len(grad) == 64 * 64 and all(math.isfinite(g) for g in grad)

    knn = ds.select(corpus, emb, "knn", k=3)
    assert len(knn) == len(dev) and all(len(d) == 3 for _, d in knn)
    assert dict(knn)[dev[0]] == pol.greedy(emb, cand, dev[0], 3)

    rand_m = ds.evaluate(corpus, emb, "random", k=3)
    knn_m = ds.evaluate(corpus, emb, "knn", k=3)
    print("random", round(rand_m["RL"], 4), "knn", round(knn_m["RL"], 4))

    trained, history = ds.train(corpus, emb, epochs=2, shots=3, seed=0)
    assert len(history) == 2 and trained.dim == 64
    ours = ds.evaluate(corpus, emb, "policy", k=3, policy=trained)
    print("policy", round(ours["RL"], 4))

    try:
        ds.Corpus.load("/nonexistent/dir")
    except OSError:
        pass
    else:
        raise AssertionError("expected OSError")
    try:
        ds.select(corpus, emb, "policy")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
    print("smoke ok")


if __name__ == "__main__":
    main()
