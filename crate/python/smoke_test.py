"""Smoke test for the bcpred_py extension module.

Build and run:
    cargo build -p bcpred-py --release
    cp target/release/libbcpred_py.so python/bcpred_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import bcpred_py as bc


def main():
    assert bc.classify_realization(["uh-huh", "[noise]"]) == "Continuer"
    assert bc.classify_realization(["yeah", "mm-hmm"]) == "Assessment"
    try:
        bc.classify_realization(["[laughter]"])
    except ValueError:
        pass
    else:
        raise AssertionError("empty realization accepted")

    assert bc.frame_count(1500) == 148
    assert bc.frame_count(2000) == 198

    sr = 8000
    tone = [0.5 * math.sin(2 * math.pi * 200 * i / sr) for i in range(sr * 3 // 2)]
    m = bc.mfcc(tone, sr)
    assert len(m) == 148 and all(len(r) == 13 for r in m)
    p = bc.prosodic(tone, sr)
    assert abs(p[70][0] - 200.0) < 2.0, p[70]

    assert bc.conv_full_height([1, 2, 3, 4], 1, [1, 1], 0.5) == [3.5, 5.5, 7.5]
    probs, loss = bc.softmax_xent([0.0, 0.0, 0.0], 1)
    assert abs(sum(probs) - 1) < 1e-12 and abs(loss - math.log(3)) < 1e-12

    report = json.loads(bc.eval_report([0, 1, 2, 2], [0, 1, 2, 0]))
    assert abs(report["accuracy"] - 0.75) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        fixture = os.path.join(tmp, "fixture")
        counts = bc.generate_synthetic(fixture)
        assert sum(counts) > 0

        table = bc.EmbeddingTable(os.path.join(fixture, "embeddings.txt"))
        assert len(table.grid(["so"], 5)) == 5 * table.dim

        out = os.path.join(tmp, "run")
        cfg = os.path.join(fixture, "config.toml")
        splits = [os.path.join(fixture, f"{s}.txt") for s in ("train", "valid", "test")]
        code = bc.run_cli([
            "--config", cfg, "annotate",
            "--manifest", os.path.join(fixture, "manifest.jsonl"),
            "--speakers", os.path.join(fixture, "speakers.csv"),
            "--splits", *splits,
            "--out", os.path.join(out, "annotated"),
        ])
        assert code == 0, code
        labeled = os.path.join(out, "annotated", "labeled.jsonl")
        code = bc.run_cli([
            "--config", cfg, "features",
            "--labeled", labeled,
            "--audio-dir", os.path.join(fixture, "audio"),
            "--transcript-dir", os.path.join(fixture, "transcripts"),
            "--embeddings", os.path.join(fixture, "embeddings.txt"),
            "--out", os.path.join(out, "cache"),
        ])
        assert code == 0, code
        code = bc.run_cli([
            "--config", cfg, "train",
            "--labeled", labeled,
            "--cache", os.path.join(out, "cache"),
            "--splits", *splits,
            "--epochs", "2",
            "--out", os.path.join(out, "model"),
        ])
        assert code == 0, code

        pred = bc.Predictor(os.path.join(out, "model", "best.bcck"))
        cfg_json = json.loads(pred.config_json)
        n = cfg_json["lexical"]["n_words"]
        grid = table.grid(["so", "anyway"], n)
        frames = bc.frame_count(1500)
        acoustic = [0.0] * (frames * 13)
        probs = pred.predict_proba(grid, acoustic, pred.unknown_listener)
        assert len(probs) == 3 and abs(sum(probs) - 1) < 1e-5
        assert pred.predict(grid, acoustic, 0) in ("NoBc", "Continuer", "Assessment")

    print("smoke test ok")


if __name__ == "__main__":
    main()
