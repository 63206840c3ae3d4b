import json
import math

import numpy as np
import pytest

semdvc = pytest.importorskip("semdvc")


def test_metric_examples():
    assert semdvc.tiou((0, 2), (1, 3)) == pytest.approx(1 / 3)
    assert semdvc.bleu([["the"] * 4], [["the", "cat"]], 1)[0] == pytest.approx(0.25)
    s = semdvc.proposal_prf({"v": [(0, 10, 0.9), (20, 30, 0.8)]}, {"v": [(0, 10)]}, [0.5])
    assert s["precision"] == pytest.approx(0.5)
    assert s["f1"] == pytest.approx(2 / 3)
    assert semdvc.weight(1.0, 100.0, 0.75) == pytest.approx(10 ** -1.5)


def test_building_blocks():
    pe = semdvc.positional_encoding(3, 6)
    assert list(pe[0]) == [0, 1, 0, 1, 0, 1]
    out = semdvc.attention(np.random.rand(2, 4), np.random.rand(5, 4), np.eye(5))
    assert np.allclose(out.sum(axis=1), 1.0)
    assert semdvc.fit_anchors([1, 1, 9, 9], 2) == [1, 9]


def test_descriptor_chain():
    cfg = semdvc.SynthConfig()
    cfg.num_videos = 20
    feats, ann, topics = semdvc.synth_corpus(cfg)
    assert len(feats) == 20 and set(feats) == set(ann)
    x = np.vstack(list(feats.values()))
    centers = semdvc.fit_codebook(x, 30, seed=1)
    assert centers.shape == (30, cfg.feature_dim)
    labels = [semdvc.assign(centers, f) for f in feats.values()]
    z = semdvc.cooccurrences(labels, 30, 2)
    assert np.allclose(z, z.T)
    w, loss = semdvc.train_embeddings(z, d_emb=8, max_iters=50)
    assert w.shape == (30, 8) and math.isfinite(loss)


def test_errors_are_translated(tmp_path):
    with pytest.raises(semdvc.SemdvcError):
        semdvc.bleu([], [])
    with pytest.raises(semdvc.SemdvcError, match="train-proposals"):
        semdvc.run_stage("propose", _config(tmp_path))


def _config(tmp):
    path = tmp / "cfg.json"
    path.write_text(json.dumps({
        "paths": {"out": str(tmp / "out")},
        "synth": {"num_videos": 10, "clips_per_video": [10, 12], "num_topics": 2, "clusters_per_topic": 3,
                  "feature_dim": 4},
        "codebook": {"k": 6},
        "embed": {"d_emb": 4, "max_iters": 30},
        "transformer": {"d_model": 8, "num_heads": 2, "num_layers": 1, "d_ffn": 16, "max_len": 12},
        "captioner": {"epochs": 2, "lr": 0.001, "decode_max_len": 12},
        "proposals": {"num_anchors": 3, "kernel_sizes": [3], "hidden": 8, "epochs": 2, "num_proposals": 4},
        "caption": {"top": 4},
    }))
    return path


def test_pipeline_end_to_end(tmp_path):
    cfg = _config(tmp_path)
    semdvc.run_all(cfg)
    report = semdvc.read_report(tmp_path / "out" / "eval" / "report.kv")
    assert 0.0 <= report["proposal_f1"] <= 1.0
    assert "bleu4_gt" in report
    assert semdvc.stage_names()[-1] == "eval"
