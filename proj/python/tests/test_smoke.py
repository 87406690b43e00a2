import math

import numpy as np
import pytest

import cte


def test_log_mel_shape():
    t = np.arange(16000) / 16000.0
    f = cte.log_mel(0.5 * np.sin(2 * math.pi * 440.0 * t))
    assert f.shape == (98, 80)
    assert np.all(np.isfinite(f))


def test_model_embeds_fixed_dimension():
    model = cte.Model({"layers": "2", "model_dim": "32", "ffn_dim": "64", "heads": "2", "top_k": "2"}, seed=3)
    rng = np.random.default_rng(0)
    segs = [rng.normal(size=(n, 80)) for n in (1, 10, 57)]
    e = model.embed(segs)
    assert e.shape == (3, 32)
    again = cte.Model({"layers": "2", "model_dim": "32", "ffn_dim": "64", "heads": "2", "top_k": "2"}, seed=3)
    assert np.array_equal(e, again.embed(segs))


def test_checkpoint_round_trip(tmp_path):
    model = cte.Model({"layers": "1", "model_dim": "16", "ffn_dim": "32", "heads": "2", "top_k": "1"}, seed=1)
    path = tmp_path / "m.ctec"
    model.save(path)
    back = cte.Model.load(path)
    x = [np.ones((5, 80))]
    assert np.array_equal(model.embed(x), back.embed(x))
    assert back.parameter_count == model.parameter_count


def test_metrics():
    assert cte.roc_auc([0.9, 0.1, 0.5], [True, False, False]) == 1.0
    assert cte.pr_ap([0.9, 0.1, 0.5], [False, True, False]) == pytest.approx(1.0 / 3.0)
    assert cte.psed(["a", "b", "c"], ["a", "x", "c"]) == 1
    emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    r = cte.same_different(emb, ["x", "x", "y", "y"])
    assert r["ap_roc"] == 1.0 and r["n_same"] == 2 and r["n_diff"] == 4
    assert cte.collapse_metric(np.ones((4, 3))) == 0.0
    coords, explained = cte.pca_project(emb, 2)
    assert coords.shape == (4, 1)  # the points lie on a line
    coords, explained = cte.pca_project(np.array([[1.0, 0.0, 0.2], [0.0, 1.0, 0.0], [0.5, 0.5, 1.0], [0.0, 0.0, 0.0]]), 2)
    assert coords.shape == (4, 2)
    assert explained[0] >= explained[1]
    assert cte.downsampling_baseline(np.ones((30, 80))).shape == (800,)
    assert cte.dtw_distance(np.ones((4, 3)), np.ones((6, 3))) == pytest.approx(0.0)


def test_gradient_check():
    ok, err = cte.check_loss_gradients({"layers": "2", "model_dim": "16", "ffn_dim": "32", "heads": "2", "top_k": "2"})
    assert ok and err < 1e-4


def test_config_errors():
    with pytest.raises(ValueError):
        cte.Model({"top_k": "9", "layers": "2"})
    with pytest.raises(ValueError):
        cte.Model({"no_such_key": "1"})


def test_cli_pipeline(tmp_path):
    n = cte.generate_corpus(tmp_path / "corpus", {"word_types": "3", "instances_per_type": "3", "speakers": "4", "seed": "2"})
    assert n == 9
    code, _, _ = cte.run(["featurize", "--alignments", str(tmp_path / "corpus" / "alignments.tsv"),
                          "--out-dir", str(tmp_path / "feats")])
    assert code == 0
    code, out, _ = cte.run(["eval-samediff", "--method", "dtw", "--alignments", str(tmp_path / "corpus" / "alignments.tsv"),
                            "--features", str(tmp_path / "feats"), "--out-dir", str(tmp_path / "eval")])
    assert code == 0 and "ap_roc=" in out
    assert (tmp_path / "eval" / "ap_summary.csv").exists()
    code, _, err = cte.run(["train", "--config", "missing.cfg", "--pairs", "p", "--features", "f", "--out-dir", str(tmp_path)])
    assert code == 2 and "missing.cfg" in err
