import numpy as np
import pytest

import ratnet


def small_benchmark():
    cfg = ratnet.BenchmarkConfig()
    cfg.pretrain_tasks = 3
    cfg.pretrain_counts = (120, 30, 60)
    cfg.fewshot_counts = (20, 10, 60)
    cfg.longtail_counts = (300, 44, 110)
    cfg.zeroshot_counts = (0, 0, 90)
    return ratnet.make_benchmark(cfg)


@pytest.fixture(scope="module")
def trained():
    bench = small_benchmark()
    model = ratnet.Model.create(ratnet.ModelConfig(), bench.pretraining, seed=42)
    cfg = ratnet.TrainConfig()
    cfg.epochs = 15
    student, teacher, log = ratnet.pretrain(model, bench.pretraining, cfg)
    return bench, student, teacher, log


def test_metrics_match_hand_counts():
    assert ratnet.auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75)
    assert ratnet.auc([0.5, 0.5], [1, 0]) == pytest.approx(0.5)
    assert ratnet.f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert ratnet.mcc([1, 0, 1, 0], [1, 0, 1, 0]) == pytest.approx(1.0)
    assert ratnet.average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    t, p, df = ratnet.welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0 and p == pytest.approx(1.0) and df > 0


def test_benchmark_is_deterministic():
    a, b = small_benchmark(), small_benchmark()
    assert a.manifest() == b.manifest()
    ds = a.pretraining[0]
    x = ds.features("train")
    assert x.shape == (120, 16)
    assert len(ds.labels("train")) == 120
    assert np.array_equal(x, b.pretraining[0].features("train"))


def test_pretraining_learns_and_roundtrips(trained, tmp_path):
    bench, student, _, log = trained
    assert log.startswith("iteration,task_id,loss")
    assert len(log.strip().splitlines()) == 1 + 15 * 3
    for ds in bench.pretraining:
        assert student.accuracy(ds) > 0.8
    path = tmp_path / "model.ckpt"
    student.save(str(path))
    again = ratnet.Model.load(str(path))
    assert again.checksum() == student.checksum()
    assert ratnet.Model.from_bytes(student.to_bytes()).checksum() == student.checksum()


def test_embedding_and_relevance_shapes(trained):
    bench, student, _, _ = trained
    x = bench.pretraining[1].features("test")
    assert student.embed(x).shape == (60, 16)
    w = student.relevance(x, "T2")
    assert w.shape == (60, 3)
    assert np.allclose(w.sum(axis=1), 1.0)
    with pytest.raises(ratnet.RatnetError):
        student.embed(np.zeros((2, 5)))


def test_zero_shot_and_few_shot(trained):
    bench, student, _, _ = trained
    cmap = ratnet.category_map(bench.pretraining, bench.zero_shot)
    report = ratnet.zero_shot(student, bench.zero_shot, cmap, resamples=50, seed=1)
    lo, hi = report["macro_auc_ci"]
    assert lo <= report["macro_auc"] <= hi
    assert 0.0 <= report["macro_auc"] <= 1.0
    aucs = ratnet.few_shot(student, bench.few_shot, k=3, runs=5, seed=7)
    assert len(aucs) == 5
    assert aucs == ratnet.few_shot(student, bench.few_shot, k=3, runs=5, seed=7)


def test_cli_entry_point(tmp_path):
    code, out, err = ratnet.run_cli(["--help"])
    assert code == 0 and "gen" in out
    code, _, err = ratnet.run_cli(["gen", "--config", str(tmp_path / "missing.conf")])
    assert code != 0 and err


def test_bad_config_raises():
    cfg = ratnet.BenchmarkConfig()
    cfg.pretrain_tasks = 0
    with pytest.raises(ratnet.ConfigError):
        ratnet.make_benchmark(cfg)
