import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneegrade import grader as G
from kneegrade import locator as LOC
from kneegrade import pipeline as P
from kneegrade import synthgen as S
from kneegrade.pipeline import SplitSpec


def tiny(name, **generator):
    cfg = P.bundled_config(f"{name}.json")
    cfg["generator"].update(generator)
    cfg["metrics"]["bootstrap_resamples"] = 50
    cfg["grader"]["epochs"] = 1
    cfg.setdefault("finetune", {})["epochs"] = 1
    if "locator" in cfg:
        cfg["locator"]["epochs"] = 1
    return cfg


def test_split_sizes_example():
    train, val, test = P.split(list(range(100)), SplitSpec(0.7, 0.1, 0.2, seed=0))
    assert (len(train), len(val), len(test)) == (70, 10, 20)
    # remainders go to train
    train, val, test = P.split(list(range(13)), SplitSpec(0.7, 0.1, 0.2, seed=0))
    assert (len(train), len(val), len(test)) == (10, 1, 2)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(-0.1, 0.6, 0.5)
    with pytest.raises(ValueError):
        SplitSpec(0.7, 0.1, 0.1)


fractions = st.tuples(st.integers(0, 100), st.integers(0, 100), st.integers(0, 100)).filter(lambda t: sum(t) > 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), fractions, st.integers(0, 10**6), st.booleans())
def test_split_partition_property(n, parts, seed, stratified):
    total = sum(parts)
    spec = SplitSpec(parts[0] / total, parts[1] / total, parts[2] / total, seed, stratified)
    labels = [(i * 7) % 5 for i in range(n)]
    idx = P.split_indices(n, spec, labels)
    joined = np.concatenate(idx)
    assert sorted(joined.tolist()) == list(range(n))
    assert all(np.array_equal(a, b) for a, b in zip(idx, P.split_indices(n, spec, labels)))
    if stratified:
        for g in range(5):
            members = [i for i in range(n) if labels[i] == g]
            counts = [sum(1 for i in part if labels[i] == g) for part in idx]
            # val/test are floored (under by < 1); train takes both remainders (over by < 2)
            for count, frac in zip(counts[1:], (spec.val_frac, spec.test_frac)):
                assert -1e-9 <= frac * len(members) - count < 1 + 1e-9
            assert -1e-9 <= counts[0] - spec.train_frac * len(members) < 2


def test_stratified_single_grade():
    items = [S.KneeCrop(np.zeros((64, 64)), 3, "left", i) for i in range(5)]
    parts = P.split(items, SplitSpec(0.7, 0.1, 0.2, seed=1, stratified=True))
    seen = sorted(c.sample_index for p in parts for c in p)
    assert seen == list(range(5))


def test_dataset_handle_logs_phases():
    log = P.AccessLog()
    h = P.DatasetHandle([1, 2, 3], "test", log)
    log.phase = "eval"
    assert list(h) == [1, 2, 3] and h[0] == 1 and len(h) == 3
    assert log.reads("test") == {"eval"}


def test_compare_heads_shares_split_and_never_leaks(tmp_path):
    res = P.run_experiment(tiny("compare_heads", n=60), tmp_path)
    assert set(res.reports) == {"classification", "regression"}
    assert res.reports["classification"].total == res.reports["regression"].total == 12
    assert res.access.reads("test") == {"eval"}
    assert (tmp_path / "compare_heads" / "report_regression.json").exists()
    assert (tmp_path / "compare_heads" / "confusion_classification.csv").read_text().startswith("actual,pred_0")


def test_domain_shift_three_reports(tmp_path):
    res = P.run_experiment(tiny("domain_shift", n=40, target_n=40), tmp_path)
    assert list(res.reports) == ["source_on_source", "source_on_target", "finetuned_on_target"]
    assert res.access.reads("target-test") == {"eval"}
    assert res.access.reads("source-test") == {"eval"}
    assert "finetune" in res.access.reads("target-train")


def test_experiment_deterministic(tmp_path):
    cfg = tiny("compare_heads", n=40)
    a = P.run_experiment(copy.deepcopy(cfg), tmp_path / "a")
    b = P.run_experiment(copy.deepcopy(cfg), tmp_path / "b")
    for k in a.reports:
        assert a.reports[k].to_json() == b.reports[k].to_json()
    assert ((tmp_path / "a" / "compare_heads" / "report_regression.json").read_bytes()
            == (tmp_path / "b" / "compare_heads" / "report_regression.json").read_bytes())


def test_invalid_config_lists_everything_before_work(tmp_path):
    cfg = {"kind": "nope", "generator": {"n": 3, "profile": "mars"}, "split": {"train": 2}, "extra": 1}
    with pytest.raises(P.ConfigError) as info:
        P.run_experiment(cfg, tmp_path / "never")
    assert len(info.value.problems) >= 4
    assert not (tmp_path / "never").exists()
    with pytest.raises(P.ConfigError):
        P.validate_config({"kind": "compare_heads", "generator": {"n": 20},
                           "split": {"train": 0.5, "val": 0.1, "test": 0.1}})


def test_bundled_configs_valid():
    for name in ("compare_heads.json", "domain_shift.json", "pipeline.json"):
        P.validate_config(P.bundled_config(name))


def test_dataset_dir_round_trip(tmp_path):
    samples = S.sample_dataset(3, S.OAI_WEIGHTS, seed=8)
    S.write_dataset(samples, tmp_path, seed=8, profile="source")
    back = P.load_dataset_dir(tmp_path)
    for a, b in zip(samples, back):
        assert a.image == b.image
        for ka, kb in zip(a.knees, b.knees):
            assert ka.grade == kb.grade and ka.side == kb.side
            assert np.allclose(ka.box, kb.box) and np.array_equal(ka.mask, kb.mask)


@pytest.fixture(scope="module")
def stages():
    samples = S.sample_dataset(16, S.OAI_WEIGHTS, seed=6)
    loc, _ = LOC.train_locator(samples, LOC.LocatorConfig(epochs=1, seed=0))
    grader, _ = G.train_grader("regression", S.knee_crops(samples), G.TrainConfig(epochs=1))
    return samples, loc, grader


def test_infer_radiograph_report(stages):
    samples, loc, grader = stages
    rep = P.infer_radiograph(loc, grader, samples[0].image, "s0")
    assert sorted(k.side for k in rep.knees) == ["left", "right"]
    d = rep.to_dict()
    assert d["image_id"] == "s0" and d["grader"] == grader.config_hash and d["locator"] == loc.config_hash
    for k in rep.knees:
        assert k.grade in range(5)
    batch = P.infer_batch(loc, grader, [samples[0].image])
    assert [int(g) for g in batch[0][2]] == [rep.knee("left").grade, rep.knee("right").grade]


def test_stage_errors_are_attributed(stages):
    samples, loc, grader = stages
    with pytest.raises(P.StageError) as info:
        P.infer_radiograph(LOC.build_locator(), grader, samples[0].image)
    assert info.value.stage == "locate"
    with pytest.raises(P.StageError) as info:
        P.infer_radiograph(loc, loc, samples[0].image)
    assert info.value.stage == "grade"


def test_pipeline_experiment_smoke(tmp_path):
    res = P.run_experiment(tiny("pipeline", n=30), tmp_path)
    report = res.reports["pipeline"]
    assert report.localization is not None and 0 <= report.localization.dice <= 1
    assert res.access.reads("test") == {"eval"}


def test_warm_start_passes_first_trunk(tmp_path, monkeypatch):
    seen = []
    real = G.train_grader

    def spy(head, crops, config, val=None, init=None):
        seen.append((head, init))
        return real(head, crops, config, val=val, init=init)

    monkeypatch.setattr(G, "train_grader", spy)
    cfg = tiny("compare_heads", n=30)
    cfg["grader"]["warm_start"] = True
    res = P.run_experiment(cfg, tmp_path)
    assert seen[0] == ("classification", None)
    assert seen[1][0] == "regression" and seen[1][1] is res.networks["classification"]
