import json

import numpy as np
import pytest

import leakcrf.harness as harness
from leakcrf.crf import map_infer
from leakcrf.harness import (
    RESULT_COLUMNS,
    ExperimentConfig,
    Pipeline,
    hamming_score,
    load_config,
    results_table,
    run_experiment,
)
from leakcrf.hydrosim import LeakEvent, Scenario, ScenarioConfig
from leakcrf.ssvm import TrainingConfig


def small_config(**kw):
    base = dict(n_nodes=40, network_seed=2, n_train=60, n_test=20, training=TrainingConfig(max_epochs=5), record_runtime=False)
    base.update(kw)
    return ExperimentConfig(**base)


class TestHammingScore:
    def test_equal(self):
        assert hamming_score({1, 2}, {1, 2}) == 1.0

    def test_disjoint(self):
        assert hamming_score({1}, {2}) == 0.0

    def test_partial(self):
        assert hamming_score({1, 2}, {2, 3}) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert hamming_score(set(), set()) == 1.0


class TestConfig:
    def test_round_trip(self, tmp_path):
        config = small_config(p_grid=(0.5,), cell_grid=((2.5, 0.1),))
        (tmp_path / "c.json").write_text(json.dumps(config.to_dict()))
        assert load_config(tmp_path / "c.json") == config

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            ExperimentConfig(p_grid=())


class TestRunExperiment:
    def test_record_structure(self):
        records = run_experiment(small_config())
        assert len(records) == 5
        assert records[0].p is None
        assert [(r.p, r.gamma, r.Gamma) for r in records[1:]] == [
            (0.3, 2.0, 0.0), (0.3, 3.0, 0.04), (0.7, 2.0, 0.0), (0.7, 3.0, 0.04)
        ]
        for r in records:
            assert 0.0 <= r.hamming_score_baseline <= 1.0
            assert 0.0 <= r.hamming_score_fused <= 1.0

    def test_no_leaks_scores_one(self):
        records = run_experiment(small_config(scenario=ScenarioConfig(max_leaks=0)))
        assert all(r.hamming_score_baseline == 1.0 and r.hamming_score_fused == 1.0 for r in records)

    def test_deterministic_table(self):
        a = results_table(run_experiment(small_config(master_seed=3)))
        b = results_table(run_experiment(small_config(master_seed=3)))
        assert a == b
        assert a.splitlines()[0] == ",".join(RESULT_COLUMNS)
        assert a != results_table(run_experiment(small_config(master_seed=4)))

    def test_failing_cell_is_skipped(self, monkeypatch):
        real = harness.greedy_fuse

        def flaky(s, cliques, probs, config):
            if config.entropy_gate > 0:
                raise RuntimeError("boom")
            return real(s, cliques, probs, config)

        monkeypatch.setattr(harness, "greedy_fuse", flaky)
        records = run_experiment(small_config())
        assert [r.Gamma for r in records[1:]] == [0.0, 0.0]

    def test_diagnostics(self):
        diag = {}
        run_experiment(small_config(), diagnostics=diag)
        assert diag["n_test"] == 20
        assert len(diag["baseline_scores"]) == 20


def test_table_format():
    rec = harness.ResultRecord(0.7, 2.0, 0.0, 0.5, 0.75, 3, 0.0)
    base = harness.ResultRecord(None, None, None, 0.5, 0.5, 0, 0.0)
    lines = results_table([base, rec]).splitlines()
    assert lines[1] == ",,,0.500000,0.500000,0,0.000000"
    assert lines[2] == "0.700000,2.000000,0.000000,0.500000,0.750000,3,0.000000"


class TestInjectedLeak:
    """Detection of a single injected leak by a model trained on the 96-node benchmark."""

    @pytest.fixture(scope="class")
    @classmethod
    def detection_rate(cls):
        pipe = Pipeline(ExperimentConfig(n_train=500, n_test=1))
        model = pipe.train(pipe.dataset(500, harness._TRAIN))
        rng = np.random.default_rng(0)
        hits = 0
        for trial in range(50):
            v = int(rng.choice(pipe.net.junctions))
            inst = pipe.instance(Scenario((LeakEvent(v, float(rng.uniform(0.05, 1.0)), 0),), seed=trial), 0)
            hits += int(map_infer(model, pipe.net, inst.sample.node_feats, seed=trial)[v])
        return hits / 50

    def test_regression_floor(self, detection_rate):
        # recorded at 0.58 for this configuration
        assert detection_rate >= 0.5

    @pytest.mark.xfail(strict=True, reason="pressure drops are shared along downstream branches; see ledger")
    def test_target_rate(self, detection_rate):
        assert detection_rate >= 0.9
