import numpy as np
import pytest

from conftest import graph_network, random_graph
from leakcrf.crf import CrfModel, _all_labelings, energy
from leakcrf.ssvm import (
    TrainingConfig,
    TrainingDivergedError,
    TrainingLog,
    TrainingSample,
    hamming_loss,
    objective,
    structured_hinge_loss,
    subgradient,
    train,
)


def separable_set(rng, net, n_samples):
    """Label is 1 exactly when the first feature is positive; pairwise terms carry no signal."""
    out = []
    for _ in range(n_samples):
        f = rng.choice([-1.0, 1.0], size=net.n_nodes)
        feats = np.zeros((net.n_nodes, 5))
        feats[:, 0] = f
        feats[:, 4] = 1.0
        out.append(TrainingSample(feats, (f > 0).astype(np.int8)))
    return out


def brute_hinge(model, net, sample):
    y = sample.labels
    e_true = energy(model, net, sample.node_feats, y)
    return max(np.sum(yy != y) + e_true - energy(model, net, sample.node_feats, yy) for yy in _all_labelings(net.n_nodes))


class TestHammingLoss:
    def test_identical(self):
        assert hamming_loss([0, 1, 1], [0, 1, 1]) == 0

    def test_complement(self):
        y = np.array([0, 1, 1, 0, 1])
        assert hamming_loss(y, 1 - y) == 5

    def test_example(self):
        assert hamming_loss((0, 1, 1, 0), (0, 0, 1, 1)) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            hamming_loss([0, 1], [0, 1, 0])


class TestHinge:
    def test_zero_weights(self):
        rng = np.random.default_rng(0)
        net = graph_network(7, random_graph(7, rng))
        sample = TrainingSample(rng.normal(size=(7, 5)), rng.integers(0, 2, 7).astype(np.int8))
        for method in ("icm", "brute"):
            assert structured_hinge_loss(CrfModel.zeros(), net, sample, method=method) == 7.0

    def test_zero_when_truth_wins_by_margin(self):
        net = graph_network(3, np.array([[0, 1], [1, 2]]))
        feats = np.zeros((3, 5))
        feats[:, 0] = [1.0, -1.0, 1.0]
        w = np.zeros(14)
        w[0], w[5] = -3.0, 3.0
        sample = TrainingSample(feats, np.array([1, 0, 1], dtype=np.int8))
        assert structured_hinge_loss(CrfModel(w), net, sample, method="brute") == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            n = int(rng.integers(2, 9))
            net = graph_network(n, random_graph(n, rng))
            model = CrfModel(rng.normal(size=14))
            sample = TrainingSample(rng.normal(size=(n, 5)), rng.integers(0, 2, n).astype(np.int8))
            expected = brute_hinge(model, net, sample)
            assert structured_hinge_loss(model, net, sample, method="brute") == pytest.approx(expected, abs=1e-9)
            icm = structured_hinge_loss(model, net, sample)
            assert 0.0 <= icm <= expected + 1e-9


class TestSubgradient:
    def test_finite_difference(self):
        rng = np.random.default_rng(2)
        net = graph_network(8, random_graph(8, rng))
        samples = [
            TrainingSample(rng.normal(size=(8, 5)), rng.integers(0, 2, 8).astype(np.int8)) for _ in range(3)
        ]
        w = rng.normal(size=14)
        g = subgradient(w, net, samples, 0.25)
        h = 1e-6
        for _ in range(20):
            d = rng.normal(size=14)
            d /= np.linalg.norm(d)
            fd = (objective(w + h * d, net, samples, 0.25) - objective(w - h * d, net, samples, 0.25)) / (2 * h)
            assert abs(fd - g @ d) < 1e-4


class TestTrain:
    def test_separable_reaches_zero_hinge(self):
        rng = np.random.default_rng(3)
        net = graph_network(8, random_graph(8, rng))
        samples = separable_set(rng, net, 40)
        model = train(samples, net, TrainingConfig(calibration_fraction=0.0))
        total = sum(structured_hinge_loss(model, net, s, method="brute") for s in samples)
        assert total <= 1e-3 * net.n_nodes * len(samples)

    def test_one_dimensional_closed_form(self):
        # J(w) = max(0, 1 - f (w1 - w0)) + C/2 |w|^2 with f = 0.25, C = 0.25: minimum at w1 = -w0 = 1, J = 0.75
        net = graph_network(1, np.zeros((0, 2), dtype=int))
        sample = TrainingSample(np.array([[0.25]]), np.array([1], dtype=np.int8))
        config = TrainingConfig(c_penalty=0.25, max_epochs=20_000, tolerance=0.0, calibration_fraction=0.0, method="brute")
        model = train([sample], net, config)
        assert model.w[0] == pytest.approx(-1.0, abs=1e-3)
        assert model.w[1] == pytest.approx(1.0, abs=1e-3)
        assert np.all(np.abs(model.w[2:]) < 1e-3)
        assert objective(model.w, net, [sample], 0.25) == pytest.approx(0.75, abs=1e-3)

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(4)
        net = graph_network(10, random_graph(10, rng))
        samples = [TrainingSample(rng.normal(size=(10, 5)), rng.integers(0, 2, 10).astype(np.int8)) for _ in range(30)]
        config = TrainingConfig(max_epochs=5, seed=7)
        train(samples, net, config).save(tmp_path / "a.json")
        train(samples, net, config).save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_decreases_epoch_to_epoch(self, seed):
        # an epoch moves w by about N * eta0, so the 5% bound needs a small step on 20 samples
        rng = np.random.default_rng(seed)
        net = graph_network(8, random_graph(8, rng))
        samples = [TrainingSample(rng.normal(size=(8, 5)), rng.integers(0, 2, 8).astype(np.int8)) for _ in range(20)]
        log = TrainingLog()
        config = TrainingConfig(eta0=0.01, method="brute", calibration_fraction=0.0, tolerance=0.0, max_epochs=30)
        train(samples, net, config, log_rows=log)
        obj = [r["objective"] for r in log.rows]
        assert all(b <= a * 1.05 for a, b in zip(obj, obj[1:]))
        assert obj[-1] < obj[0]

    def test_objective_trend_at_default_step(self):
        rng = np.random.default_rng(5)
        net = graph_network(8, random_graph(8, rng))
        samples = [TrainingSample(rng.normal(size=(8, 5)), rng.integers(0, 2, 8).astype(np.int8)) for _ in range(20)]
        log = TrainingLog()
        train(samples, net, TrainingConfig(method="brute", calibration_fraction=0.0, tolerance=0.0, max_epochs=30), log_rows=log)
        obj = [r["objective"] for r in log.rows]
        assert np.mean(obj[-5:]) < obj[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        rng = np.random.default_rng(6)
        net = graph_network(6, random_graph(6, rng))
        samples = [TrainingSample(rng.normal(size=(6, 5)) * 1e300, rng.integers(0, 2, 6).astype(np.int8)) for _ in range(4)]
        with pytest.raises(TrainingDivergedError, match="eta0"):
            train(samples, net, TrainingConfig(eta0=1e10, calibration_fraction=0.0))

    def test_calibration_attached(self):
        rng = np.random.default_rng(7)
        net = graph_network(8, random_graph(8, rng))
        model = train(separable_set(rng, net, 50), net, TrainingConfig(max_epochs=5))
        assert model.calibration is not None
        assert model.training["n_calibration"] == 10

    def test_metrics_log(self, tmp_path):
        rng = np.random.default_rng(8)
        net = graph_network(5, random_graph(5, rng))
        log = TrainingLog()
        train(separable_set(rng, net, 10), net, TrainingConfig(max_epochs=3, tolerance=0.0), log_rows=log)
        log.write(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,objective,hinge,w_norm,eta"
        assert len(lines) == 4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(c_penalty=0.0)
        with pytest.raises(ValueError):
            TrainingConfig(max_epochs=0)

    def test_shape_check(self):
        net = graph_network(3, np.array([[0, 1]]))
        with pytest.raises(ValueError, match="sample 0"):
            train([TrainingSample(np.zeros((4, 5)), np.zeros(4, dtype=np.int8))], net)
