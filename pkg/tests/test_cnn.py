import numpy as np
import pytest

from swayid import cnn
from swayid.cnn import layers as L
from swayid.cnn.network import Network, mse_loss, sgd_momentum_step
from swayid.dataset import NormStats
from swayid.errors import ConfigError, DivergenceError
from swayid.features import InputStats


def _activation_pattern(net):
    """Relu on/off masks and pool argmax choices from the last train forward."""
    pattern = []
    for layer in net.layers:
        mask = getattr(layer, "_mask", None)
        if mask is not None:
            pattern.append(mask.copy())
        argmax = getattr(layer, "_argmax", None)
        if argmax is not None:
            pattern.append(argmax.copy())
    return pattern


def finite_difference_grads(net, x, target, h=1e-3):
    """Central-difference parameter gradients of the MSE loss (64-bit).

    Coordinates whose +-h perturbation flips a relu sign or a pool argmax
    are reported in a skip mask: across such kinks the difference quotient
    does not measure the derivative at the base point.
    """
    grads = []
    valid = []
    for p in net.params:
        g = np.zeros_like(p, dtype=np.float64)
        ok = np.ones(p.size, dtype=bool)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp, _ = mse_loss(net.forward(x, train=True), target)
            pat_p = _activation_pattern(net)
            flat[i] = keep - h
            lm, _ = mse_loss(net.forward(x, train=True), target)
            pat_m = _activation_pattern(net)
            flat[i] = keep
            gflat[i] = (lp - lm) / (2 * h)
            ok[i] = all(np.array_equal(a, b) for a, b in zip(pat_p, pat_m))
        grads.append(g)
        valid.append(ok.reshape(p.shape))
    return grads, valid


def analytic_grads(net, x, target):
    net.zero_grad()
    pred = net.forward(x, train=True)
    _, dy = mse_loss(pred, target)
    net.backward(dy)
    return [g.copy() for g in net.grads]


def max_relative_error(analytic, numeric, valid=None):
    worst = 0.0
    checked = 0
    total = 0
    for k, (ga, gn) in enumerate(zip(analytic, numeric)):
        rel = np.abs(ga - gn) / np.maximum(np.abs(ga) + np.abs(gn), 1e-6)
        mask = np.ones_like(rel, bool) if valid is None else valid[k]
        total += rel.size
        checked += int(mask.sum())
        if mask.any():
            worst = max(worst, float(rel[mask].max()))
    # the kink filter must only remove a small fraction of coordinates
    assert checked >= 0.95 * total
    return worst


SMALL_SPEC = (
    ("conv", {"filters": 4, "kernel": 3}),
    ("relu", {}),
    ("maxpool", {"size": 2}),
    ("flatten", {}),
    ("dense", {"units": 5}),
    ("relu", {}),
    ("dense", {"units": 3}),
)


class TestForward:
    def test_zero_weights_zero_output(self):
        net = Network(SMALL_SPEC, input_shape=(8, 8, 2),
                      rng=np.random.default_rng(0))
        net.set_weights([np.zeros_like(p) for p in net.params])
        out = net.predict(np.random.default_rng(1).normal(size=(8, 8, 2)))
        assert np.all(out == 0.0)

    def test_identity_kernel_passthrough(self):
        conv = L.Conv2D((6, 6, 1), filters=1, kernel=3,
                        rng=np.random.default_rng(0), dtype=np.float64)
        w = np.zeros((9, 1))
        w[4, 0] = 1.0  # center tap
        conv.weight[...] = w
        conv.bias[...] = 0.0
        x = np.random.default_rng(2).normal(size=(6, 6, 1))
        assert np.allclose(conv.forward(x), x)

    def test_maxpool_constant(self):
        pool = L.MaxPool2D((6, 6, 3))
        x = np.full((6, 6, 3), 2.5)
        out = pool.forward(x)
        assert out.shape == (3, 3, 3)
        assert np.all(out == 2.5)

    def test_maxpool_odd_dimension_drops_edge(self):
        pool = L.MaxPool2D((5, 5, 1))
        x = np.zeros((5, 5, 1))
        x[4, 4, 0] = 99.0  # dropped row/column
        out = pool.forward(x)
        assert out.shape == (2, 2, 1)
        assert np.all(out <= 0.0)

    def test_default_spec_shapes(self):
        net = Network(rng=np.random.default_rng(0))
        assert net.output_shape == (7,)
        out = net.predict(np.zeros((110, 110, 2), np.float32))
        assert out.shape == (7,)
        assert np.all(np.isfinite(out))

    def test_shape_mismatch_rejected(self):
        net = Network(SMALL_SPEC, input_shape=(8, 8, 2))
        with pytest.raises(ConfigError):
            net.predict(np.zeros((4, 4, 2)))


class TestMseLoss:
    def test_equal_is_zero(self):
        loss, grad = mse_loss(np.ones(7), np.ones(7))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_unit_error_single_component(self):
        pred = np.zeros(7)
        pred[0] = 1.0
        loss, grad = mse_loss(pred, np.zeros(7))
        assert loss == pytest.approx(1 / 7)
        assert grad[0] == pytest.approx(2 / 7)
        assert np.all(grad[1:] == 0.0)

    def test_mean_predictor_of_zscored_targets(self):
        # expected loss of predicting the mean of z-scored targets equals
        # their per-dimension variance, which is 1 by construction
        rng = np.random.default_rng(0)
        raw = rng.uniform(size=(4000, 7)) * np.arange(1, 8)
        z = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        losses = [mse_loss(np.zeros(7), t)[0] for t in z]
        assert np.mean(losses) == pytest.approx(1.0, abs=1e-9)


class TestSgdMomentum:
    def test_zero_momentum_plain_descent(self):
        w = [np.array([1.0, 2.0])]
        v = [np.zeros(2)]
        g = [np.array([0.5, -0.5])]
        sgd_momentum_step(w, v, g, lr=0.1, momentum=0.0)
        assert np.allclose(w[0], [0.95, 2.05])

    def test_zero_gradient_coasts(self):
        w = [np.array([1.0])]
        v = [np.array([0.2])]
        sgd_momentum_step(w, v, [np.array([0.0])], lr=0.1, momentum=0.9)
        assert v[0][0] == pytest.approx(0.18)
        assert w[0][0] == pytest.approx(1.18)

    def test_two_step_hand_recurrence(self):
        # mu=0.9, lr=0.1, g=1, w0=0: v1=-0.1, w1=-0.1; v2=-0.19, w2=-0.29
        w = [np.array([0.0])]
        v = [np.array([0.0])]
        g = [np.array([1.0])]
        sgd_momentum_step(w, v, g, lr=0.1, momentum=0.9)
        assert w[0][0] == pytest.approx(-0.1, rel=1e-12)
        sgd_momentum_step(w, v, g, lr=0.1, momentum=0.9)
        assert w[0][0] == pytest.approx(-0.29, rel=1e-12)


class TestGradients:
    def test_small_network_gradcheck(self):
        rng = np.random.default_rng(42)
        net = Network(SMALL_SPEC, input_shape=(8, 8, 2), rng=rng, dtype=np.float64)
        x = rng.normal(size=(8, 8, 2))
        target = rng.normal(size=3)
        numeric, valid = finite_difference_grads(net, x, target)
        analytic = analytic_grads(net, x, target)
        assert max_relative_error(analytic, numeric, valid) < 1e-5

    def test_dense_only_gradcheck(self):
        rng = np.random.default_rng(7)
        spec = (("dense", {"units": 6}), ("relu", {}), ("dense", {"units": 2}))
        net = Network(spec, input_shape=(10,), rng=rng, dtype=np.float64)
        x = rng.normal(size=10)
        target = rng.normal(size=2)
        numeric, valid = finite_difference_grads(net, x, target)
        err = max_relative_error(analytic_grads(net, x, target), numeric, valid)
        assert err < 1e-5

    def test_conv_pool_gradcheck(self):
        rng = np.random.default_rng(13)
        spec = (("conv", {"filters": 3, "kernel": 3}), ("maxpool", {"size": 2}),
                ("flatten", {}), ("dense", {"units": 2}))
        net = Network(spec, input_shape=(7, 6, 2), rng=rng, dtype=np.float64)
        x = rng.normal(size=(7, 6, 2))
        target = rng.normal(size=2)
        numeric, valid = finite_difference_grads(net, x, target)
        err = max_relative_error(analytic_grads(net, x, target), numeric, valid)
        assert err < 1e-5

    def test_zero_loss_gradient_zero_grads(self):
        rng = np.random.default_rng(3)
        net = Network(SMALL_SPEC, input_shape=(8, 8, 2), rng=rng, dtype=np.float64)
        net.zero_grad()
        net.forward(rng.normal(size=(8, 8, 2)), train=True)
        net.backward(np.zeros(3))
        assert all(np.all(g == 0.0) for g in net.grads)

    def test_backward_linearity(self):
        rng = np.random.default_rng(4)
        net = Network(SMALL_SPEC, input_shape=(8, 8, 2), rng=rng, dtype=np.float64)
        x = rng.normal(size=(8, 8, 2))
        dy = rng.normal(size=3)
        net.zero_grad()
        net.forward(x, train=True)
        net.backward(dy)
        single = [g.copy() for g in net.grads]
        net.zero_grad()
        net.forward(x, train=True)
        net.backward(2.0 * dy)
        doubled = [g.copy() for g in net.grads]
        for a, b in zip(single, doubled):
            assert np.allclose(2.0 * a, b, rtol=1e-12)


class FakeDataset:
    """Minimal dataset protocol for the training loop."""

    def __init__(self, images, targets, n_train):
        self.images = images
        self.targets = targets
        self.input_stats = InputStats.identity()
        self.param_stats = NormStats(mean=(0.0,) * targets.shape[1],
                                     std=(1.0,) * targets.shape[1])
        self._n_train = n_train

    @property
    def train_indices(self):
        return np.arange(self._n_train)

    @property
    def val_indices(self):
        return np.arange(self._n_train, self.images.shape[0])


def linear_task(n=200, seed=0):
    # targets are a fixed linear readout of 4 image pixels
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1, 1, size=(n, 10, 10, 2)).astype(np.float32)
    pix = images[:, [1, 3, 5, 7], [2, 4, 6, 8], [0, 1, 0, 1]]
    weights = np.array([[0.8, -0.4, 0.3], [0.2, 0.9, -0.5],
                        [-0.7, 0.1, 0.6], [0.4, -0.3, -0.2]])
    targets = pix @ weights
    return FakeDataset(images, targets.astype(np.float64), int(0.8 * n))


TINY_SPEC = (
    ("conv", {"filters": 8, "kernel": 3}),
    ("relu", {}),
    ("flatten", {}),
    ("dense", {"units": 16}),
    ("relu", {}),
    ("dense", {"units": 3}),
)


class TestTraining:
    def test_linear_task_learns(self):
        ds = linear_task()
        cfg = cnn.TrainConfig(learning_rate=0.02, momentum=0.9, batch_size=16,
                              epochs=200, seed=1)
        model = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        assert model.history["train_mse"][-1] < 1e-3

    def test_loss_monotone_trend(self):
        ds = linear_task()
        cfg = cnn.TrainConfig(learning_rate=0.02, momentum=0.9, batch_size=16,
                              epochs=60, seed=1)
        model = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        losses = np.array(model.history["train_mse"])
        for start in range(0, len(losses) - 20):
            window = losses[start:start + 21]
            increases = int(np.sum(np.diff(window) > 0))
            assert increases <= 2

    def test_constant_targets_absorbed_by_bias(self):
        rng = np.random.default_rng(5)
        images = rng.normal(size=(60, 10, 10, 2)).astype(np.float32)
        targets = np.tile([0.3, -0.7, 1.1], (60, 1))
        ds = FakeDataset(images, targets, 40)
        cfg = cnn.TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=20,
                              epochs=60, seed=0)
        model = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        assert model.best_val_mse < 1e-3

    def test_determinism(self):
        ds = linear_task(n=60)
        cfg = cnn.TrainConfig(learning_rate=0.02, batch_size=16, epochs=3, seed=9)
        m1 = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        m2 = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        for a, b in zip(m1.net.params, m2.net.params):
            assert np.array_equal(a, b)

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence_aborts_with_guidance(self):
        ds = linear_task(n=60)
        cfg = cnn.TrainConfig(learning_rate=1e9, batch_size=16, epochs=5, seed=0)
        with pytest.raises(DivergenceError, match="learning rate"):
            cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))

    def test_history_recorded_per_epoch(self):
        ds = linear_task(n=60)
        cfg = cnn.TrainConfig(epochs=4, batch_size=16, seed=0, learning_rate=0.01)
        model = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        assert len(model.history["train_mse"]) == 4
        assert len(model.history["val_mse"]) == 4
        assert 0 <= model.history["best_epoch"] < 4


class TestPredictAndSerialize:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = linear_task(n=60)
        cfg = cnn.TrainConfig(epochs=2, batch_size=16, seed=3, learning_rate=0.01)
        model = cnn.train(ds, spec=TINY_SPEC, cfg=cfg, input_shape=(10, 10, 2))
        cnn.save_model(tmp_path / "m", model)
        loaded = cnn.load_model(tmp_path / "m")
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=(10, 10, 2)).astype(np.float32)
            a = model.net.predict(x)
            b = loaded.net.predict(x)
            assert np.array_equal(a, b)
        assert loaded.history["best_epoch"] == model.history["best_epoch"]

    def test_prediction_batch_context_invariant(self):
        rng = np.random.default_rng(1)
        net = Network(TINY_SPEC, input_shape=(10, 10, 2), rng=rng)
        probe = rng.normal(size=(10, 10, 2)).astype(np.float32)
        alone = net.predict(probe)
        batch = [rng.normal(size=(10, 10, 2)).astype(np.float32) for _ in range(31)]
        batch.insert(17, probe)
        in_batch = [net.predict(x) for x in batch][17]
        assert np.array_equal(alone, in_batch)

    def test_zero_image_finite(self):
        net = Network(rng=np.random.default_rng(2))
        out = net.predict(np.zeros((110, 110, 2), np.float32))
        assert out.shape == (7,) and np.all(np.isfinite(out))

    def test_corrupt_model_load_error(self, tmp_path):
        (tmp_path / "model.json").write_text("{not json")
        from swayid.errors import InputFormatError

        with pytest.raises(InputFormatError):
            cnn.load_model(tmp_path)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        cnn.TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        cnn.TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        cnn.TrainConfig(epochs=0)
