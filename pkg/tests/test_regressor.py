import zipfile

import numpy as np
import pytest

from diffloc.autodiff import finite_diff
from diffloc.regressor import (
    AdamState,
    CheckpointError,
    RegressorParams,
    StaleCacheError,
    adam_step,
    backward,
    forward,
    init_params,
    layer_sizes,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture
def params():
    return init_params([5, 7, 6, 3], seed=3, output_bias=[0.1, -0.2, 0.3])


def test_layer_sizes():
    assert layer_sizes(16) == [16, 128, 128, 128, 3]
    assert layer_sizes(16, "tiny") == [16, 32, 32, 32, 3]


def test_zero_params_give_zero():
    p = RegressorParams([np.zeros((4, 5)), np.zeros((3, 4))], [np.zeros(4), np.zeros(3)])
    Y, _ = forward(p, np.ones((6, 5)))
    assert not np.any(Y)


def test_single_linear_layer(rng):
    W = rng.normal(size=(3, 4))
    p = RegressorParams([W], [np.zeros(3)])
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(forward(p, x)[0], x @ W.T)


def test_shape_mismatch(params):
    with pytest.raises(ValueError):
        forward(params, np.ones((3, 4)))


def test_backward_matches_finite_differences(params, rng):
    x = rng.normal(size=(4, 5))
    G = rng.normal(size=(4, 3))
    Y, cache = forward(params, x)
    dW, db, dx = backward(params, cache, G)

    def loss_with(k, kind):
        def f(a):
            q = params.copy()
            (q.weights if kind == "W" else q.biases)[k] = a
            return np.sum(G * forward(q, x)[0])

        return f

    def rel(a, b):
        return np.linalg.norm(a - b) / np.linalg.norm(b)

    for k in range(3):
        assert rel(dW[k].ravel(), finite_diff(loss_with(k, "W"), params.weights[k], 1e-6)[0]) < 1e-4
        assert rel(db[k], finite_diff(loss_with(k, "b"), params.biases[k], 1e-6)[0]) < 1e-4
    assert rel(dx.ravel(), finite_diff(lambda X: np.sum(G * forward(params, X)[0]), x, 1e-6)[0]) < 1e-4


def test_zero_upstream(params, rng):
    _, cache = forward(params, rng.normal(size=(3, 5)))
    dW, db, dx = backward(params, cache, np.zeros((3, 3)))
    assert not any(np.any(a) for a in dW + db) and not np.any(dx)


def test_additive_over_pixels(params, rng):
    x = rng.normal(size=(2, 5))
    G = rng.normal(size=(2, 3))
    dW, db, _ = backward(params, forward(params, x)[1], G)
    parts = [backward(params, forward(params, x[i : i + 1])[1], G[i : i + 1]) for i in range(2)]
    for k in range(3):
        np.testing.assert_allclose(dW[k], parts[0][0][k] + parts[1][0][k], atol=1e-12)
        np.testing.assert_allclose(db[k], parts[0][1][k] + parts[1][1][k], atol=1e-12)


def test_stale_cache(params, rng):
    _, cache = forward(params, rng.normal(size=(2, 5)))
    state = AdamState.for_params(params)
    adam_step(params, backward(params, cache, np.ones((2, 3)))[:2], state)
    with pytest.raises(StaleCacheError):
        backward(params, cache, np.ones((2, 3)))


class TestAdam:
    def _zeros(self, params):
        return [np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases]

    def test_zero_gradient_keeps_params(self, params):
        before = params.copy()
        state = AdamState.for_params(params, lr=1e-2)
        adam_step(params, self._zeros(params), state)
        for a, b in zip(params.weights + params.biases, before.weights + before.biases):
            np.testing.assert_array_equal(a, b)
        assert state.step == 1

    def test_constant_gradient_step_is_lr(self, params):
        state = AdamState.for_params(params, lr=1e-3)
        dW, db = self._zeros(params)
        dW[0][:] = 0.37
        prev = params.weights[0].copy()
        for _ in range(200):
            prev = params.weights[0].copy()
            adam_step(params, (dW, db), state)
        np.testing.assert_allclose(prev - params.weights[0], 1e-3, rtol=1e-4)
        assert state.step == 200

    def test_shape_mismatch(self, params):
        with pytest.raises(ValueError):
            adam_step(params, ([np.zeros(1)], [np.zeros(1)]), AdamState.for_params(params))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, params, rng, tmp_path):
        state = AdamState.for_params(params, lr=1e-3)
        x = rng.normal(size=(4, 5))
        _, cache = forward(params, x)
        adam_step(params, backward(params, cache, np.ones((4, 3)))[:2], state)
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, params, state, 7, {"phase": "init"})
        p2, s2, step, extra = load_checkpoint(path)
        assert step == 7 and extra == {"phase": "init"} and s2.step == state.step
        np.testing.assert_array_equal(forward(p2, x)[0], forward(params, x)[0])
        for a, b in zip(state.m + state.v, s2.m + s2.v):
            np.testing.assert_array_equal(a, b)

    def test_file_bytes_deterministic(self, params, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", params)
        save_checkpoint(tmp_path / "b.ckpt", params)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_files(self, params, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.ckpt")
        with zipfile.ZipFile(tmp_path / "empty.ckpt", "w") as zf:
            zf.writestr("other.txt", "x")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "empty.ckpt")
        with zipfile.ZipFile(tmp_path / "fmt.ckpt", "w") as zf:
            zf.writestr("meta.json", '{"format": "other", "version": 1}')
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "fmt.ckpt")


def test_init_training_decreases_epoch_mean():
    from diffloc.config import RunConfig
    from diffloc.training import TrainLog, build_dataset, new_params, train_init

    cfg = RunConfig(mode="rgbd")
    cfg.scene.n_points = 500
    cfg.views.n_train, cfg.views.n_test, cfg.views.pixels_per_view = 16, 2, 200
    cfg.train.init_iters = 5 * 16
    cfg.train.init_lr = 1e-3
    data = build_dataset(cfg)
    params = new_params(cfg, data.scene)
    log_ = TrainLog()
    train_init(params, data, cfg, log_)
    epochs = log_.losses("init").reshape(5, 16).mean(axis=1)
    assert np.all(np.diff(epochs) < 0), epochs
