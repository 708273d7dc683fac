"""Optimizer, initialization, and training-loop tests."""

import numpy as np
import pytest

from dynmri import data as dd
from dynmri import kspace as ks
from dynmri import network
from dynmri import training
from dynmri.losses import LossConfig
from dynmri.network import ModelParams, NetworkConfig
from dynmri.tensor import Tensor
from dynmri.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    he_init,
    init_optimizer_state,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
    write_training_log,
)

TINY = NetworkConfig(
    num_rdn_blocks=1, convs_per_block=5, num_rdbs=2, growth_channels=2,
    base_channels=3, kernel=(1, 3, 3), kpn_channels=3,
)


def tiny_dataset(count=4, seed=0, n=16, nt=2):
    seqs = [
        dd.generate_phantom(dd.PhantomConfig(nx=n, ny=n, nt=nt, seed=seed + i))
        for i in range(count)
    ]
    return dd.make_pairs(seqs, acceleration=2.0, acs_lines=4, seed=seed)


class TestHeInit:
    def test_std_matches_formula(self):
        fan_in = 3 * 27
        t = he_init((1_000_000,), fan_in, seed=0, dtype=np.float64)
        want = np.sqrt(2.0 / fan_in)
        assert t.data.std() == pytest.approx(want, rel=0.02)

    def test_mean_near_zero(self):
        fan_in = 50
        n = 1_000_000
        t = he_init((n,), fan_in, seed=1, dtype=np.float64)
        se = np.sqrt(2.0 / fan_in) / np.sqrt(n)
        assert abs(t.data.mean()) < 3 * se

    def test_seeded_determinism_and_grad_flag(self):
        a = he_init((4, 5), 10, seed=2)
        b = he_init((4, 5), 10, seed=2)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.requires_grad


class TestAdam:
    def make_scalar_params(self, x0):
        params = ModelParams()
        params.add("x", Tensor(np.array([x0]), requires_grad=True, dtype=np.float64))
        return params

    def test_first_step_magnitude(self):
        # bias correction makes the first update ~ lr * sign(g)
        params = self.make_scalar_params(0.0)
        state = init_optimizer_state(params)
        adam_step(params, {"x": np.array([3.7])}, state, lr=0.01)
        assert params["x"].data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_quadratic_convergence(self):
        # minimize (x - 5)^2, lr = 0.01, within 2000 steps
        params = self.make_scalar_params(0.0)
        state = init_optimizer_state(params)
        for _ in range(2000):
            g = 2 * (params["x"].data - 5.0)
            adam_step(params, {"x": g}, state, lr=0.01)
        assert abs(params["x"].data[0] - 5.0) < 1e-3

    def test_missing_grad_skips_param(self):
        params = self.make_scalar_params(1.0)
        params.add("y", Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64))
        state = init_optimizer_state(params)
        adam_step(params, {"x": np.array([1.0])}, state, lr=0.1)
        assert params["y"].data[0] == 2.0
        assert params["x"].data[0] != 1.0

    def test_step_counter_advances(self):
        params = self.make_scalar_params(0.0)
        state = init_optimizer_state(params)
        for i in range(3):
            adam_step(params, {"x": np.array([1.0])}, state, lr=0.001)
        assert state.step == 3


class TestSchedule:
    def test_exponential_decay_values(self):
        cfg = TrainConfig(initial_lr=0.0001, lr_decay=0.95)
        assert lr_schedule(0, cfg) == pytest.approx(0.0001)
        assert lr_schedule(1, cfg) == pytest.approx(0.0001 * 0.95)
        assert lr_schedule(10, cfg) == pytest.approx(0.0001 * 0.95**10)

    def test_validate_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(lr_decay=1.5).validate()
        with pytest.raises(ValueError):
            TrainConfig(adam_beta1=1.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0).validate()

    def test_defaults_match_training_protocol(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 20
        assert cfg.initial_lr == 0.0001
        assert cfg.lr_decay == 0.95
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)


class TestTrain:
    def test_loss_decreases(self):
        dataset = tiny_dataset()
        cfg = TrainConfig(
            batch_size=2, epochs=5, initial_lr=0.001, val_fraction=0.25, seed=0
        )
        _, log = train(dataset, TINY, cfg, dtype=np.float64)
        losses = [e["train_loss"] for e in log]
        # allow one non-monotone epoch
        violations = sum(b > a for a, b in zip(losses, losses[1:]))
        assert violations <= 1
        assert losses[-1] < losses[0]

    def test_overfits_two_samples(self):
        dataset = tiny_dataset(count=2)
        # needs enough capacity to drive the train loss towards zero
        wide = NetworkConfig(
            num_rdn_blocks=2, convs_per_block=5, num_rdbs=2, growth_channels=6,
            base_channels=8, kernel=(1, 3, 3), kpn_channels=8,
        )
        cfg = TrainConfig(
            batch_size=2, epochs=500, initial_lr=0.003, lr_decay=1.0,
            val_fraction=0.0, seed=0,
        )
        _, log = train(dataset, wide, cfg, dtype=np.float64)
        assert log[-1]["train_loss"] < 0.01 * log[0]["train_loss"]

    def test_zero_lr_leaves_params_unchanged(self):
        dataset = tiny_dataset()
        params0 = network.init_params(TINY, seed=0, dtype=np.float64)
        before = {k: v.copy() for k, v in params0.state_arrays().items()}
        cfg = TrainConfig(batch_size=2, epochs=1, initial_lr=0.0, val_fraction=0.0, seed=0)
        params, _ = train(dataset, TINY, cfg, params=params0, dtype=np.float64)
        for name, arr in params.state_arrays().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_seeded_determinism(self):
        dataset = tiny_dataset()
        cfg = TrainConfig(batch_size=2, epochs=2, initial_lr=0.001, val_fraction=0.25, seed=5)
        p1, log1 = train(dataset, TINY, cfg, dtype=np.float64)
        p2, log2 = train(tiny_dataset(), TINY, cfg, dtype=np.float64)

        def strip_timing(log):
            return [{k: v for k, v in e.items() if k != "wall_seconds"} for e in log]

        assert strip_timing(log1) == strip_timing(log2)
        for name in p1.names():
            np.testing.assert_array_equal(p1[name].data, p2[name].data)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train([], TINY, TrainConfig())

    def test_gradients_flow_with_random_params(self):
        # one tiny step with perturbed params must change every weight
        dataset = tiny_dataset(count=2)
        params = network.init_params(TINY, seed=1, dtype=np.float64)
        rng = np.random.default_rng(0)
        for _, t in params.items():
            t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        before = {k: v.copy() for k, v in params.state_arrays().items()}
        cfg = TrainConfig(batch_size=2, epochs=1, initial_lr=0.01, val_fraction=0.0, seed=0)
        train(dataset, TINY, cfg, params=params, dtype=np.float64)
        changed = [
            name for name, arr in params.state_arrays().items()
            if not np.array_equal(arr, before[name])
        ]
        assert set(changed) == set(before)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        params = network.init_params(TINY, seed=7, dtype=np.float64)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, params, TINY)
        loaded, cfg = load_checkpoint(path)
        assert cfg == TINY
        for name in params.names():
            got = loaded[name].data
            np.testing.assert_array_equal(got, params[name].data)
            assert got.dtype == params[name].data.dtype

    def test_missing_param_rejected(self, tmp_path):
        params = network.init_params(TINY, seed=0)
        arrays = params.state_arrays()
        with pytest.raises(KeyError):
            network.init_params(TINY).load_state_arrays(
                {k: v for k, v in arrays.items() if "shallow" not in k}
            )

    def test_training_log_roundtrip(self, tmp_path):
        log = [
            {"epoch": 0, "lr": 0.001, "train_loss": 0.5, "val_loss": 0.6,
             "val_psnr": 20.0, "wall_seconds": 1.0},
            {"epoch": 1, "lr": 0.00095, "train_loss": 0.25, "val_loss": 0.3,
             "val_psnr": 23.0, "wall_seconds": 2.0},
        ]
        path = tmp_path / "log.csv"
        write_training_log(path, log)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,lr,train_loss,val_loss,val_psnr"
        assert len(lines) == 3
        # repr round-trips floats exactly
        assert float(lines[1].split(",")[1]) == 0.001
        # timing stays out of the file so reruns match byte for byte
        assert "wall_seconds" not in lines[0]
