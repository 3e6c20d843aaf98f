import numpy as np
import pytest

from caft.atf import (
    AtfConfig,
    TrainConfig,
    atf_forward,
    atf_loss,
    atf_loss_grad,
    atf_predict,
    get_param_vector,
    init_atf,
    load_model,
    save_model,
    set_param_vector,
    train_atf,
)
from caft.errors import DataError, FormatError
from caft.merge import MergedMap
from caft.synth import finite_difference_grad


def _zero_model(dim=3, blocks=2, dtype=np.float32):
    model = init_atf(AtfConfig(dim=dim, n_hidden_blocks=blocks, seed=0), dtype=dtype)
    set_param_vector(model, np.zeros(model.n_params, dtype=dtype))
    # keep batch-norm scale at 1 so the zero weights are the only zeros
    for block in model.blocks:
        block.gamma = np.ones_like(block.gamma)
    return model


def _rand_dataset(rng, n=6, h=4, w=4, d=3, margin=6.0):
    fg = rng.normal(0, 1, d)
    bg = fg + margin * rng.normal(0, 1, d) / np.linalg.norm(rng.normal(0, 1, d))
    data = []
    for _ in range(n):
        bits = (rng.random((h, w)) < 0.4).astype(np.uint8)
        grid = np.where(bits[:, :, None] == 1, fg, bg) + rng.normal(0, 1, (h, w, d))
        from caft.maskops import Mask

        data.append((MergedMap(grid=grid, class_token=fg.copy()), Mask(bits)))
    return data


class TestInit:
    def test_deterministic(self):
        cfg = AtfConfig(dim=8, n_hidden_blocks=2, seed=11)
        a, b = init_atf(cfg), init_atf(cfg)
        np.testing.assert_array_equal(get_param_vector(a), get_param_vector(b))

    def test_parameter_count_formula(self):
        model = init_atf(AtfConfig(dim=8, n_hidden_blocks=2))
        # 2 * (8*8 conv + 8 bias + 2*8 bn) + (2*8 head + 2)
        assert model.n_params == 2 * (8 * 8 + 8 + 2 * 8) + (2 * 8 + 2) == 194

    def test_first_kernel_three_shape(self):
        model = init_atf(AtfConfig(dim=4, n_hidden_blocks=2, first_kernel=3))
        assert model.blocks[0].weight.shape == (4, 4, 3, 3)
        assert model.blocks[1].weight.shape == (4, 4, 1, 1)

    def test_config_validation(self):
        with pytest.raises(DataError):
            AtfConfig(dim=4, first_kernel=5)
        with pytest.raises(DataError):
            AtfConfig(dim=4, n_hidden_blocks=0)


class TestForward:
    def test_zero_parameters_zero_logits(self):
        model = _zero_model()
        logits = atf_forward(model, np.ones((2, 2, 3)), mode="eval")
        np.testing.assert_array_equal(logits, 0.0)

    def test_pointwise_model_permutation_equivariant(self):
        rng = np.random.default_rng(0)
        model = init_atf(AtfConfig(dim=3, n_hidden_blocks=2, seed=3))
        grid = rng.normal(0, 1, (4, 5, 3)).astype(np.float32)
        logits = atf_forward(model, grid, mode="eval")
        perm = rng.permutation(20)
        permuted_grid = grid.reshape(20, 3)[perm].reshape(4, 5, 3)
        permuted_logits = atf_forward(model, permuted_grid, mode="eval")
        np.testing.assert_allclose(
            permuted_logits.reshape(2, 20)[:, np.argsort(perm)],
            logits.reshape(2, 20),
            rtol=1e-6,
        )

    def test_hand_computed_single_block(self):
        # identity conv, bn an exact no-op, head picks channel 0 into the
        # foreground logit: logits[1] = relu(x0)
        model = init_atf(AtfConfig(dim=2, n_hidden_blocks=1, seed=0), dtype=np.float64)
        block = model.blocks[0]
        block.weight = np.eye(2)[:, :, None, None]
        block.bias = np.zeros(2)
        block.gamma = np.ones(2)
        block.beta = np.zeros(2)
        block.run_mean = np.zeros(2)
        block.run_var = np.full(2, 1.0 - block.eps)
        model.head_weight = np.array([[0.0, 0.0], [1.0, 0.0]])[:, :, None, None]
        model.head_bias = np.zeros(2)
        grid = np.array(
            [[[1.5, -9.0], [-2.0, 4.0]], [[0.25, 1.0], [-0.5, -1.0]]]
        )
        logits = atf_forward(model, grid, mode="eval")
        np.testing.assert_allclose(logits[0], 0.0)
        np.testing.assert_allclose(logits[1], [[1.5, 0.0], [0.25, 0.0]])

    def test_dim_mismatch(self):
        model = init_atf(AtfConfig(dim=3))
        with pytest.raises(DataError, match="dim"):
            atf_forward(model, np.zeros((2, 2, 4)))


class TestPredict:
    def test_zero_model_predicts_background(self):
        model = _zero_model()
        mask = atf_predict(model, MergedMap(grid=np.ones((3, 3, 3)), class_token=np.ones(3)))
        assert not mask.bits.any()

    def test_foreground_bias_predicts_all_ones(self):
        model = _zero_model()
        model.head_bias = np.array([0.0, 1.0], dtype=np.float32)
        mask = atf_predict(model, MergedMap(grid=np.ones((3, 3, 3)), class_token=np.ones(3)))
        assert mask.bits.all()

    def test_trained_on_separable_data(self):
        rng = np.random.default_rng(1)
        data = _rand_dataset(rng, n=8, margin=8.0)
        model, _ = train_atf(
            data, TrainConfig(epochs=20, lr0=0.1, seed=0), AtfConfig(dim=3, seed=0)
        )
        correct = total = 0
        for mmap, mask in data:
            pred = atf_predict(model, mmap)
            correct += int((pred.bits == mask.bits).sum())
            total += mask.bits.size
        assert correct / total >= 0.99


class TestLossAndGradients:
    def test_uniform_logits_loss_ln2(self):
        model = _zero_model()
        grid = np.ones((2, 2, 3))
        target = np.array([[0, 1], [1, 0]])
        assert atf_loss(model, grid, target) == pytest.approx(np.log(2.0), rel=1e-6)

    def test_perfect_margin_loss_vanishes(self):
        model = _zero_model(dim=2, blocks=1, dtype=np.float64)
        block = model.blocks[0]
        # channel 0 carries +x0, channel 1 carries -x0; after batch norm and
        # ReLU exactly one survives per token, and the head turns that into a
        # margin-50 decision
        block.weight = np.array([[1.0, 0.0], [-1.0, 0.0]])[:, :, None, None]
        model.head_weight = np.array([[0.0, 50.0], [50.0, 0.0]])[:, :, None, None]
        grid = np.full((1, 2, 2), 5.0)
        grid[0, 1] = [-5.0, 0.0]
        target = np.array([[1, 0]])
        assert atf_loss(model, grid, target, train=True) < 1e-12

    def test_gradcheck_float64(self):
        rng = np.random.default_rng(2)
        for trial in range(4):
            cfg = AtfConfig(
                dim=int(rng.integers(2, 5)),
                n_hidden_blocks=int(rng.integers(1, 3)),
                first_kernel=3 if trial == 3 else 1,
                seed=trial,
            )
            model = init_atf(cfg, dtype=np.float64)
            grid = rng.normal(0, 1, (3, 3, cfg.dim))
            target = rng.integers(0, 2, (3, 3))
            _, analytic = atf_loss_grad(model, grid, target)
            numeric = finite_difference_grad(model, grid, target, 1e-6)
            rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
            assert rel < 1e-6

    def test_gradcheck_float32(self):
        rng = np.random.default_rng(3)
        cfg = AtfConfig(dim=3, n_hidden_blocks=2, seed=5)
        model = init_atf(cfg, dtype=np.float32)
        grid = rng.normal(0, 1, (3, 3, 3))
        target = rng.integers(0, 2, (3, 3))
        _, analytic = atf_loss_grad(model, grid, target)
        numeric = finite_difference_grad(model, grid, target, 1e-3)
        rel = np.linalg.norm(analytic.astype(np.float64) - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-4

    def test_loss_decreases_after_small_step(self):
        rng = np.random.default_rng(4)
        data = _rand_dataset(rng, n=2)
        grids = np.stack([np.asarray(m.grid, dtype=np.float32) for m, _ in data])
        targets = np.stack([mask.bits.astype(np.int64) for _, mask in data])
        model = init_atf(AtfConfig(dim=3, seed=1))
        loss0, grad = atf_loss_grad(model, grids, targets)
        theta = get_param_vector(model) - 1e-4 * grad
        set_param_vector(model, theta)
        assert atf_loss(model, grids, targets) < loss0


class TestTraining:
    def test_zero_lr_keeps_init(self):
        rng = np.random.default_rng(5)
        data = _rand_dataset(rng, n=3)
        acfg = AtfConfig(dim=3, seed=2)
        model, _ = train_atf(data, TrainConfig(epochs=1, lr0=0.0, seed=0), acfg)
        np.testing.assert_array_equal(
            get_param_vector(model), get_param_vector(init_atf(acfg))
        )

    def test_deterministic_log(self):
        rng = np.random.default_rng(6)
        data = _rand_dataset(rng, n=4)
        tcfg = TrainConfig(epochs=3, lr0=0.05, seed=7)
        acfg = AtfConfig(dim=3, seed=7)
        _, log_a = train_atf(data, tcfg, acfg)
        _, log_b = train_atf(data, tcfg, acfg)
        assert log_a.losses == log_b.losses
        assert log_a.token_accs == log_b.token_accs
        assert log_a.lrs == log_b.lrs

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(7)
        data = _rand_dataset(rng, n=3)
        before = [m.grid.copy() for m, _ in data]
        train_atf(data, TrainConfig(epochs=2, lr0=0.1, seed=0), AtfConfig(dim=3))
        for (mmap, _), original in zip(data, before):
            np.testing.assert_array_equal(mmap.grid, original)

    def test_log_lengths_match_epochs(self):
        rng = np.random.default_rng(8)
        data = _rand_dataset(rng, n=2)
        _, log = train_atf(data, TrainConfig(epochs=5, lr0=0.01, seed=0), AtfConfig(dim=3))
        assert len(log.losses) == len(log.token_accs) == len(log.lrs) == 5

    def test_cosine_schedule_starts_at_lr0(self):
        tcfg = TrainConfig(epochs=10, lr0=0.1)
        assert tcfg.lr_at(0) == pytest.approx(0.1)
        assert tcfg.lr_at(5) == pytest.approx(0.05)
        lrs = [tcfg.lr_at(e) for e in range(10)]
        assert lrs == sorted(lrs, reverse=True)

    def test_inconsistent_shapes_rejected(self):
        rng = np.random.default_rng(9)
        data = _rand_dataset(rng, n=2, h=4, w=4) + _rand_dataset(rng, n=1, h=5, w=4)
        with pytest.raises(DataError, match="inconsistent"):
            train_atf(data, TrainConfig(epochs=1, lr0=0.1), AtfConfig(dim=3))


class TestSerialization:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(10)
        data = _rand_dataset(rng, n=2)
        model, _ = train_atf(data, TrainConfig(epochs=2, lr0=0.1, seed=0), AtfConfig(dim=3, seed=4))
        path = tmp_path / "model.cafm"
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(get_param_vector(loaded), get_param_vector(model))
        for ours, theirs in zip(model.blocks, loaded.blocks):
            np.testing.assert_array_equal(ours.run_mean, theirs.run_mean)
            np.testing.assert_array_equal(ours.run_var, theirs.run_var)
        save_model(loaded, tmp_path / "again.cafm")
        assert (tmp_path / "again.cafm").read_bytes() == path.read_bytes()

    def test_truncated_rejected(self, tmp_path):
        model = init_atf(AtfConfig(dim=3))
        path = tmp_path / "model.cafm"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(FormatError, match="size mismatch"):
            load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        model = init_atf(AtfConfig(dim=3))
        path = tmp_path / "model.cafm"
        save_model(model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"WHAT"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="bad magic"):
            load_model(path)
