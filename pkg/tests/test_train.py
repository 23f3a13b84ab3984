"""Schedule, loss, optimizer, EMA, and end-to-end training behavior."""

from __future__ import annotations

import math

import numpy as np
import pytest

from pdploc.augment import AugmentConfig
from pdploc.dataio import (
    GeneratorConfig,
    PdpMatrix,
    default_layout,
    generate_dataset,
    labels_array,
)
from pdploc.model import ModelConfig, init_params, named_params, param_count
from pdploc.tensor import Tensor
from pdploc.tokenizer import TokenizerSpec
from pdploc.train import (
    AdamW,
    Ema,
    TrainConfig,
    TrainingDivergedError,
    ema_update,
    lr_at,
    srm_loss,
    srm_loss_batch,
    train,
    write_training_log,
)


def tiny_model_config(family: str = "lswiglu") -> ModelConfig:
    return ModelConfig(
        family=family,
        n_layers=1,
        d_emb=6,
        hidden_dim=8,
        tokenizer=TokenizerSpec("sst"),
        n_heads=2,
        n_sensors=3,
        n_time_samples=8,
    )


def tiny_dataset(n: int, seed: int = 0) -> list[PdpMatrix]:
    layout = default_layout(rows=1, cols=3, spacing=20.0, margin=10.0)
    gen = GeneratorConfig(n_time_samples=8, rng_seed=seed)
    return generate_dataset(layout, gen, n)


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule_known_values():
    cfg = TrainConfig(epochs=200, lr_min=1e-5, lr_max=2e-3, warmup_fraction=0.05)
    # warmup = ceil(0.05 * 200) = 10 epochs
    assert abs(lr_at(0, 200, cfg) - 1e-5) < 1e-12  # starts at the floor
    assert abs(lr_at(5, 200, cfg) - 1.005e-3) < 1e-9  # halfway up the ramp
    assert abs(lr_at(10, 200, cfg) - 2e-3) < 1e-12  # peak at warmup end
    assert abs(lr_at(199, 200, cfg) - 1e-5) < 1e-12  # floor again at the last epoch


def test_lr_schedule_cosine_midpoint():
    # warmup = ceil(0.05 * 212) = 11; decay spans epochs 11..211, midpoint 111.
    cfg = TrainConfig(epochs=212, lr_min=1e-5, lr_max=2e-3, warmup_fraction=0.05)
    assert abs(lr_at(111, 212, cfg) - (2e-3 + 1e-5) / 2) < 1e-12


def test_lr_schedule_monotone_and_continuous():
    cfg = TrainConfig(epochs=100, lr_min=1e-5, lr_max=2e-3, warmup_fraction=0.05)
    values = [lr_at(s, 100, cfg) for s in range(100)]
    warmup = math.ceil(0.05 * 100)
    assert all(a < b for a, b in zip(values[:warmup], values[1 : warmup + 1]))
    assert all(a >= b for a, b in zip(values[warmup:], values[warmup + 1 :]))
    # the ramp formula extended to the boundary meets the cosine branch
    ramp_end = cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (warmup / warmup)
    assert abs(ramp_end - values[warmup]) < 1e-12


def test_lr_schedule_rejects_out_of_range_step():
    cfg = TrainConfig(epochs=10)
    with pytest.raises(ValueError):
        lr_at(10, 10, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, 10, cfg)


def test_lr_zero_floor_allowed():
    cfg = TrainConfig(epochs=10, lr_min=0.0, lr_max=0.0)
    assert lr_at(3, 10, cfg) == 0.0


# ---------------------------------------------------------------------------
# loss


def test_srm_loss_zero_when_prediction_matches_both_labels():
    pred = Tensor(np.array([3.0, 4.0]))
    loss = srm_loss(pred, [3.0, 4.0], [3.0, 4.0], lam=0.3)
    assert float(loss.data) == 0.0


def test_srm_loss_hand_value():
    # |pred-y_a|_1 = 1, |pred-y_b|_1 = 1, lambda = 0.5 -> 1.0
    pred = Tensor(np.array([1.0, 2.0]))
    loss = srm_loss(pred, [0.0, 2.0], [1.0, 1.0], lam=0.5)
    assert abs(float(loss.data) - 1.0) < 1e-12


def test_srm_loss_lambda_one_is_plain_l1():
    rng = np.random.default_rng(3)
    pred = Tensor(rng.standard_normal(2))
    y = rng.standard_normal(2)
    other = rng.standard_normal(2)
    loss = srm_loss(pred, y, other, lam=1.0)
    assert abs(float(loss.data) - np.abs(pred.data - y).sum()) < 1e-12


def test_srm_loss_rejects_bad_lambda():
    pred = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        srm_loss(pred, [0.0, 0.0], [0.0, 0.0], lam=1.5)


def test_srm_loss_batch_is_mean_of_samples():
    rng = np.random.default_rng(7)
    pred = Tensor(rng.standard_normal((5, 2)))
    y_a = rng.standard_normal((5, 2))
    y_b = rng.standard_normal((5, 2))
    lam = rng.random(5)
    batch = float(srm_loss_batch(pred, y_a, y_b, lam).data)
    singles = [
        float(srm_loss(Tensor(pred.data[i]), y_a[i], y_b[i], float(lam[i])).data)
        for i in range(5)
    ]
    assert abs(batch - np.mean(singles)) < 1e-12


def test_srm_loss_gradient_is_weighted_sign():
    pred = Tensor(np.array([[2.0, -1.0]]), requires_grad=True)
    loss = srm_loss_batch(pred, np.array([[0.0, 0.0]]), np.array([[5.0, -3.0]]), np.array([0.25]))
    loss.backward()
    # d/dpred = lam*sign(pred-y_a) + (1-lam)*sign(pred-y_b)
    expected = 0.25 * np.sign([2.0, -1.0]) + 0.75 * np.sign([-3.0, 2.0])
    assert np.allclose(pred.grad, expected[None], atol=1e-12)


def test_unmixed_batch_loss_is_permutation_invariant():
    cfg = tiny_model_config("vanilla")
    params = init_params(cfg, seed=11)
    data = tiny_dataset(6, seed=4)
    from pdploc.compression import CompressionParams, compress_matrix
    from pdploc.dataio import labels_array, powers_array
    from pdploc.model import forward

    x = compress_matrix(powers_array(data).astype(np.float64), CompressionParams())
    y = labels_array(data).astype(np.float64)

    def per_sample_losses(order):
        pred, _ = forward(params, cfg, x[order])
        diffs = np.abs(pred.data - y[order]).sum(axis=1)
        return np.sort(diffs)

    base = per_sample_losses(np.arange(6))
    perm = per_sample_losses(np.array([4, 0, 5, 2, 1, 3]))
    assert np.array_equal(base, perm)  # bit-identical in 64-bit


# ---------------------------------------------------------------------------
# optimizer


def make_params(seed: int = 0):
    cfg = tiny_model_config()
    return named_params(init_params(cfg, seed=seed))


def zero_grads(named):
    for _, t in named:
        t.grad = np.zeros_like(t.data)


def test_adamw_zero_gradients_leave_params_unchanged():
    named = make_params()
    before = [t.data.copy() for _, t in named]
    opt = AdamW(named, TrainConfig(weight_decay=0.0))
    zero_grads(named)
    opt.step(lr=1e-3)
    for (_, t), b in zip(named, before):
        assert np.array_equal(t.data, b)


def test_adamw_weight_decay_shrinks_matrices_only():
    named = make_params()
    cfg = TrainConfig(weight_decay=0.1)
    opt = AdamW(named, cfg)
    before = {name: t.data.copy() for name, t in named}
    zero_grads(named)
    opt.step(lr=1e-2)
    for name, t in named:
        if t.data.ndim >= 2:
            assert np.linalg.norm(t.data) < np.linalg.norm(before[name]) or not before[name].any()
            assert np.allclose(t.data, before[name] * (1 - 1e-2 * 0.1), atol=1e-15)
        else:
            assert np.array_equal(t.data, before[name])  # gains and biases exempt


def test_adamw_first_step_is_signed_lr():
    # With bias correction, step 1 moves each coordinate by ~lr*sign(g).
    t = Tensor(np.zeros(3), requires_grad=True)
    t.grad = np.array([0.5, -2.0, 1e-3])
    opt = AdamW([("w", t)], TrainConfig(weight_decay=0.0, eps=1e-8))
    opt.step(lr=1e-2)
    assert np.allclose(t.data, -1e-2 * np.sign([0.5, -2.0, 1e-3]), rtol=1e-4)


def test_adamw_step_returns_gradient_norm():
    a = Tensor(np.zeros((2, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.full((2, 2), 2.0)
    b.grad = np.full(2, 1.0)
    opt = AdamW([("a", a), ("b", b)], TrainConfig(weight_decay=0.0))
    norm = opt.step(lr=0.0)
    assert abs(norm - math.sqrt(4 * 4.0 + 2 * 1.0)) < 1e-12


def test_adamw_raises_on_nonfinite_gradient():
    t = Tensor(np.zeros(2), requires_grad=True)
    t.grad = np.array([1.0, np.inf])
    opt = AdamW([("w", t)], TrainConfig())
    with pytest.raises(TrainingDivergedError) as exc:
        opt.step(lr=1e-3)
    assert exc.value.step == 1


# ---------------------------------------------------------------------------
# EMA


def test_ema_update_hand_value():
    assert abs(ema_update(np.array(0.0), np.array(1.0), 0.9) - 0.1) < 1e-15


def test_ema_fixed_point():
    x = np.array([2.0, -3.0])
    assert np.array_equal(ema_update(x, x, 0.9), x)


def test_ema_initialized_to_current_weights():
    named = make_params()
    ema = Ema(named, alpha=0.9)
    for (_, t), s in zip(named, ema.shadow):
        assert np.array_equal(s, t.data)
        assert s is not t.data


def test_ema_geometric_convergence_bound():
    # With weights frozen at w, |shadow_k - w| <= alpha^k * |shadow_0 - w|.
    named = [("w", Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True))]
    ema = Ema(named, alpha=0.9)
    target = np.array([3.0, 3.0, 3.0])
    named[0][1].data = target.copy()
    initial_gap = np.abs(ema.shadow[0] - target).max()
    for k in range(1, 30):
        ema.update()
        gap = np.abs(ema.shadow[0] - target).max()
        assert gap <= 0.9**k * initial_gap + 1e-12


# ---------------------------------------------------------------------------
# end-to-end training


def quick_train_cfg(**kw) -> TrainConfig:
    base = dict(epochs=3, batch_size=4, lr_min=1e-4, lr_max=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def no_aug() -> AugmentConfig:
    return AugmentConfig(enable_drop=False, enable_shift=False, enable_mixup=False)


def test_train_smoke_histories_and_shapes():
    data = tiny_dataset(8)
    cfg = tiny_model_config()
    result = train(data, cfg, quick_train_cfg(), aug_cfg=no_aug())
    assert len(result.loss_history) == 3
    assert len(result.lr_history) == 3
    assert len(result.grad_norm_history) == 3
    assert all(math.isfinite(v) for v in result.loss_history)
    assert all(v > 0 for v in result.grad_norm_history)
    assert param_count(result.params) == param_count(result.ema_params)
    assert result.wall_time_s > 0


def test_train_zero_lr_leaves_weights_at_init():
    data = tiny_dataset(6)
    cfg = tiny_model_config()
    tcfg = quick_train_cfg(lr_min=0.0, lr_max=0.0, weight_decay=0.0)
    result = train(data, cfg, tcfg, aug_cfg=no_aug())
    init_seed = int(np.random.SeedSequence(tcfg.seed).generate_state(3)[0])
    reference = init_params(cfg, seed=init_seed)
    # train() recenters the head bias at the label centroid before stepping.
    reference.head_b.data = labels_array(data).astype(np.float64).mean(axis=0)
    for (_, got), (_, want) in zip(
        named_params(result.params), named_params(reference)
    ):
        assert np.array_equal(got.data, want.data)


def test_train_head_bias_starts_at_label_centroid():
    data = tiny_dataset(6)
    cfg = tiny_model_config()
    tcfg = quick_train_cfg(lr_min=0.0, lr_max=0.0, weight_decay=0.0)
    result = train(data, cfg, tcfg, aug_cfg=no_aug())
    centroid = labels_array(data).astype(np.float64).mean(axis=0)
    assert np.array_equal(result.params.head_b.data, centroid)


def test_train_is_deterministic():
    data = tiny_dataset(8)
    cfg = tiny_model_config()
    r1 = train(data, cfg, quick_train_cfg(), aug_cfg=AugmentConfig(d_max=2))
    r2 = train(data, cfg, quick_train_cfg(), aug_cfg=AugmentConfig(d_max=2))
    assert r1.loss_history == r2.loss_history  # bit-identical floats
    assert r1.grad_norm_history == r2.grad_norm_history
    for (_, a), (_, b) in zip(named_params(r1.params), named_params(r2.params)):
        assert np.array_equal(a.data, b.data)


def test_train_seed_changes_trajectory():
    data = tiny_dataset(8)
    cfg = tiny_model_config()
    r1 = train(data, cfg, quick_train_cfg(seed=1), aug_cfg=no_aug())
    r2 = train(data, cfg, quick_train_cfg(seed=2), aug_cfg=no_aug())
    assert r1.loss_history != r2.loss_history


def test_train_loss_decreases_on_tiny_overfit():
    data = tiny_dataset(4)
    cfg = tiny_model_config()
    tcfg = quick_train_cfg(epochs=400, batch_size=4, lr_min=1e-4, lr_max=2e-2)
    result = train(data, cfg, tcfg, aug_cfg=no_aug())
    assert result.loss_history[-1] < 1.0  # sub-meter memorization of 4 samples


def test_train_ema_tracks_behind_raw_weights():
    data = tiny_dataset(8)
    cfg = tiny_model_config()
    result = train(data, cfg, quick_train_cfg(epochs=5), aug_cfg=no_aug())
    init_seed = int(np.random.SeedSequence(5).generate_state(3)[0])
    start = init_params(cfg, seed=init_seed)
    # the head bias starts at the label centroid rather than its drawn value
    start.head_b.data = labels_array(data).mean(axis=0)
    moved = stayed = 0
    for (_, raw), (_, avg), (_, init) in zip(
        named_params(result.params), named_params(result.ema_params), named_params(start)
    ):
        if not np.array_equal(raw.data, init.data):
            moved += 1
            # EMA lies strictly between the init and the final raw weights
            gap_raw = np.linalg.norm(raw.data - init.data)
            gap_ema = np.linalg.norm(avg.data - init.data)
            assert 0 < gap_ema < gap_raw
        else:
            stayed += 1
            assert np.array_equal(avg.data, init.data)
    assert moved > 0


def test_train_per_step_ema_differs_from_per_epoch():
    data = tiny_dataset(8)
    cfg = tiny_model_config()
    r_epoch = train(data, cfg, quick_train_cfg(), aug_cfg=no_aug())
    r_step = train(data, cfg, quick_train_cfg(ema_per_step=True), aug_cfg=no_aug())
    # identical raw trajectories, different averaging granularity
    assert r_epoch.loss_history == r_step.loss_history
    same = all(
        np.array_equal(a.data, b.data)
        for (_, a), (_, b) in zip(
            named_params(r_epoch.ema_params), named_params(r_step.ema_params)
        )
    )
    assert not same


def test_train_diverged_loss_raises_with_step():
    data = tiny_dataset(4)
    data[0].powers[0, 0] = np.nan  # poisons every batch containing sample 0
    cfg = tiny_model_config()
    with pytest.raises(TrainingDivergedError) as exc:
        train(data, cfg, quick_train_cfg(batch_size=4), aug_cfg=no_aug())
    assert exc.value.step == 1


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train([], tiny_model_config(), quick_train_cfg())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_min=2e-3, lr_max=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(ema_alpha=1.0)
    with pytest.raises(ValueError):
        TrainConfig(dtype="float16")


def test_write_training_log_roundtrip(tmp_path):
    data = tiny_dataset(4)
    result = train(data, tiny_model_config(), quick_train_cfg(), aug_cfg=no_aug())
    path = tmp_path / "log.csv"
    write_training_log(path, result)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "epoch,lr,loss,grad_norm"
    assert len(rows) == 1 + len(result.loss_history)
    first = rows[1].split(",")
    assert float(first[1]) == result.lr_history[0]
    assert float(first[2]) == result.loss_history[0]
