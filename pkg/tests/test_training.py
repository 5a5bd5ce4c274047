"""Trainer tests: loss, optimizer, determinism, checkpoints, visuals."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mgmem.tensor as tc
from mgmem.tensor import Tensor, bce_logits_loss, record, backward
from mgmem import configs, tasks
from mgmem.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mgmem.layers import MemoryState
from mgmem.networks import build_network
from mgmem.training import (
    RMSPropState,
    TrainConfig,
    apply_override,
    batch_metrics,
    clip_global_norm,
    config_from_dict,
    config_to_dict,
    evaluate,
    forward_outputs,
    generate_episodes,
    mapping_sequences,
    recall_sequences,
    rmsprop_step,
    sort_sequences,
    train,
)
from mgmem.visualize import (
    best_channel_correlation,
    export_memory_visual,
    normalize_to_bytes,
    pearson,
    read_pgm,
    write_pgm,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_sort_config(tmp_path, **kw):
    cfg = configs.sort_config(out_dir=str(tmp_path / "run"), length=4, dim=4)
    defaults = dict(total_steps=3, batch_size=4, eval_every=0, checkpoint_every=0,
                    early_stop_metric="")
    defaults.update(kw)
    for key, value in defaults.items():
        setattr(cfg, key, value)
    return cfg


class TestLoss:
    def test_logit_zero_target_one_is_ln2(self):
        z = Tensor(np.zeros((1, 1, 1, 1), np.float64))
        y = Tensor(np.ones((1, 1, 1, 1), np.float64))
        assert bce_logits_loss(z, y).item() == pytest.approx(np.log(2), rel=1e-12)

    def test_saturated_correct_is_tiny(self):
        z = Tensor(np.full((1, 1, 1, 1), 50.0, np.float64))
        y = Tensor(np.ones((1, 1, 1, 1), np.float64))
        assert bce_logits_loss(z, y).item() < 1e-20

    def test_matches_naive_formula_when_unsaturated(self):
        r = rng(1)
        z = r.uniform(-4, 4, size=(2, 3, 3, 1))
        y = r.integers(0, 2, size=(2, 3, 3, 1)).astype(np.float64)
        got = bce_logits_loss(Tensor(z), Tensor(y)).item()
        p = 1.0 / (1.0 + np.exp(-z))
        want = float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).sum() / 2)
        assert got == pytest.approx(want, rel=1e-6)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        z = Tensor(r.normal(scale=3, size=(1, 2, 2, 2)))
        y = Tensor(r.integers(0, 2, size=(1, 2, 2, 2)).astype(np.float64))
        assert bce_logits_loss(z, y).item() >= 0.0

    def test_bad_targets_rejected(self):
        z = Tensor(np.zeros((1, 1, 1, 1), np.float32))
        with pytest.raises(ValueError):
            bce_logits_loss(z, Tensor(np.full((1, 1, 1, 1), 0.5, np.float32)))


class TestRMSProp:
    def test_zero_gradient_leaves_params_and_decays_v(self):
        t = Tensor(np.ones((1, 1, 1, 2), np.float32), trainable=True)
        st_ = RMSPropState(lr=0.1)
        st_.v["p"] = np.full((1, 1, 1, 2), 4.0, np.float32)
        rmsprop_step({"p": t}, {"p": np.zeros_like(t.data)}, st_)
        np.testing.assert_array_equal(t.data, np.ones_like(t.data))
        np.testing.assert_allclose(st_.v["p"], 3.6)

    def test_first_step_formula(self):
        g = np.full((1, 1, 1, 1), 0.5, np.float32)
        t = Tensor(np.zeros((1, 1, 1, 1), np.float32), trainable=True)
        st_ = RMSPropState(lr=1e-2, rho=0.9, eps=1e-8)
        rmsprop_step({"p": t}, {"p": g}, st_)
        want = -1e-2 * 0.5 / (np.sqrt(0.1 * 0.25) + 1e-8)
        assert t.data.reshape(()) == pytest.approx(want, rel=1e-6)

    def test_constant_gradient_update_approaches_lr(self):
        # v converges to g^2, so the step magnitude approaches lr.
        t = Tensor(np.zeros((1, 1, 1, 1), np.float64), trainable=True)
        st_ = RMSPropState(lr=1e-3)
        g = np.full((1, 1, 1, 1), 0.37)
        prev = 0.0
        for _ in range(400):
            prev = float(t.data.reshape(()))
            rmsprop_step({"p": t}, {"p": g}, st_)
        step = abs(float(t.data.reshape(())) - prev)
        assert step == pytest.approx(1e-3, rel=1e-3)

    def test_zero_lr_is_identity(self):
        r = rng(2)
        t = Tensor(r.normal(size=(1, 1, 1, 3)), trainable=True)
        before = t.data.copy()
        rmsprop_step({"p": t}, {"p": r.normal(size=t.shape)}, RMSPropState(lr=0.0))
        np.testing.assert_array_equal(t.data, before)

    def test_accumulator_nonnegative(self):
        t = Tensor(np.zeros((1, 1, 1, 4), np.float32), trainable=True)
        st_ = RMSPropState(lr=1e-3)
        r = rng(3)
        for _ in range(50):
            rmsprop_step({"p": t}, {"p": r.normal(size=t.shape).astype(np.float32)}, st_)
        assert np.all(st_.v["p"] >= 0)

    def test_non_finite_gradient_rejected(self):
        t = Tensor(np.zeros((1, 1, 1, 1), np.float32), trainable=True)
        with pytest.raises(tc.NumericError):
            rmsprop_step({"p": t}, {"p": np.array([[[[np.nan]]]], np.float32)},
                         RMSPropState())

    def test_clip_global_norm(self):
        grads = {"a": np.full(3, 3.0), "b": np.full(4, 4.0)}
        norm = clip_global_norm(grads, 5.0)
        assert norm == pytest.approx(np.sqrt(27 + 64))
        total = np.sqrt(sum(np.sum(g ** 2) for g in grads.values()))
        assert total == pytest.approx(5.0)


class TestConfig:
    def test_round_trip(self):
        cfg = configs.sort_config()
        again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
        assert again == cfg

    def test_dotted_override(self):
        data = config_to_dict(configs.sort_config())
        apply_override(data, "lr", "0.01")
        apply_override(data, "task_params.length", "5")
        cfg = config_from_dict(data)
        assert cfg.lr == 0.01 and cfg.task_params["length"] == 5

    def test_unknown_path_rejected(self):
        data = config_to_dict(configs.sort_config())
        with pytest.raises(KeyError):
            apply_override(data, "no.such.path", "1")


class TestBatchBuilders:
    def test_sort_shapes(self):
        from mgmem.training import SORT_INPUT_CHANNELS
        eps = [tasks.gen_sort(4, 4, rng(4)) for _ in range(3)]
        seq, tgts = sort_sequences(eps)
        assert len(seq) == 4 and len(tgts) == 4
        assert seq[0].shape == (3, 3, 3, SORT_INPUT_CHANNELS)
        assert tgts[0].shape == (3, 1, 1, 4)

    def test_priority_encoding_orders_and_discriminates(self):
        from mgmem.training import encode_priority
        a, b = encode_priority(0.300), encode_priority(0.302)
        # linear channel keeps global order; fine channels separate near-ties
        assert a[0] < encode_priority(0.9)[0]
        assert np.abs(a - b).max() > 0.2

    def test_recall_query_step_is_supervised_only_at_end(self):
        eps = [tasks.gen_recall(5, 5, rng(5)) for _ in range(2)]
        seq, tgts = recall_sequences(eps)
        assert len(seq) == 6
        assert all(t == [None] for t in tgts[:-1])
        assert tgts[-1][0].shape == (2, 1, 1, 5)

    def test_mapping_padding_and_supervision(self):
        world = tasks.MazeWorld(np.zeros((9, 9), np.uint8), (4, 4))
        traj = tasks.spiral_trajectory(world, 49, margin=1)
        eps = [tasks.MappingEpisode(world, traj, 7)]
        seq, tgts = mapping_sequences(eps, m=3, k=3, obs_grid=5, query_grid=5)
        assert seq[0][0].shape == (1, 5, 5, 4)
        assert seq[0][1][0].shape == (1, 5, 5, 2)
        # steps before t_min=k are unsupervised
        assert tgts[0] == [None] and tgts[1] == [None]
        assert tgts[2][0] is not None
        assert tgts[2][0].shape == (1, 17, 17, 1)
        # observation border outside the 3x3 patch is unknown in one-hot
        obs = seq[0][0].data[0]
        assert np.all(obs[0, :, :2] == 0)
        # displacement channels fill the whole grid
        assert np.all(obs[:, :, 2] == obs[0, 0, 2])

    def test_mapping_mask_matches_task_masks(self):
        world = tasks.MazeWorld(np.zeros((7, 7), np.uint8), (3, 3))
        traj = tasks.spiral_trajectory(world, 25, margin=1)
        eps = [tasks.MappingEpisode(world, traj, 11)]
        seq, tgts = mapping_sequences(eps, m=3, k=3)
        seen = np.zeros((7, 7), dtype=bool)
        qrng = np.random.default_rng(11)
        for t in range(len(seq)):
            pos = tuple(traj.positions[t])
            for cell in tasks.observation_footprint(world, pos, 3):
                seen[cell] = True
            if tgts[t][0] is None:
                continue
            q = tasks.sample_query(seen, world, 3, qrng)
            np.testing.assert_array_equal(tgts[t][0].data[0, :, :, 0], q.mask)


class TestTrainLoop:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_sort_config(tmp_path, total_steps=0)
        result = train(cfg)
        loaded = load_checkpoint(result.checkpoint_path)
        fresh = build_network(cfg.net, np.random.default_rng(
            np.random.SeedSequence(cfg.seed).spawn(3)[0]))
        for name in fresh.params:
            np.testing.assert_array_equal(loaded.net.params[name].data,
                                          fresh.params[name].data)
        assert loaded.step == 0

    def test_metric_rows_and_header(self, tmp_path):
        cfg = tiny_sort_config(tmp_path, total_steps=3)
        result = train(cfg)
        lines = result.metrics_path.read_text().strip().splitlines()
        assert lines[0] == "step,loss,bit_error,seconds"
        assert len(lines) == 4
        steps = [int(line.split(",")[0]) for line in lines[1:]]
        assert steps == [1, 2, 3]

    def test_determinism_bitwise_metrics(self, tmp_path):
        a = train(tiny_sort_config(tmp_path / "a", total_steps=5))
        b = train(tiny_sort_config(tmp_path / "b", total_steps=5))

        def stripped(path):
            rows = path.read_text().strip().splitlines()
            return [",".join(line.split(",")[:-1]) for line in rows]  # drop seconds

        assert stripped(a.metrics_path) == stripped(b.metrics_path)
        ca, cb = load_checkpoint(a.checkpoint_path), load_checkpoint(b.checkpoint_path)
        for name in ca.net.params:
            np.testing.assert_array_equal(ca.net.params[name].data,
                                          cb.net.params[name].data)

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MGMEM_SEED", "123")
        a = train(tiny_sort_config(tmp_path / "a", total_steps=2))
        monkeypatch.delenv("MGMEM_SEED")
        cfg = tiny_sort_config(tmp_path / "b", total_steps=2)
        cfg.seed = 123
        b = train(cfg)
        ca, cb = load_checkpoint(a.checkpoint_path), load_checkpoint(b.checkpoint_path)
        for name in ca.net.params:
            np.testing.assert_array_equal(ca.net.params[name].data,
                                          cb.net.params[name].data)

    def test_sort_loss_decreases_over_thousand_steps(self, tmp_path):
        cfg = configs.sort_config(out_dir=str(tmp_path / "sort"))
        cfg.total_steps = 1000
        cfg.eval_every = 0
        cfg.checkpoint_every = 0
        cfg.early_stop_metric = ""
        result = train(cfg)
        rows = result.metrics_path.read_text().strip().splitlines()[1:]
        losses = [float(line.split(",")[1]) for line in rows]
        assert np.mean(losses[900:1000]) < np.mean(losses[0:100])

    def test_mapping_training_smoke(self, tmp_path):
        cfg = configs.mapping_config(out_dir=str(tmp_path / "m"), n=7)
        cfg.total_steps = 2
        cfg.batch_size = 2
        cfg.eval_every = 0
        cfg.checkpoint_every = 0
        cfg.task_params["steps"] = 25
        result = train(cfg)
        lines = result.metrics_path.read_text().strip().splitlines()
        assert lines[0] == "step,loss,precision,recall,f,seconds"
        assert len(lines) == 3


class TestEvaluate:
    def test_perfect_stub_scores_one(self):
        # feed the metric path directly with an exact predictor
        mask = rng(6).integers(0, 2, size=(5, 5)).astype(np.uint8)
        p, r, f = tasks.metrics_prf(mask.astype(float), mask)
        assert (p, r, f) == (1.0, 1.0, 1.0)

    def test_constant_half_logits_give_chance_level_bit_error(self, tmp_path):
        cfg = tiny_sort_config(tmp_path)
        net = build_network(cfg.net, 0)
        for t in net.params.values():
            t.data[:] = 0.0   # all logits 0 -> p=0.5 -> predicts all ones
        r = rng(7)
        eps = [tasks.gen_sort(4, 4, r) for _ in range(64)]
        summary = evaluate(net, "sort", cfg.task_params, eps)
        # random bits: expected error = P(bit == 0) = 0.5
        assert summary["bit_error_mean"] == pytest.approx(0.5, abs=0.06)

    def test_idempotent(self, tmp_path):
        cfg = tiny_sort_config(tmp_path)
        net = build_network(cfg.net, 1)
        eps = [tasks.gen_sort(4, 4, rng(8)) for _ in range(8)]
        a = evaluate(net, "sort", cfg.task_params, eps)
        b = evaluate(net, "sort", cfg.task_params, eps)
        assert a == b

    def test_recall_eval_runs(self):
        cfg = configs.recall_config(length=4, dim=4)
        net = build_network(cfg.net, 2)
        eps = [tasks.gen_recall(4, 4, rng(9)) for _ in range(6)]
        summary = evaluate(net, "recall", cfg.task_params, eps, batch_size=3)
        assert 0.0 <= summary["bit_error_mean"] <= 1.0
        assert summary["count"] == 6


class TestCheckpoint:
    def test_round_trip_forward_bitwise(self, tmp_path):
        cfg = tiny_sort_config(tmp_path, total_steps=2)
        result = train(cfg)
        loaded = load_checkpoint(result.checkpoint_path)
        eps = [tasks.gen_sort(4, 4, rng(10)) for _ in range(3)]
        seq, tgts = sort_sequences(eps)
        ckpt2 = load_checkpoint(result.checkpoint_path)
        a = forward_outputs(loaded.net, seq, tgts)
        b = forward_outputs(ckpt2.net, seq, tgts)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_optimizer_and_rng_state_round_trip(self, tmp_path):
        cfg = tiny_sort_config(tmp_path, total_steps=2)
        result = train(cfg)
        loaded = load_checkpoint(result.checkpoint_path)
        assert loaded.step == 2
        assert loaded.optimizer_meta["lr"] == cfg.lr
        assert loaded.rng_state is not None
        assert any(np.any(v != 0) for v in loaded.optimizer_state.values())

    def test_truncated_file_gives_explicit_error(self, tmp_path):
        cfg = tiny_sort_config(tmp_path, total_steps=1)
        result = train(cfg)
        raw = result.checkpoint_path.read_bytes()
        bad = tmp_path / "bad.mgmc"
        bad.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_bad_magic_and_version(self, tmp_path):
        cfg = tiny_sort_config(tmp_path, total_steps=1)
        result = train(cfg)
        raw = bytearray(result.checkpoint_path.read_bytes())
        bad = tmp_path / "magic.mgmc"
        bad.write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
        raw[4:8] = (99).to_bytes(4, "little")
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_float64_net_rejected(self, tmp_path):
        net = build_network(configs.sort_network(4), 0, dtype=np.float64)
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "x.mgmc", Checkpoint(net=net))


class TestVisualize:
    def test_constant_state_is_mid_gray(self):
        img = normalize_to_bytes(np.full((3, 3), 2.5))
        assert np.all(img == 128)

    def test_ramp_normalization_endpoints_and_linearity(self):
        values = np.arange(9, dtype=np.float64).reshape(3, 3)
        img = normalize_to_bytes(values)
        want = np.rint(np.arange(9) / 8 * 255).astype(np.uint8).reshape(3, 3)
        np.testing.assert_array_equal(img, want)
        assert img[0, 0] == 0 and img[2, 2] == 255

    def test_export_writes_pgm_and_csv(self, tmp_path):
        h = Tensor(rng(11).normal(size=(1, 4, 4, 3)).astype(np.float32))
        state = MemoryState((h,), (Tensor(np.zeros_like(h.data)),))
        path = tmp_path / "mem.pgm"
        img = export_memory_visual(state, level=0, out_path=path, channel=1)
        assert read_pgm(path).shape == (4, 4)
        np.testing.assert_array_equal(read_pgm(path), img)
        csv_rows = (tmp_path / "mem.csv").read_text().strip().splitlines()
        assert len(csv_rows) == 4

    def test_pearson_and_best_channel(self):
        ref = rng(12).normal(size=(4, 4))
        grid = np.stack([rng(13).normal(size=(4, 4)), ref * 2.0 + 1.0], axis=2)
        state = MemoryState((Tensor(grid[None].astype(np.float32)),),
                            (Tensor(np.zeros((1, 4, 4, 2), np.float32)),))
        ch, r = best_channel_correlation(state, 0, ref)
        assert ch == 1
        assert r == pytest.approx(1.0, abs=1e-6)
        assert pearson(ref, -ref) == pytest.approx(-1.0)
