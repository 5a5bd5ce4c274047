"""Acceptance criteria, one test per criterion, each printing a verdict.

Criteria 8 and 9 train the mapping network to convergence and are
marked slow; run them with ``pytest -m slow``.  Everything else runs in
the default suite.
"""

import time

import numpy as np
import pytest

import mgmem.tensor as tc
from mgmem import configs, tasks
from mgmem.checkpoint import load_checkpoint
from mgmem.layers import MultigridConvLSTM, Pyramid, pyramid_spec
from mgmem.networks import LayerSpec, NetworkSpec, ReaderSpec, HeadSpec, build_network
from mgmem.routing import TopologyNode, TopologySpec, baseline_extent, reachable, verify_prop1
from mgmem.tensor import Kernel, Tensor, grad_check, sum_all
from mgmem.training import (
    evaluate,
    generate_episodes,
    mapping_sequences,
    run_writer_reader,
    train,
)
from mgmem.visualize import best_channel_correlation
from oracles import lstm_level_params, oracle_peephole_convlstm


def report(num, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num} {status}: {detail}")
    assert ok, detail


def rng(seed=0):
    return np.random.default_rng(seed)


def t64(r, shape, scale=1.0, jitter=0.0):
    base = r.normal(size=shape) * scale
    if jitter:
        base += r.uniform(jitter, 2 * jitter, size=shape)
    return Tensor(base, trainable=True)


class TestCriterion1Gradients:
    def test_every_primitive_and_unrolled_net(self):
        start = time.monotonic()
        r = rng(101)
        errors = {}

        x = t64(r, (2, 4, 4, 2), 0.5)
        w = t64(r, (3, 3, 2, 3), 0.5)
        b = t64(r, (1, 1, 1, 3), 0.1)
        errors["conv2d"] = grad_check(
            lambda a, ww, bb: sum_all(tc.tanh(tc.conv2d(a, Kernel(ww, bb)))), [x, w, b])

        jit = t64(rng(102), (1, 4, 4, 2), 1.0, jitter=0.01)
        errors["maxpool2"] = grad_check(lambda a: sum_all(tc.tanh(tc.maxpool2(a))), [jit])
        errors["upsample2"] = grad_check(
            lambda a: sum_all(tc.sigmoid(tc.upsample2(a))), [t64(rng(103), (1, 2, 2, 2))])

        a1 = t64(rng(104), (1, 3, 3, 2))
        a2 = t64(rng(105), (1, 3, 3, 1))
        errors["concat_channels"] = grad_check(
            lambda p, q: sum_all(tc.tanh(tc.concat_channels([p, q]))), [a1, a2])
        errors["slice_channels"] = grad_check(
            lambda p: sum_all(tc.sigmoid(tc.slice_channels(p, 0, 1))), [a1])

        b1 = t64(rng(106), (1, 2, 2, 2))
        b2 = t64(rng(107), (1, 2, 2, 2))
        errors["add"] = grad_check(lambda p, q: sum_all(tc.tanh(tc.add(p, q))), [b1, b2])
        errors["hadamard"] = grad_check(
            lambda p, q: sum_all(tc.tanh(tc.hadamard(p, q))), [b1, b2])
        errors["sigmoid"] = grad_check(lambda p: sum_all(tc.sigmoid(p)), [b1])
        errors["tanh"] = grad_check(lambda p: sum_all(tc.tanh(p)), [b1])
        errors["scale"] = grad_check(lambda p: sum_all(tc.scale(p, -1.7)), [b1])

        relu_in = t64(rng(108), (1, 3, 3, 2), 1.0, jitter=0.05)
        errors["relu"] = grad_check(lambda p: sum_all(tc.relu(p)), [relu_in])

        v = t64(rng(109), (1, 1, 1, 2))
        errors["scale_channels"] = grad_check(
            lambda p, vv: sum_all(tc.tanh(tc.scale_channels(p, vv))), [b1, v])
        errors["sum_all"] = grad_check(lambda p: tc.scale(sum_all(p), 0.5), [b1])

        aw = t64(rng(110), (1, 1, 8, 3), 0.3)
        ab = t64(rng(111), (1, 1, 1, 3), 0.1)
        errors["affine"] = grad_check(
            lambda p, ww, bb: sum_all(tc.sigmoid(tc.affine(p, ww, bb))),
            [t64(rng(112), (2, 2, 2, 2))] + [aw, ab])
        errors["crop_center"] = grad_check(
            lambda p: sum_all(tc.tanh(tc.crop_center(p, 2, 2))), [t64(rng(113), (1, 4, 4, 1))])

        s = tc.NormState.create(2, dtype=np.float64)
        bn_x = t64(rng(114), (4, 2, 2, 2))
        errors["batchnorm"] = grad_check(
            lambda p, g, be: sum_all(tc.tanh(tc.batchnorm(p, s))),
            [bn_x, s.gamma, s.beta])

        y = Tensor(rng(115).integers(0, 2, size=(2, 3, 3, 1)).astype(np.float64))
        errors["bce_logits_loss"] = grad_check(
            lambda z: tc.bce_logits_loss(z, y), [t64(rng(116), (2, 3, 3, 1))])

        # 2-layer, 2-level, 3-step recurrent unroll
        r2 = rng(117)
        in_spec = pyramid_spec((2, 2, 1))
        spec = pyramid_spec((2, 2, 1), (4, 4, 2))
        l0 = MultigridConvLSTM.create(r2, in_spec, spec, dtype=np.float64)
        l1 = MultigridConvLSTM.create(r2, spec, spec, dtype=np.float64)
        steps = [Tensor(r2.normal(size=(1, 2, 2, 1)), trainable=True) for _ in range(3)]

        def unrolled(*_):
            s0, s1 = l0.init_state(1, np.float64), l1.init_state(1, np.float64)
            total = None
            for xin in steps:
                p0, s0 = l0.forward(Pyramid((xin,)), s0)
                p1, s1 = l1.forward(p0, s1)
                part = sum_all(tc.tanh(p1.level(1)))
                total = part if total is None else tc.add(total, part)
            return total

        params = [t for layer in (l0, l1) for t in layer.named_params("p").values()]
        errors["mg_conv_lstm_bptt"] = grad_check(unrolled, params + steps)

        elapsed = time.monotonic() - start
        worst = max(errors.values())
        ok = worst < 1e-4 and elapsed < 120
        report(1, ok, f"max grad_check error {worst:.2e} over {len(errors)} primitives, "
                      f"{elapsed:.0f}s (budget 120s)")


class TestCriterion2ConvLstmReduction:
    def test_single_level_matches_oracle_100_triples(self):
        start = time.monotonic()
        r = rng(201)
        worst = 0.0
        for _ in range(100):
            spec = pyramid_spec((4, 4, 3))
            in_spec = pyramid_spec((4, 4, 2))
            layer = MultigridConvLSTM.create(r, in_spec, spec, residual=False,
                                             dtype=np.float64)
            x = Pyramid((Tensor(r.normal(size=(2, 4, 4, 2))),))
            state = layer.init_state(2, np.float64)
            state.h[0].data[:] = r.normal(size=state.h[0].shape)
            state.c[0].data[:] = r.normal(size=state.c[0].shape)
            out, s2 = layer.forward(x, state)
            want_h, want_c = oracle_peephole_convlstm(
                x.level(0).data, state.h[0].data, state.c[0].data,
                lstm_level_params(layer.levels[0]))
            worst = max(worst,
                        float(np.abs(out.level(0).data - want_h).max()),
                        float(np.abs(s2.c[0].data - want_c).max()))
        elapsed = time.monotonic() - start
        ok = worst < 1e-6 and elapsed < 60
        report(2, ok, f"max deviation {worst:.2e} over 100 triples, "
                      f"{elapsed:.0f}s (budget 60s)")


class TestCriterion3Routing:
    def test_bound_containment_and_baseline(self):
        start = time.monotonic()
        topo = TopologySpec(layers=6, levels=4, base=6)
        prop = verify_prop1(topo, m_max=6, n_max=4)

        single = TopologySpec(layers=10, levels=1, base=16)
        reach = reachable(single, TopologyNode(1, 1, 1, 1))
        baseline_ok = all(reach.box_extent(m, 1) == baseline_extent(m)
                          for m in range(1, 11))
        elapsed = time.monotonic() - start
        ok = prop.ok and baseline_ok and elapsed < 60
        report(3, ok, f"{len(prop.rows)} (m,n) boxes contained, single-level extents "
                      f"match depth for m<=10, {elapsed:.1f}s (budget 60s)")


class TestCriterion4ParameterDecoupling:
    def test_doubling_resolution_keeps_count(self):
        spec = configs.mapping_network(9)

        def scale(s: NetworkSpec, f: int) -> NetworkSpec:
            from mgmem.layers import LevelSpec

            def lv(levels):
                return tuple(LevelSpec(l.rows * f, l.cols * f, l.channels)
                             for l in levels)

            return NetworkSpec(
                kind=s.kind,
                input_levels=lv(s.input_levels),
                core=tuple(LayerSpec(c.kind, lv(c.levels), c.residual, c.norm)
                           for c in s.core),
                readers=tuple(ReaderSpec(
                    input_levels=lv(rd.input_levels),
                    layers=tuple(LayerSpec(c.kind, lv(c.levels), c.residual, c.norm)
                                 for c in rd.layers),
                    head=HeadSpec(rd.head.kind, rd.head.out, rd.head.level,
                                  (rd.head.crop[0] * f, rd.head.crop[1] * f)),
                    memory_layers=rd.memory_layers) for rd in s.readers),
            )

        base = build_network(spec, 0).param_count()
        doubled = build_network(scale(spec, 2), 0).param_count()
        report(4, base == doubled,
               f"param count {base} unchanged when every grid doubles ({doubled})")


class TestCriterion5ZeroNullity:
    def test_fifty_step_episode_stays_zero(self):
        net = build_network(configs.mapping_network(9), 0)
        for name, t in net.params.items():
            if name.startswith("writer."):
                t.data[:] = 0.0
        r = rng(501)
        states = net.init_state(2)
        zero_q = Tensor(np.zeros((2, 5, 5, 2), np.float32))
        for _ in range(50):
            x = Tensor(r.normal(size=(2, 5, 5, 4)).astype(np.float32))
            _, states = net.step(x, [zero_q], states)
        worst = max(float(np.abs(t.data).max())
                    for st in states for t in list(st.h) + list(st.c))
        report(5, worst == 0.0, f"max |state| after 50 steps = {worst}")


def _train_and_check_bits(cfg, budget_s, max_instances, criterion, label):
    start = time.monotonic()
    result = train(cfg)
    elapsed = time.monotonic() - start
    instances = result.steps_run * cfg.batch_size
    final = result.final_eval or {}
    err = final.get("bit_error_mean", 1.0)
    count = final.get("count", 0)
    ok = (err < 0.02 and instances <= max_instances and count == 500
          and elapsed < budget_s)
    report(criterion, ok,
           f"{label}: bit error {err:.4f} on {count:.0f} held-out after "
           f"{instances} instances, {elapsed:.0f}s (budget {budget_s}s)")


class TestCriterion6PrioritySort:
    def test_desk_scale_sort(self, tmp_path):
        cfg = configs.sort_config(out_dir=str(tmp_path / "sort"))
        net = build_network(cfg.net, 0)
        assert net.param_count() <= 100_000
        assert cfg.batch_size * cfg.total_steps <= 200_000
        _train_and_check_bits(cfg, budget_s=7200, max_instances=200_000,
                              criterion=6, label="sort L=8 d=6")


class TestCriterion7AssociativeRecall:
    def test_desk_scale_recall(self, tmp_path):
        cfg = configs.recall_config(out_dir=str(tmp_path / "recall"))
        assert cfg.batch_size * cfg.total_steps <= 200_000
        _train_and_check_bits(cfg, budget_s=7200, max_instances=200_000,
                              criterion=7, label="recall L=6 d=6")


@pytest.fixture(scope="module")
def trained_mapping(tmp_path_factory):
    cfg = configs.mapping_config(
        out_dir=str(tmp_path_factory.mktemp("mapping") / "run"))
    start = time.monotonic()
    result = train(cfg)
    return cfg, result, time.monotonic() - start


@pytest.mark.slow
class TestCriterion8Mapping:
    def test_desk_scale_localization(self, trained_mapping):
        cfg, result, elapsed = trained_mapping
        final = result.final_eval or {}
        f = final.get("f_mean", 0.0)
        ok = (f > 0.90 and result.steps_run <= 300_000
              and final.get("count") == 200 and elapsed < 12 * 3600)
        report(8, ok, f"mapping 9x9 spiral: F={f:.4f} on 200 episodes after "
                      f"{result.steps_run} steps, {elapsed:.0f}s (budget 12h)")


@pytest.mark.slow
class TestCriterion9MemoryVisualization:
    def test_memory_mirrors_explored_map(self, trained_mapping):
        cfg, result, _ = trained_mapping
        net = load_checkpoint(result.checkpoint_path).net
        episode = generate_episodes(cfg.task, cfg.task_params, 1,
                                    np.random.default_rng(901))[0]
        sequence, _ = mapping_sequences(
            [episode], cfg.task_params["m"], cfg.task_params["k"],
            obs_grid=net.spec.input_levels[0].rows,
            query_grid=net.spec.readers[0].input_levels[0].rows)
        _, states = run_writer_reader(net, sequence)

        n = episode.world.n
        seen = np.zeros((n, n), dtype=bool)
        for pos in episode.trajectory.positions:
            for cell in tasks.observation_footprint(episode.world, tuple(pos),
                                                    cfg.task_params["m"]):
                seen[cell] = True
        canvas = np.zeros((tasks.canvas_size(n), tasks.canvas_size(n)))
        for cell in np.argwhere(seen):
            canvas[tasks.canvas_index(tuple(cell), episode.world.start, n)] = 1.0

        channel, corr = best_channel_correlation(states[-1], level=-1,
                                                 reference=canvas)
        report(9, corr > 0.5,
               f"deepest finest grid channel {channel}: |pearson r| = {corr:.3f}")


class TestCriterion10Determinism:
    def test_bitwise_metrics_and_checkpoint_round_trip(self, tmp_path):
        start = time.monotonic()
        cfg_kw = dict(length=4, dim=4)

        def run(out):
            cfg = configs.sort_config(out_dir=str(out), **cfg_kw)
            cfg.total_steps = 100
            cfg.batch_size = 4
            cfg.eval_every = 0
            cfg.early_stop_metric = ""
            return train(cfg)

        a, b = run(tmp_path / "a"), run(tmp_path / "b")

        def rows_without_seconds(path):
            return [",".join(line.split(",")[:-1])
                    for line in path.read_text().strip().splitlines()]

        metrics_ok = rows_without_seconds(a.metrics_path) == rows_without_seconds(b.metrics_path)

        loaded = load_checkpoint(a.checkpoint_path)
        eps = [tasks.gen_sort(4, 4, rng(1001)) for _ in range(2)]
        from mgmem.training import sort_sequences, forward_outputs
        seq, tgts = sort_sequences(eps)
        out1 = forward_outputs(loaded.net, seq, tgts)
        out2 = forward_outputs(load_checkpoint(a.checkpoint_path).net, seq, tgts)
        ckpt_ok = all(np.array_equal(x.data, y.data) for x, y in zip(out1, out2))
        elapsed = time.monotonic() - start
        ok = metrics_ok and ckpt_ok and elapsed < 300
        report(10, ok, f"100-step metrics bitwise equal ({metrics_ok}), checkpoint "
                       f"round-trip bitwise ({ckpt_ok}), {elapsed:.0f}s (budget 300s)")


class TestCriterion11EncoderDecoderTransfer:
    def test_exact_copy_and_sensitivity(self):
        start = time.monotonic()
        net = build_network(configs.sort_network(4), 1101)
        r = rng(1102)
        seq = [Tensor(r.normal(size=(1, 3, 3, 2)).astype(np.float32))
               for _ in range(4)]
        enc_states = net.encode(seq)
        enc_again = net.encode(seq)
        copy_ok = all(
            np.array_equal(x.data, y.data)
            for a, b in zip(enc_states, enc_again)
            for x, y in zip(list(a.h) + list(a.c), list(b.h) + list(b.c)))
        # decode() consumes exactly the transferred tensors
        outs = net.decode(enc_states, out_len=2)

        seq2 = [Tensor(t.data.copy()) for t in seq]
        seq2[1].data[0, 1, 1, 0] += 0.5
        bumped = net.run(seq2, 2)
        base = net.run(seq, 2)
        sensitivity = max(float(np.abs(x.data - y.data).max())
                          for x, y in zip(base, bumped))
        elapsed = time.monotonic() - start
        ok = copy_ok and sensitivity > 0 and len(outs) == 2 and elapsed < 60
        report(11, ok, f"state transfer exact ({copy_ok}), input sensitivity "
                       f"{sensitivity:.2e} > 0, {elapsed:.1f}s (budget 60s)")
