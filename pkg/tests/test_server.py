import numpy as np
import pytest

from dpfedsim.client import DivergedError
from dpfedsim.config import parse_config
from dpfedsim.learn.models import model_layout
from dpfedsim.net import ClientMessage, decode
from dpfedsim.params import ParamVector, unflatten
from dpfedsim.server import (
    RoundFailedError,
    RoundState,
    StopRule,
    aggregate,
    init_global,
    run_experiment,
    run_round,
    select_clients,
    setup_experiment,
)


class TestInitGlobal:
    def test_deterministic(self):
        a = init_global("micro_dual_branch", 3, 16, 16)
        b = init_global("micro_dual_branch", 3, 16, 16)
        assert np.array_equal(a.values, b.values)

    def test_biases_exactly_zero(self):
        theta = init_global("micro_dual_branch", 3, 16, 16)
        parts = unflatten(theta, model_layout("micro_dual_branch", 16, 16))
        for name in ("conv_b", "glob_b", "head_b"):
            assert np.array_equal(parts[name], np.zeros_like(parts[name]))
        lin = init_global("linear_pixel", 3, 8, 8)
        lparts = unflatten(lin, model_layout("linear_pixel", 8, 8))
        assert np.array_equal(lparts["bias"], np.zeros_like(lparts["bias"]))

    def test_weights_bounded(self):
        theta = init_global("linear_pixel", 5, 8, 8)
        parts = unflatten(theta, model_layout("linear_pixel", 8, 8))
        assert np.abs(parts["weight"]).max() <= 0.1


class TestSelectClients:
    def test_full_selection_sorted(self):
        rng = np.random.default_rng(0)
        assert select_clients([4, 2, 0, 3, 1], 5, rng) == [0, 1, 2, 3, 4]

    def test_out_of_range(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            select_clients([0, 1], 3, rng)
        with pytest.raises(ValueError):
            select_clients([0, 1], 0, rng)

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(42)
        counts = np.zeros(5)
        draws = 100_000
        for _ in range(draws):
            (pick,) = select_clients(range(5), 1, rng)
            counts[pick] += 1
        freqs = counts / draws
        assert np.abs(freqs - 0.2).max() <= 0.005

    def test_same_stream_same_selection(self):
        a = select_clients(range(10), 3, np.random.default_rng(7))
        b = select_clients(range(10), 3, np.random.default_rng(7))
        assert a == b
        assert len(set(a)) == 3


def msg(cid, delta, rnd=1):
    return ClientMessage(round=rnd, client_id=cid, delta=np.asarray(delta, dtype=float),
                         dp_applied=False)


class TestAggregate:
    def test_identical_deltas_dyadic_exact(self):
        theta = ParamVector([1.0, -2.0, 0.5], "m")
        d = np.array([0.25, 0.5, -0.75])
        out = aggregate(theta, [msg(i, d) for i in range(4)])
        assert np.array_equal(out.values, theta.values + d)

    def test_opposite_deltas_cancel_bit_exact(self):
        rng = np.random.default_rng(0)
        theta = ParamVector(rng.normal(size=8), "m")
        d = rng.normal(size=8)
        out = aggregate(theta, [msg(0, d), msg(1, -d)])
        assert np.array_equal(out.values, theta.values)

    def test_matches_sequential_scalar_oracle(self):
        rng = np.random.default_rng(3)
        theta = ParamVector(rng.normal(size=12), "m")
        deltas = [rng.normal(size=12) for _ in range(5)]
        out = aggregate(theta, [msg(i, d) for i, d in enumerate(deltas)])
        # scalar loop with the same accumulate-then-scale op order
        expected = np.zeros(12)
        for d in deltas:
            for j in range(12):
                expected[j] = 1.0 * d[j] + expected[j]
        inv = 1.0 / 5
        for j in range(12):
            expected[j] = inv * expected[j] + theta.values[j]
        assert np.array_equal(out.values, expected)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(9)
        theta = ParamVector(rng.normal(size=6), "m")
        messages = [msg(i, rng.normal(size=6)) for i in range(5)]
        a = aggregate(theta, messages)
        b = aggregate(theta, messages[::-1])
        order = [3, 0, 4, 1, 2]
        c = aggregate(theta, [messages[i] for i in order])
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.values, c.values)

    def test_zero_deltas_identity(self):
        theta = ParamVector([0.1, 0.2], "m")
        out = aggregate(theta, [msg(i, [0.0, 0.0]) for i in range(3)])
        assert np.array_equal(out.values, theta.values)

    def test_no_messages_rejected(self):
        with pytest.raises(ValueError, match="no updates"):
            aggregate(ParamVector([1.0], "m"), [])

    def test_mixed_rounds_rejected(self):
        theta = ParamVector([1.0], "m")
        with pytest.raises(ValueError, match="mixed rounds"):
            aggregate(theta, [msg(0, [0.1], rnd=1), msg(1, [0.1], rnd=2)])

    def test_wrong_round_rejected(self):
        theta = ParamVector([1.0], "m")
        with pytest.raises(ValueError, match="expected 5"):
            aggregate(theta, [msg(0, [0.1], rnd=4)], expected_round=5)

    def test_length_mismatch_rejected(self):
        theta = ParamVector([1.0, 2.0], "m")
        with pytest.raises(ValueError, match="length"):
            aggregate(theta, [msg(0, [0.1])])

    def test_duplicate_ids_rejected(self):
        theta = ParamVector([1.0], "m")
        with pytest.raises(ValueError, match="duplicate"):
            aggregate(theta, [msg(0, [0.1]), msg(0, [0.2])])

    def test_shard_size_weighting(self):
        theta = ParamVector([0.0], "m")
        messages = [msg(0, [1.0]), msg(1, [4.0])]
        out = aggregate(theta, messages, weights={0: 3.0, 1: 1.0})
        assert out.values[0] == pytest.approx(0.75 * 1.0 + 0.25 * 4.0)

    def test_equal_weights_match_default(self):
        rng = np.random.default_rng(1)
        theta = ParamVector(rng.normal(size=4), "m")
        messages = [msg(i, rng.normal(size=4)) for i in range(3)]
        default = aggregate(theta, messages)
        explicit = aggregate(theta, messages, weights={0: 1.0, 1: 1.0, 2: 1.0})
        np.testing.assert_allclose(explicit.values, default.values, rtol=1e-15)


def small_cfg(**overrides):
    raw = {
        "clients": 3,
        "rounds": 3,
        "model_kind": "micro_dual_branch",
        "dataset": {"n": 30, "h": 16, "w": 16},
        "dp": {"mechanism": "none", "clip_c": 1e18},
        "root_seed": 5,
    }
    raw.update(overrides)
    return parse_config(raw)


class TestRunRound:
    def test_zero_lr_leaves_theta_and_metrics(self):
        cfg = small_cfg(clients=1, hyper={"lr": 0.0, "batch": 16})
        env = setup_experiment(cfg)
        state = RoundState(0, env.theta0)
        out = run_round(state, env.clients, cfg.dp, env.transport,
                        env.test.images, env.test.masks, cfg.root_seed, env.layout)
        assert np.array_equal(out.theta.values, env.theta0.values)
        assert out.round_t == 1
        assert out.history[-1].round == 1

    def test_round_numbers_increment(self):
        cfg = small_cfg()
        res = run_experiment(cfg)
        assert [r.round for r in res.history] == [1, 2, 3]

    def test_all_dropped_fails(self):
        cfg = small_cfg(transport={"drop_rate": 0.99, "seed": 1})
        env = setup_experiment(cfg)
        state = RoundState(0, env.theta0)
        with pytest.raises(RoundFailedError, match="round failed"):
            for _ in range(20):  # some round loses every message
                state = run_round(state, env.clients, cfg.dp, env.transport,
                                  env.test.images, env.test.masks, cfg.root_seed, env.layout)

    def test_partial_drop_records_survivors(self):
        cfg = small_cfg(clients=5, dataset={"n": 60, "h": 16, "w": 16},
                        transport={"drop_rate": 0.3, "seed": 3}, rounds=1)
        res = run_experiment(cfg)
        assert 1 <= res.history[0].participating_clients <= 5

    def test_epsilon_columns(self):
        cfg = small_cfg(dp={"mechanism": "gaussian", "sigma": 0.05, "clip_c": 0.5}, rounds=1)
        res = run_experiment(cfg)
        rec = res.history[0]
        assert rec.epsilon_paper == 10.0
        assert rec.epsilon_classic > 0

    def test_server_noise_site_runs(self):
        cfg = small_cfg(
            dp={"mechanism": "gaussian", "sigma": 0.05, "clip_c": 0.5, "noise_site": "server"},
            rounds=2,
        )
        res = run_experiment(cfg)
        assert len(res.history) == 2


class TestRunExperiment:
    def test_exact_round_count_without_convergence(self):
        res = run_experiment(small_cfg(rounds=3))
        assert len(res.history) == 3

    def test_size_weighting_differs_with_unequal_shards(self):
        # 22 train samples over 3 clients: shard sizes 8, 7, 7
        base = small_cfg(rounds=2, dataset={"n": 32, "h": 16, "w": 16})
        sized = small_cfg(rounds=2, dataset={"n": 32, "h": 16, "w": 16}, weighting="size")
        assert parse_config({"weighting": "size"}).weighting == "size"
        equal_res = run_experiment(base)
        size_res = run_experiment(sized)
        assert not np.array_equal(equal_res.theta.values, size_res.theta.values)

    def test_unknown_weighting_rejected(self):
        from dpfedsim.config import ConfigError

        with pytest.raises(ConfigError, match="weighting"):
            parse_config({"weighting": "median"})

    def test_convergence_patience_stops_early(self):
        # zero learning rate: the metric plateaus immediately
        cfg = small_cfg(rounds=10, hyper={"lr": 0.0, "batch": 16},
                        convergence={"metric": "acc", "patience": 2, "min_delta": 1e-3})
        res = run_experiment(cfg)
        assert len(res.history) == 3  # first round sets the best, two stale rounds

    def test_loss_metric_convergence(self):
        cfg = small_cfg(rounds=10, hyper={"lr": 0.0, "batch": 16},
                        convergence={"metric": "loss", "patience": 3, "min_delta": 0.0})
        res = run_experiment(cfg)
        assert len(res.history) == 4

    def test_theta_finite(self):
        res = run_experiment(small_cfg())
        assert np.isfinite(res.theta.values).all()

    def test_divergence_aborts(self):
        cfg = small_cfg(hyper={"lr": 1e305, "batch": 16})
        with pytest.raises(DivergedError):
            run_experiment(cfg)

    def test_distributed_equals_sequential_reference(self):
        """Protocol oracle at small scale; the full one runs in acceptance."""
        from dpfedsim.learn.data import gen_dataset, partition
        from dpfedsim.learn.models import Model, forward_loss_grad
        from dpfedsim.seeds import derive_seed, rng_for

        cfg = small_cfg(clients=3, rounds=4)
        res = run_experiment(cfg)

        root = cfg.root_seed
        ds = gen_dataset(30, 16, 16, derive_seed(root, "dataset"))
        perm = rng_for(root, "split").permutation(30)
        train = ds.subset(perm[:21])
        shards = partition(train, 3, "iid", seed=derive_seed(root, "partition"))
        layout = model_layout("micro_dual_branch", 16, 16)
        theta = init_global("micro_dual_branch", derive_seed(root, "init"), 16, 16).values.copy()
        lr, batch, epochs = 0.1, 16, 5
        for rnd in range(1, 5):
            total = np.zeros_like(theta)
            for cid in range(3):
                sub = train.subset(shards[cid])
                rng = rng_for(derive_seed(root, "client", cid), "sgd", rnd)
                delta = np.zeros_like(theta)
                for _ in range(epochs):
                    order = rng.permutation(len(sub))
                    for s in range(0, len(sub), batch):
                        idx = order[s : s + batch]
                        point = ParamVector(1.0 * delta + theta, layout.layout_id)
                        _, g = forward_loss_grad(
                            Model("micro_dual_branch", point, layout),
                            sub.images[idx], sub.masks[idx],
                        )
                        delta = -lr * g.values + delta
                total = 1.0 * delta + total
            theta = (1.0 / 3) * total + theta
        assert np.array_equal(theta, res.theta.values)

    def test_capture_replay_reaggregates(self):
        cfg = small_cfg(rounds=1)
        capture = []
        env = setup_experiment(cfg, capture=capture)
        state = RoundState(0, env.theta0)
        out = run_round(state, env.clients, cfg.dp, env.transport,
                        env.test.images, env.test.masks, cfg.root_seed, env.layout)
        uploads = [m for f in capture for m in [decode(f)] if isinstance(m, ClientMessage)]
        assert len(uploads) == 3
        replayed = aggregate(env.theta0, uploads, expected_round=1)
        assert np.array_equal(replayed.values, out.theta.values)


def test_stop_rule_validation():
    with pytest.raises(ValueError):
        StopRule(max_rounds=0)
