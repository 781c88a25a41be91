import dataclasses

import numpy as np
import pytest

from otafl.config import AlgorithmKind, config_from_dict
from otafl.harness import prepare_env, run_experiment
from otafl.local_update import OutputSchedule
from otafl.orchestrator import RunEnv, run_trial, select_participants
from otafl.streams import INIT, substream
from otafl.tasks import (
    LINEAR_REGRESSION,
    FederatedDataset,
    UserDataset,
    full_grad,
    gen_synthetic,
    global_optimum,
    pooled_hessian_extremes,
)
from otafl.tasks import SyntheticConfig


def tiny_cfg(**over):
    doc = {
        "algorithms": ["fedavg_noiseless"],
        "num_users": 5,
        "k_local": 4,
        "rounds": 12,
        "eta_l": 1e-2,
        "snr_db": 10.0,
        "power": 1.0,
        "trials": 1,
        "master_seed": 5,
        "synthetic": {"samples_per_user": 30, "dim": 4},
        "calibration": {"frac": 0.5, "trials": 3},
    }
    doc.update(over)
    return config_from_dict(doc)


def env_for(fed, cfg, calibrate_for=("cotaf", "cobaaf")):
    """RunEnv over a hand-built dataset (bypasses the config dataset path)."""
    from otafl.precoding import FEDAVG_DYNAMICS, SCAFFOLD_DYNAMICS, calibrate

    mu, _ = pooled_hessian_extremes(fed)
    oracle = global_optimum(fed)
    batch = cfg.synthetic.batch_size
    env = RunEnv(
        cfg=cfg,
        fed=fed,
        oracle=oracle,
        schedule=OutputSchedule(mu, cfg.k_local * cfg.eta_l),
        batch_size=batch,
        refresh_batch=cfg.k_local * batch,
    )
    spec = cfg.calibration
    if "cotaf" in calibrate_for:
        env.calib_fedavg = calibrate(fed, spec.frac, spec.trials, cfg.rounds, cfg.k_local,
                                     cfg.eta_l, FEDAVG_DYNAMICS, spec.seed, batch)
    if "cobaaf" in calibrate_for:
        env.calib_scaffold = calibrate(fed, spec.frac, spec.trials, cfg.rounds, cfg.k_local,
                                       cfg.eta_l, SCAFFOLD_DYNAMICS, spec.seed, batch)
    return env


class TestZeroNoiseCollapse:
    @pytest.fixture(scope="class")
    def results(self):
        cfg = tiny_cfg(
            algorithms=[
                "fedavg_noiseless", "fedavg_noisy_const_amp", "cotaf", "baaf",
                "cobaaf", "scaffold_noiseless", "cobaaf_fading",
            ],
            snr_db=None, noise_var=0.0,
            fading={"family": "unit", "participants": 5},
        )
        env = prepare_env(cfg)
        return {k: run_trial(k, env, 0, keep_history=True) for k in cfg.algorithms}

    @pytest.mark.parametrize(
        "a,b",
        [
            ("fedavg_noiseless", "fedavg_noisy_const_amp"),
            ("fedavg_noiseless", "cotaf"),
            ("fedavg_noiseless", "baaf"),
            ("scaffold_noiseless", "cobaaf"),
            ("cobaaf", "cobaaf_fading"),
        ],
    )
    def test_bitwise_chain(self, results, a, b):
        ha = results[AlgorithmKind(a)].history
        hb = results[AlgorithmKind(b)].history
        for x, y in zip(ha, hb):
            np.testing.assert_array_equal(x, y)


class TestUnitFadingReduction:
    def test_noisy_reduction_bit_for_bit(self):
        # full participation over a unit channel must be indistinguishable
        # from the non-fading run even with noise on
        cfg = tiny_cfg(
            algorithms=["cobaaf", "cobaaf_fading"],
            fading={"family": "unit", "h_min": 0.4, "rho_min": 0.9, "participants": 5},
        )
        env = prepare_env(cfg)
        a = run_trial(AlgorithmKind.COBAAF, env, 0, keep_history=True)
        b = run_trial(AlgorithmKind.COBAAF_FADING, env, 0, keep_history=True)
        for x, y in zip(a.history, b.history):
            np.testing.assert_array_equal(x, y)

    def test_partial_participation_counts(self):
        cfg = tiny_cfg(
            algorithms=["cobaaf_fading"],
            fading={"family": "uniform", "params": (0.5, 1.5), "h_min": 0.6,
                    "rho_min": 0.6, "participants": 3},
        )
        env = prepare_env(cfg)
        res = run_trial(AlgorithmKind.COBAAF_FADING, env, 0)
        assert all(m.participants == 3 for m in res.metrics)
        assert np.isfinite(res.final_gap)


class TestDeterminism:
    def test_same_seed_identical_metrics(self):
        cfg = tiny_cfg(algorithms=["baaf"])
        env = prepare_env(cfg)
        a = run_trial(AlgorithmKind.BAAF, env, 0)
        b = run_trial(AlgorithmKind.BAAF, env, 0)
        assert [m.loss_gap for m in a.metrics] == [m.loss_gap for m in b.metrics]

    def test_metrics_length_and_rounds(self):
        cfg = tiny_cfg(algorithms=["fedavg_noisy_const_amp"], rounds=9)
        env = prepare_env(cfg)
        res = run_trial(AlgorithmKind.FEDAVG_NOISY, env, 0)
        assert len(res.metrics) == 9
        assert [m.round for m in res.metrics] == list(range(1, 10))

    def test_trials_differ(self):
        cfg = tiny_cfg(algorithms=["fedavg_noiseless"])
        env = prepare_env(cfg)
        a = run_trial(AlgorithmKind.FEDAVG_NOISELESS, env, 0)
        b = run_trial(AlgorithmKind.FEDAVG_NOISELESS, env, 1)
        assert a.final_gap != b.final_gap


class TestSelectParticipants:
    def test_full_set(self):
        got = select_participants(np.random.default_rng(0), 6, 6)
        np.testing.assert_array_equal(got, np.arange(6))

    def test_single_frequencies(self):
        rng = np.random.default_rng(1)
        counts = np.zeros(3)
        n_draws = 10_000
        for _ in range(n_draws):
            counts[select_participants(rng, 3, 1)[0]] += 1
        se = np.sqrt((1 / 3) * (2 / 3) * n_draws)
        np.testing.assert_array_less(np.abs(counts - n_draws / 3), 3 * se)

    def test_pair_subsets_uniform(self):
        # all 6 two-subsets of 4 users appear with frequency 1/6
        rng = np.random.default_rng(2)
        from collections import Counter

        n_draws = 10_000
        freq = Counter(tuple(select_participants(rng, 4, 2)) for _ in range(n_draws))
        assert len(freq) == 6
        se = np.sqrt((1 / 6) * (5 / 6) * n_draws)
        for count in freq.values():
            assert abs(count - n_draws / 6) <= 3 * se

    def test_deterministic(self):
        a = select_participants(np.random.default_rng(9), 10, 4)
        b = select_participants(np.random.default_rng(9), 10, 4)
        np.testing.assert_array_equal(a, b)

    def test_bounds(self):
        with pytest.raises(ValueError):
            select_participants(np.random.default_rng(0), 3, 4)


class TestConvergence:
    def make_identical_users(self, n=4, d=3, num=40):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(num, d))
        theta = rng.normal(size=d)
        labels = feats @ theta
        user = UserDataset(feats, labels)
        return FederatedDataset([UserDataset(feats.copy(), labels.copy()) for _ in range(n)])

    def test_fedavg_noiseless_converges_on_homogeneous(self):
        fed = self.make_identical_users()
        cfg = tiny_cfg(
            algorithms=["fedavg_noiseless"], num_users=4, rounds=300, eta_l=5e-3,
            k_local=5, synthetic={"samples_per_user": 40, "dim": 3, "batch_size": 40},
        )
        env = env_for(fed, cfg, calibrate_for=())
        res = run_trial(AlgorithmKind.FEDAVG_NOISELESS, env, 0)
        assert res.final_gap <= 1e-8

    def test_scaffold_converges_under_heterogeneity(self):
        fed = gen_synthetic(SyntheticConfig(4, 40, 3, feature_het=0.0), seed=17)
        cfg = tiny_cfg(
            algorithms=["scaffold_noiseless"], num_users=4, rounds=600, eta_l=5e-3,
            k_local=5, synthetic={"samples_per_user": 40, "dim": 3, "batch_size": 40},
        )
        env = env_for(fed, cfg, calibrate_for=())
        res = run_trial(AlgorithmKind.SCAFFOLD, env, 0)
        assert res.final_gap <= 1e-6

    def test_scaffold_matches_fedavg_on_identical_users(self):
        # identical data + full batches: controls cancel exactly
        fed = self.make_identical_users()
        cfg = tiny_cfg(
            algorithms=["scaffold_noiseless", "fedavg_noiseless"], num_users=4,
            rounds=40, k_local=3,
            synthetic={"samples_per_user": 40, "dim": 3, "batch_size": 40},
        )
        env = env_for(fed, cfg, calibrate_for=())
        a = run_trial(AlgorithmKind.SCAFFOLD, env, 0, keep_history=True)
        b = run_trial(AlgorithmKind.FEDAVG_NOISELESS, env, 0, keep_history=True)
        for x, y in zip(a.history, b.history):
            np.testing.assert_allclose(x, y, atol=1e-10)

    def test_single_user_full_batch_is_centralized_gd(self):
        fed = self.make_identical_users(n=1)
        cfg = tiny_cfg(
            algorithms=["fedavg_noiseless"], num_users=1, rounds=25, k_local=1,
            eta_l=2e-2, synthetic={"samples_per_user": 40, "dim": 3, "batch_size": 40},
        )
        env = env_for(fed, cfg, calibrate_for=())
        res = run_trial(AlgorithmKind.FEDAVG_NOISELESS, env, 0, keep_history=True)
        theta = cfg.init_scale * substream(cfg.master_seed, INIT, 0).standard_normal(3)
        user = fed.users[0]
        for step, model in enumerate(res.history):
            np.testing.assert_array_equal(model, theta)
            theta = theta - cfg.eta_l * full_grad(user, theta)

    def test_noisy_algorithms_worse_than_noiseless(self):
        cfg = tiny_cfg(
            algorithms=["fedavg_noiseless", "fedavg_noisy_const_amp"],
            rounds=60, trials=4, power=0.002,
        )
        env = prepare_env(cfg)
        table = run_experiment(cfg, env)
        clean = np.mean(table.per_trial["fedavg_noiseless"]["final_window_gap"])
        noisy = np.mean(table.per_trial["fedavg_noisy_const_amp"]["final_window_gap"])
        assert noisy > clean


class TestPowerAudit:
    def test_precoded_power_within_budget(self):
        cfg = tiny_cfg(
            algorithms=["cotaf", "baaf", "cobaaf"], rounds=30, trials=6,
            num_users=8, power=0.7,
            synthetic={"samples_per_user": 60, "dim": 4},
            calibration={"frac": 0.5, "trials": 10},
        )
        table = run_experiment(cfg)
        for row in table.rows:
            assert row.mean_tx_power <= 1.05 * cfg.power

    def test_fading_transmissions_respect_budget(self):
        cfg = tiny_cfg(
            algorithms=["cobaaf_fading"], rounds=25, trials=4, num_users=8, power=0.5,
            synthetic={"samples_per_user": 60, "dim": 4},
            fading={"family": "uniform", "params": (0.5, 1.5), "h_min": 0.6,
                    "rho_min": 0.6, "participants": 4},
            calibration={"frac": 0.5, "trials": 10},
        )
        table = run_experiment(cfg)
        for row in table.rows:
            assert row.mean_tx_power <= 1.05 * cfg.power


class TestControlRefreshModes:
    def test_pre_local_differs_but_converges(self):
        cfg_post = tiny_cfg(algorithms=["scaffold_noiseless"], rounds=40)
        cfg_pre = tiny_cfg(algorithms=["scaffold_noiseless"], rounds=40,
                           control_refresh="pre_local")
        env_post = prepare_env(cfg_post)
        env_pre = dataclasses.replace(env_post, cfg=cfg_pre)
        a = run_trial(AlgorithmKind.SCAFFOLD, env_post, 0)
        b = run_trial(AlgorithmKind.SCAFFOLD, env_pre, 0)
        assert a.final_gap != b.final_gap
        assert np.isfinite(b.final_gap)


class TestPublicRunners:
    def test_run_wrappers_return_metrics(self):
        from otafl.orchestrator import run_cotaf, run_fedavg_noiseless

        cfg = tiny_cfg(algorithms=["cotaf"], rounds=6)
        metrics = run_cotaf(cfg)
        assert len(metrics) == 6
        metrics = run_fedavg_noiseless(tiny_cfg(rounds=4))
        assert len(metrics) == 4
