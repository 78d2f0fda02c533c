import dataclasses

import numpy as np
import pytest

from bobasim import fedsim
from bobasim.datagen import LabeledDataset, make_gaussian_mixture_task
from bobasim.fedsim import (
    ConfigError,
    OneHiddenLayerNet,
    Schedule,
    SoftmaxRegression,
    local_update,
    loss_and_gradient,
    make_model,
    parse_config,
    run_experiment,
)
from bobasim.linalg import InvalidInputError


def tiny_dataset(rng, c=3, dim=4, per_class=5):
    return make_gaussian_mixture_task(c, dim, per_class, 2.0, rng)


def finite_difference(model, w, dataset, h=1e-6):
    grad = np.empty(w.size)
    for i in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        lp, _ = loss_and_gradient(model, wp, dataset)
        lm, _ = loss_and_gradient(model, wm, dataset)
        grad[i] = (lp - lm) / (2 * h)
    return grad


class TestModels:
    def test_softmax_gradient_finite_difference(self):
        rng = np.random.default_rng(0)
        ds = tiny_dataset(rng)
        model = SoftmaxRegression(4, 3)
        w = rng.normal(scale=0.3, size=model.num_params)
        _, grad = loss_and_gradient(model, w, ds)
        np.testing.assert_allclose(grad, finite_difference(model, w, ds), atol=1e-6)

    def test_mlp_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        ds = tiny_dataset(rng)
        model = OneHiddenLayerNet(4, 5, 3)
        w = rng.normal(scale=0.3, size=model.num_params)
        _, grad = loss_and_gradient(model, w, ds)
        np.testing.assert_allclose(grad, finite_difference(model, w, ds), atol=1e-6)

    def test_prox_term_gradient(self):
        rng = np.random.default_rng(2)
        ds = tiny_dataset(rng)
        model = SoftmaxRegression(4, 3)
        w = rng.normal(scale=0.3, size=model.num_params)
        anchor = rng.normal(scale=0.3, size=model.num_params)
        base_l, base_g = loss_and_gradient(model, w, ds)
        prox_l, prox_g = loss_and_gradient(model, w, ds, prox=(0.5, anchor))
        diff = w - anchor
        assert prox_l == pytest.approx(base_l + 0.25 * diff @ diff)
        np.testing.assert_allclose(prox_g, base_g + 0.5 * diff, atol=1e-12)

    def test_zero_weights_loss_is_log_c(self):
        rng = np.random.default_rng(3)
        ds = tiny_dataset(rng)
        model = SoftmaxRegression(4, 3)
        loss, _ = loss_and_gradient(model, np.zeros(model.num_params), ds)
        assert loss == pytest.approx(np.log(3), abs=1e-12)

    def test_make_model(self):
        assert isinstance(make_model("softmax", 4, 3), SoftmaxRegression)
        assert isinstance(make_model("mlp", 4, 3, hidden=7), OneHiddenLayerNet)
        with pytest.raises(ConfigError):
            make_model("cnn", 4, 3)


class TestLocalUpdate:
    def test_fedsgd_returns_gradient(self):
        rng = np.random.default_rng(4)
        ds = tiny_dataset(rng)
        model = SoftmaxRegression(4, 3)
        w = rng.normal(scale=0.1, size=model.num_params)
        np.testing.assert_array_equal(
            local_update(model, w, ds, 0.1, variant="fedsgd"),
            loss_and_gradient(model, w, ds)[1])

    def test_one_epoch_delta_is_eta_times_gradient(self):
        rng = np.random.default_rng(5)
        ds = tiny_dataset(rng)
        model = SoftmaxRegression(4, 3)
        w = rng.normal(scale=0.1, size=model.num_params)
        delta = local_update(model, w, ds, 0.2, epochs=1, variant="fedavg")
        np.testing.assert_allclose(delta, 0.2 * loss_and_gradient(model, w, ds)[1], atol=1e-12)

    def test_prox_variant_stays_closer_to_anchor(self):
        rng = np.random.default_rng(6)
        ds = tiny_dataset(rng)
        model = SoftmaxRegression(4, 3)
        w = rng.normal(scale=0.1, size=model.num_params)
        plain = local_update(model, w, ds, 0.05, epochs=20, variant="fedavg")
        prox = local_update(model, w, ds, 0.05, epochs=20, variant="fedprox", mu_prox=5.0)
        assert np.linalg.norm(prox) < np.linalg.norm(plain)

    def test_unknown_variant(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ConfigError):
            local_update(SoftmaxRegression(4, 3), np.zeros(15), tiny_dataset(rng),
                         0.1, variant="fedmax")


class TestSchedule:
    def test_piecewise_decay(self):
        s = Schedule(eta0=1.0, rounds=100, decay_start=10, decay_interval=5, decay_alpha=0.5)
        assert s.eta(0) == 1.0
        assert s.eta(9) == 1.0
        assert s.eta(10) == 0.5
        assert s.eta(14) == 0.5
        assert s.eta(15) == 0.25
        assert s.eta(20) == 0.125

    def test_validation(self):
        with pytest.raises(ConfigError):
            Schedule(eta0=-1.0)
        with pytest.raises(ConfigError):
            Schedule(decay_alpha=1.5)


class TestConfig:
    def test_parse_roundtrip(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(
            "[task]\nclasses = 4\ndim = 6\nper_class = 30\n"
            "[partition]\nscheme = step\nhonest = 5\nalpha = 10\n"
            "[model]\nkind = softmax\n"
            "[schedule]\nrounds = 3\neta0 = 0.2\nvariant = fedavg\nepochs = 2\n"
            "[aggregator]\nname = krum\nf = 1\n"
            "[attack]\nname = gauss\nbyz = 2\n"
            "[seeds]\nmaster = 11\n")
        cfg = parse_config(path)
        assert cfg.classes == 4 and cfg.scheme == "step" and cfg.alpha == 10.0
        assert cfg.schedule.rounds == 3 and cfg.schedule.eta0 == 0.2
        assert cfg.variant == "fedavg" and cfg.epochs == 2
        assert cfg.agr == "krum" and cfg.attack == "gauss" and cfg.byz == 2
        assert cfg.master_seed == 11

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[task]\nclasses = 4\nwidgets = 2\n")
        with pytest.raises(ConfigError, match="widgets"):
            parse_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[extras]\nx = 1\n")
        with pytest.raises(ConfigError, match="extras"):
            parse_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.ini")

    def test_inf_alpha(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[partition]\nscheme = step\nalpha = inf\n")
        assert np.isinf(parse_config(path).alpha)

    def test_semantic_validation(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[attack]\nname = lie\nbyz = 0\n")
        with pytest.raises(ConfigError):
            parse_config(path)


def quick_config(**over):
    cfg = fedsim.SimConfig(
        classes=4, dim=6, per_class=30, separation=3.0, server_per_class=10,
        test_per_class=20, oracle_per_class=200, honest=6, f=1,
        schedule=Schedule(eta0=0.1, rounds=4, decay_start=2, decay_interval=1,
                          decay_alpha=0.5))
    return dataclasses.replace(cfg, **over)


class TestRunExperiment:
    def test_round_records_and_summary(self):
        records, summary = run_experiment(quick_config())
        assert len(records) == 4
        assert records[0].eta == pytest.approx(0.1)
        assert records[2].eta == pytest.approx(0.05)
        assert summary["final_acc"] == records[-1].test_acc
        assert 0.0 <= summary["final_acc"] <= 1.0
        assert summary["mean_trsvd_calls"] >= 2

    def test_deterministic_across_runs(self):
        a = run_experiment(quick_config())
        b = run_experiment(quick_config())
        for ra, rb in zip(a[0], b[0]):
            np.testing.assert_array_equal(ra.aggregate, rb.aggregate)
            assert ra.test_acc == rb.test_acc
        assert a[1] == b[1]

    def test_seed_override_changes_results(self):
        a = run_experiment(quick_config())
        b = run_experiment(quick_config(), seed_override=99)
        assert a[1]["seed"] == 0 and b[1]["seed"] == 99
        assert a[0][0].train_loss != b[0][0].train_loss

    @pytest.mark.parametrize("agr", ["average", "coomed", "trmean", "krum", "mkrum",
                                     "geomed", "fltrust", "selfrej", "avgrej",
                                     "b-mkrum", "boba", "boba-es"])
    def test_all_aggregators_run(self, agr):
        records, summary = run_experiment(quick_config(agr=agr))
        assert np.isfinite(summary["final_acc"])

    @pytest.mark.parametrize("attack", ["gauss", "ipm", "lie", "mimic", "minmax", "minsum"])
    def test_all_attacks_run(self, attack):
        records, summary = run_experiment(quick_config(attack=attack, byz=2))
        assert np.isfinite(summary["final_acc"])

    @pytest.mark.parametrize("variant", ["fedavg", "fedprox"])
    def test_delta_variants_run(self, variant):
        records, summary = run_experiment(quick_config(variant=variant, epochs=2))
        assert np.isfinite(summary["final_acc"])

    def test_partial_participation(self):
        records, _ = run_experiment(quick_config(participation=0.5, agr="average"))
        assert records[0].accepted_count == 3

    def test_track_es_records_both_losses(self):
        records, _ = run_experiment(quick_config(track_es=True, attack="gauss", byz=2))
        for r in records:
            assert r.extras["loss_es"] <= r.extras["loss_alt"] + 1e-9

    def test_csv_and_summary_files(self, tmp_path):
        cfg = quick_config()
        records, summary = run_experiment(cfg)
        fedsim.write_rounds_csv(tmp_path / "rounds.csv", records, cfg, 0)
        fedsim.write_summary(tmp_path / "summary.txt", summary)
        lines = (tmp_path / "rounds.csv").read_text().splitlines()
        assert lines[0] == fedsim.ROUND_CSV_HEADER
        assert len(lines) == 5
        body = dict(l.split("=", 1) for l in (tmp_path / "summary.txt").read_text().splitlines())
        assert float(body["final_acc"]) == summary["final_acc"]
