"""Training orchestration tests: algorithm ordering, determinism, fallbacks,
baselines, and the reduction of the full objective to plain PU training."""

import numpy as np
import pytest

from puda import models, pipeline as pl
from puda.datasets import SyntheticShiftSpec, make_synthetic_shift
from puda.pipeline import (Predictor, TrainConfig, TrainingDivergedError,
                           evaluate_predictor, run_baseline, run_pu_da,
                           run_step1, run_step2, train_supervised)
from puda.selector import PseudoLabeledEntry, PseudoLabeledSet


def gaussian_spec(n=100, d=3, sep=3.0, shift=0.0):
    means = np.zeros((2, d))
    means[0, 0] = -sep / 2
    means[1, 0] = sep / 2
    target = means + shift * np.eye(d)[1]
    covs = [np.eye(d).tolist()] * 2
    return SyntheticShiftSpec(n_per_class=n, source_means=means.tolist(),
                              source_covs=covs, target_means=target.tolist(),
                              target_covs=covs)


def fast_config(**kw):
    defaults = dict(warm_up=3, step1_max_epoch=10, step2_max_epoch=10, m=3,
                    batch_source=32, batch_positive=8, batch_unlabeled=32,
                    batch_step2=32, lr=5e-2, d_z=6, encoder_hidden=(16,),
                    head_hidden=(8,), final_hidden=(16,), seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def easy_scenario():
    return make_synthetic_shift(gaussian_spec(n=100), c=0.1, seed=0)


class TestTrainConfig:
    def test_defaults_follow_documented_values(self):
        cfg = TrainConfig()
        assert cfg.warm_up == 20
        assert (cfg.t_p, cfg.t_n, cfg.m) == (0.95, 0.05, 20)
        assert cfg.optimizer == "sgd" and cfg.momentum == 0.9 and cfg.lr == 1e-3

    def test_warm_up_bounds(self):
        TrainConfig(warm_up=5, step1_max_epoch=5)  # equality is the guard case
        with pytest.raises(ValueError):
            TrainConfig(warm_up=6, step1_max_epoch=5)

    def test_round_trip(self):
        cfg = fast_config(alpha=0.7, stopping="patience")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_source=0)
        with pytest.raises(ValueError):
            TrainConfig(stopping="whenever")


class TestStep1:
    def test_no_harvest_epochs_gives_empty_candidates(self, easy_scenario):
        cfg = fast_config(step1_max_epoch=3, warm_up=3)
        out = run_step1(easy_scenario, cfg, variant="pu_da")
        assert len(out.candidates) == 0
        assert len(out.loss_trace) == 3
        assert len(out.thresholds_trace) == 3

    def test_no_candidate_at_or_before_warm_up(self, easy_scenario):
        cfg = fast_config()
        out = run_step1(easy_scenario, cfg, variant="pu_da")
        assert len(out.candidates) > 0
        assert all(r.epoch > cfg.warm_up for r in out.candidates)

    def test_deterministic_given_seed(self, easy_scenario):
        cfg = fast_config(step1_max_epoch=6)
        a = run_step1(easy_scenario, cfg, variant="pu_da")
        b = run_step1(easy_scenario, cfg, variant="pu_da")
        assert a.loss_trace == b.loss_trace
        assert [(r.example_id, r.probability, r.epoch) for r in a.candidates] == \
               [(r.example_id, r.probability, r.epoch) for r in b.candidates]

    def test_unlabeled_pool_untouched(self, easy_scenario):
        before = [(ex.id, ex.s, ex.true_label) for ex in easy_scenario.target_unlabeled]
        run_step1(easy_scenario, fast_config(step1_max_epoch=5), variant="pu_da")
        after = [(ex.id, ex.s, ex.true_label) for ex in easy_scenario.target_unlabeled]
        assert before == after

    def test_snapshot_refreshed_every_step(self, easy_scenario, monkeypatch):
        calls = []
        original = models.snapshot
        monkeypatch.setattr(pl.models, "snapshot",
                            lambda enc, hd, tag=0: calls.append(tag) or original(enc, hd, tag))
        cfg = fast_config(step1_max_epoch=2, warm_up=2)
        run_step1(easy_scenario, cfg, variant="pu_da")
        steps = 2 * int(np.ceil(len(easy_scenario.target_unlabeled) / cfg.batch_unlabeled))
        # one snapshot at initialization plus one after every optimizer step
        assert calls == list(range(0, steps + 1))

    def test_divergence_aborts_with_trace(self, easy_scenario):
        cfg = fast_config(lr=1e25, step1_max_epoch=3)
        with pytest.raises(TrainingDivergedError):
            run_step1(easy_scenario, cfg, variant="pu_da")

    def test_rejects_degenerate_prior(self, easy_scenario):
        sc = easy_scenario
        bad = type(sc).__new__(type(sc))
        bad.__dict__.update(sc.__dict__)
        bad.class_prior = 1.0
        with pytest.raises(ValueError):
            run_step1(bad, fast_config(), variant="pu_da")


class TestStep2:
    def _pseudo_from_truth(self, scenario, confident=True):
        entries = []
        for ex in scenario.target_unlabeled:
            p = (0.99 if ex.true_label else 0.01) if confident else float(ex.true_label)
            entries.append(PseudoLabeledEntry(ex.id, p, "P" if ex.true_label else "N"))
        return PseudoLabeledSet(entries)

    def test_separable_reaches_high_train_accuracy(self):
        scenario = make_synthetic_shift(gaussian_spec(n=100, sep=8.0), c=0.1, seed=2)
        pseudo = self._pseudo_from_truth(scenario)
        cfg = fast_config(step2_max_epoch=40, lr=1e-1)
        final, epochs = run_step2(pseudo, scenario, cfg)
        predictor = Predictor.from_final(final)
        preds = predictor.predict(scenario.target_unlabeled)
        truths = np.array([ex.true_label for ex in scenario.target_unlabeled])
        assert np.mean(preds == truths) >= 0.99
        assert epochs == 40

    def test_minimal_two_example_set(self, easy_scenario):
        pos = next(ex for ex in easy_scenario.target_unlabeled if ex.true_label == 1)
        neg = next(ex for ex in easy_scenario.target_unlabeled if ex.true_label == 0)
        pseudo = PseudoLabeledSet([PseudoLabeledEntry(pos.id, 0.99, "P"),
                                   PseudoLabeledEntry(neg.id, 0.01, "N")])
        final, _ = run_step2(pseudo, easy_scenario, fast_config(step2_max_epoch=3))
        assert final is not None

    def test_patience_stops_early(self, easy_scenario):
        pseudo = self._pseudo_from_truth(easy_scenario)
        cfg = fast_config(step2_max_epoch=200, stopping="patience", patience=3,
                          lr=2e-1)
        _, epochs = run_step2(pseudo, easy_scenario, cfg)
        assert epochs < 200

    def test_empty_pseudo_rejected(self, easy_scenario):
        with pytest.raises(ValueError):
            run_step2(PseudoLabeledSet([]), easy_scenario, fast_config())

    def test_final_classifier_shares_no_parameters(self, easy_scenario):
        cfg = fast_config(step1_max_epoch=8)
        artifacts = run_pu_da(easy_scenario, cfg)
        assert artifacts.status == "success"
        step1_params = {id(p) for p in artifacts.bundle.step1_parameters()}
        final_params = {id(p) for p in artifacts.final.parameters()}
        assert step1_params.isdisjoint(final_params)


class TestRunPuDa:
    def test_end_to_end_success_and_quality(self, easy_scenario):
        cfg = fast_config(step1_max_epoch=12, step2_max_epoch=25, lr=5e-2)
        artifacts = run_pu_da(easy_scenario, cfg)
        assert artifacts.status == "success"
        result = evaluate_predictor(artifacts.predictor, easy_scenario, "pu_da", 0)
        assert result.accuracy >= 0.9
        assert result.n_eval == len(easy_scenario.target_unlabeled) - \
            len(easy_scenario.target_positive)

    def test_no_shift_separable_high_balanced_accuracy(self):
        d = 6
        means = np.zeros((2, d))
        means[0, 0], means[1, 0] = -2.0, 2.0
        spec = SyntheticShiftSpec(n_per_class=150, source_means=means.tolist(),
                                  source_covs=[np.eye(d).tolist()] * 2,
                                  target_means=means.tolist(),
                                  target_covs=[np.eye(d).tolist()] * 2)
        sc = make_synthetic_shift(spec, c=0.05, seed=21)
        cfg = fast_config(warm_up=8, step1_max_epoch=25, step2_max_epoch=30,
                          m=8, t_p=0.6, t_n=0.4, batch_step2=64, lr=1e-2,
                          d_z=8, encoder_hidden=(32,), head_hidden=(16,),
                          final_hidden=(32, 16))
        artifacts = run_pu_da(sc, cfg)
        result = evaluate_predictor(artifacts.predictor, sc, "pu_da", 0)
        assert artifacts.status == "success"
        assert result.balanced_accuracy >= 0.95

    def test_deterministic_final_predictions(self, easy_scenario):
        cfg = fast_config(step1_max_epoch=8)
        a = run_pu_da(easy_scenario, cfg)
        b = run_pu_da(easy_scenario, cfg)
        pool = easy_scenario.evaluation_pool()
        np.testing.assert_array_equal(a.predictor.predict_proba(pool),
                                      b.predictor.predict_proba(pool))
        assert len(a.pseudo) == len(b.pseudo)
        assert [(e.example_id, e.pseudo_label, e.polarity) for e in a.pseudo] == \
               [(e.example_id, e.pseudo_label, e.polarity) for e in b.pseudo]

    def test_config_variants_run_clean(self, easy_scenario):
        # gradient-ascent PU updates, sigmoid base loss, patience stopping
        cfg = fast_config(step1_max_epoch=6, warm_up=2, nnpu_gradient_ascent=True,
                          base_loss="sigmoid", stopping="patience", patience=2)
        artifacts = run_pu_da(easy_scenario, cfg)
        assert artifacts.status in ("success", "degraded")
        preds = artifacts.predictor.predict(easy_scenario.evaluation_pool())
        assert set(np.unique(preds)) <= {0, 1}

    def test_empty_extraction_falls_back_degraded(self, easy_scenario):
        # m larger than the number of harvest epochs cannot be satisfied
        cfg = fast_config(step1_max_epoch=6, warm_up=4, m=50)
        artifacts = run_pu_da(easy_scenario, cfg)
        assert artifacts.status == "degraded"
        assert artifacts.final is None
        assert len(artifacts.pseudo) == 0
        preds = artifacts.predictor.predict(easy_scenario.evaluation_pool())
        assert set(np.unique(preds)) <= {0, 1}


class TestBaselines:
    def test_unknown_kind_rejected(self, easy_scenario):
        with pytest.raises(ValueError):
            run_baseline("dfa", easy_scenario, fast_config())

    def test_source_only_matches_reference_supervised_training(self, easy_scenario):
        cfg = fast_config(step1_max_epoch=15)
        baseline = run_baseline("source_only", easy_scenario, cfg)
        reference = train_supervised(easy_scenario.source, cfg)
        pool = easy_scenario.evaluation_pool()
        truths = np.array([ex.true_label for ex in pool])
        acc_b = np.mean(baseline.predict(pool) == truths)
        acc_r = np.mean(reference.predict(pool) == truths)
        assert abs(acc_b - acc_r) <= 0.02

    def test_alpha_beta_zero_reduces_to_nnpu(self):
        """With alpha = beta = 0 the full pipeline's step 1 is plain PU training;
        paired seeds land within noise of the standalone baseline."""
        gaps = []
        for seed in range(3):
            sc = make_synthetic_shift(gaussian_spec(n=80), c=0.1, seed=seed)
            cfg = fast_config(alpha=0.0, beta=0.0, step1_max_epoch=10, seed=seed)
            full = run_step1(sc, cfg, variant="pu_da")
            pred_full = Predictor.from_encoder_head(full.bundle.encoder,
                                                    full.bundle.head)
            pred_base = run_baseline("nnpu_only", sc, cfg)
            pool = sc.evaluation_pool()
            truths = np.array([ex.true_label for ex in pool])
            gaps.append(abs(np.mean(pred_full.predict(pool) == truths)
                            - np.mean(pred_base.predict(pool) == truths)))
        assert np.mean(gaps) <= 0.05

    def test_shifted_scenario_beats_nnpu_on_most_seeds(self):
        """Paired seeds on a rotated-shift scenario: the two-step pipeline wins
        against plain PU training on most draws of the labeled subset."""
        d = 16
        means = np.zeros((2, d))
        means[0, 0], means[1, 0] = -1.25, 1.25
        target = np.zeros((2, d))
        target[0, 0] = target[0, 1] = -1.25 / np.sqrt(2)
        target[1, 0] = target[1, 1] = 1.25 / np.sqrt(2)
        spec = SyntheticShiftSpec(n_per_class=150, source_means=means.tolist(),
                                  source_covs=[np.eye(d).tolist()] * 2,
                                  target_means=target.tolist(),
                                  target_covs=[np.eye(d).tolist()] * 2)
        wins = 0
        seeds = range(5)
        for seed in seeds:
            sc = make_synthetic_shift(spec, c=0.05, seed=500, label_seed=seed)
            cfg = fast_config(seed=seed, step1_max_epoch=30, warm_up=8, m=10,
                              step2_max_epoch=30, batch_step2=64,
                              t_p=0.6, t_n=0.4, lr=1e-2, d_z=8,
                              encoder_hidden=(32,), head_hidden=(16,),
                              final_hidden=(32, 16))
            art = run_pu_da(sc, cfg)
            acc_pu = evaluate_predictor(art.predictor, sc, "pu_da", seed).accuracy
            base = run_baseline("nnpu_only", sc, cfg)
            acc_nn = evaluate_predictor(base, sc, "nnpu_only", seed).accuracy
            wins += acc_pu >= acc_nn
        assert wins >= 4

    def test_nnpu_full_labels_approaches_supervised(self):
        """With c = 1 every positive is labeled; PU training should come within
        a few points of supervised training on the same separable data."""
        sc = make_synthetic_shift(gaussian_spec(n=100, sep=4.0), c=1.0, seed=1)
        cfg = fast_config(step1_max_epoch=15, lr=5e-2, seed=1)
        nnpu = run_baseline("nnpu_only", sc, cfg)
        target_as_labeled = [type(ex)(ex.id, ex.features, ex.true_label, 1)
                             for ex in sc.target_unlabeled]
        supervised = train_supervised(target_as_labeled, cfg)
        pool = sc.evaluation_pool()
        truths = np.array([ex.true_label for ex in pool])
        acc_pu = np.mean(nnpu.predict(pool) == truths)
        acc_sup = np.mean(supervised.predict(pool) == truths)
        assert acc_pu >= acc_sup - 0.03


class TestEvaluatePredictor:
    def test_result_fields(self, easy_scenario):
        predictor = Predictor(lambda exs: np.full(len(exs), 0.7))
        result = evaluate_predictor(predictor, easy_scenario, "const", seed=9)
        assert result.method == "const" and result.seed == 9
        assert result.c == easy_scenario.label_frequency
        # constant positive prediction scores the positive fraction of the pool
        pool = easy_scenario.evaluation_pool()
        frac_pos = np.mean([ex.true_label for ex in pool])
        assert result.accuracy == pytest.approx(frac_pos)
        assert result.balanced_accuracy == pytest.approx(0.5)
