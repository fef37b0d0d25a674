"""Tests for ranking metrics, cost accounting, and the variant sweep."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramid_mixer.data import split_leave_one_out, synthetic_successor_records
from pyramid_mixer.errors import ConfigError
from pyramid_mixer.evaluation import (
    CostReport,
    MetricReport,
    VariantResult,
    ablation_variants,
    compare_variants,
    count_cost,
    evaluate_ranking,
    metrics_from_ranks,
    ranks_for_batch,
    tally_forward_macs,
    thread_cap,
    variants_as_json,
    variants_as_text,
)
from pyramid_mixer.model import ModelConfig, PyramidMixerNet

import oracles


def small_config(**overrides):
    base = dict(L=12, F=2, D=16, D_prime=4, L_prime=3, S=2, K=3, stride=2, padding=1,
                field_names=("item", "block"), vocab_sizes=(62, 8))
    base.update(overrides)
    return ModelConfig(**base)


class TestMetricFormulas:
    def test_rank_one_is_perfect(self):
        report = metrics_from_ranks(np.array([1]), k=10)
        assert report.hr == report.ndcg == report.mrr == 1.0

    def test_rank_three_spot_values(self):
        report = metrics_from_ranks(np.array([3]), k=10)
        assert report.ndcg == pytest.approx(0.5)
        assert report.mrr == pytest.approx(1.0 / 3.0)

    def test_rank_four_reciprocal(self):
        assert metrics_from_ranks(np.array([4]), k=10).mrr == pytest.approx(0.25)

    def test_rank_past_cutoff_scores_zero(self):
        report = metrics_from_ranks(np.array([11]), k=10)
        assert report.hr == report.ndcg == report.mrr == 0.0

    def test_matches_brute_force_on_draws(self):
        rng = np.random.default_rng(0)
        ranks = rng.integers(1, 40, size=500)
        report = metrics_from_ranks(ranks, k=10)
        hr = sum(1.0 if r <= 10 else 0.0 for r in ranks) / len(ranks)
        ndcg = sum(1.0 / np.log2(r + 1.0) if r <= 10 else 0.0 for r in ranks) / len(ranks)
        mrr = sum(1.0 / r if r <= 10 else 0.0 for r in ranks) / len(ranks)
        assert report.hr == hr and report.ndcg == pytest.approx(ndcg, rel=1e-15) and report.mrr == pytest.approx(mrr, rel=1e-15)

    def test_ordering_invariant(self):
        rng = np.random.default_rng(1)
        ranks = rng.integers(1, 30, size=200)
        report = metrics_from_ranks(ranks, k=10)
        assert 0.0 <= report.mrr <= report.ndcg <= report.hr <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=1, max_value=50))
    def test_improving_a_rank_never_hurts(self, rank):
        better = metrics_from_ranks(np.array([rank]), k=10)
        worse = metrics_from_ranks(np.array([rank + 1]), k=10)
        assert better.hr >= worse.hr
        assert better.ndcg >= worse.ndcg
        assert better.mrr >= worse.mrr

    def test_empty_ranks_rejected(self):
        with pytest.raises(ConfigError, match="zero users"):
            metrics_from_ranks(np.array([], dtype=int), k=10)


class TestRanking:
    def test_rank_counts_strictly_higher_scores(self):
        scores = np.array([[0.1, 0.9, 0.5, 0.3]])
        ranks = ranks_for_batch(scores, np.array([2]), np.zeros((1, 4), dtype=bool))
        assert ranks[0] == 2

    def test_tie_goes_to_lower_index(self):
        scores = np.array([[0.5, 0.5, 0.5]])
        excluded = np.zeros((1, 3), dtype=bool)
        assert ranks_for_batch(scores, np.array([0]), excluded)[0] == 1
        assert ranks_for_batch(scores, np.array([1]), excluded)[0] == 2
        assert ranks_for_batch(scores, np.array([2]), excluded)[0] == 3

    def test_excluded_items_never_outrank(self):
        scores = np.array([[9.0, 1.0, 5.0, 7.0]])
        excluded = np.array([[True, False, False, True]])
        assert ranks_for_batch(scores, np.array([1]), excluded)[0] == 2

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            scores = rng.normal(size=12)
            target = int(rng.integers(0, 12))
            rank, _, _, _ = oracles.ranking_metrics_loops(scores, target, 10)
            got = ranks_for_batch(scores[None], np.array([target]), np.zeros((1, 12), dtype=bool))[0]
            assert got == rank


class TestEvaluateRanking:
    def make_fixture(self):
        ds = split_leave_one_out(synthetic_successor_records(n_users=12, n_items=30, length=8), min_count=1)
        cfg = small_config(vocab_sizes=ds.vocab.sizes(), field_names=ds.vocab.fields)
        net = PyramidMixerNet(cfg, seed=0)
        return net, ds

    def test_report_shape_and_range(self):
        net, ds = self.make_fixture()
        report = evaluate_ranking(net, ds.split, stage="test", k=10, batch_size=5)
        assert report.users == len(ds.split)
        assert 0.0 <= report.mrr <= report.ndcg <= report.hr <= 1.0

    def test_thread_count_does_not_change_result(self, monkeypatch):
        net, ds = self.make_fixture()
        monkeypatch.setenv("PYMX_THREADS", "1")
        serial = evaluate_ranking(net, ds.split, stage="test", k=10, batch_size=3)
        monkeypatch.setenv("PYMX_THREADS", "4")
        threaded = evaluate_ranking(net, ds.split, stage="test", k=10, batch_size=3)
        assert serial == threaded

    def test_thread_cap_rejects_garbage(self, monkeypatch):
        monkeypatch.setenv("PYMX_THREADS", "many")
        with pytest.raises(ConfigError, match="PYMX_THREADS"):
            thread_cap()
        monkeypatch.setenv("PYMX_THREADS", "0")
        with pytest.raises(ConfigError, match="PYMX_THREADS"):
            thread_cap()

    def test_batch_size_does_not_change_result(self):
        net, ds = self.make_fixture()
        a = evaluate_ranking(net, ds.split, stage="test", k=10, batch_size=3)
        b = evaluate_ranking(net, ds.split, stage="test", k=10, batch_size=50)
        assert a == b


class TestCostAccounting:
    def test_single_feature_block_closed_form(self):
        cfg = ModelConfig(L=50, F=2, D=64, D_prime=16, L_prime=12, S=1,
                          cross_behavior_on=False, fusion_on=False, pyramid_on=False,
                          field_names=("item", "cat"), vocab_sizes=(100, 10))
        report = count_cost(cfg)
        assert report.macs["cross_feature"] == 2 * 50 * 64 * 16
        assert report.params["cross_feature"] == 64 * 16 + 16 + 16 * 64 + 64 + 2 * 64
        assert report.dense_macs["cross_feature"] == 2 * 50 * 64 * 64

    def test_block_ratio_is_exactly_latent_over_width(self):
        cfg = ModelConfig(field_names=("item", "cat"), vocab_sizes=(100, 10))
        report = count_cost(cfg)
        # Cross-multiplied integer identity: lowrank * D == dense * D_prime.
        assert report.macs["cross_feature"] * cfg.D == report.dense_macs["cross_feature"] * cfg.D_prime

    def test_low_rank_block_cheaper_when_latent_below_half(self):
        cfg = small_config(D_prime=7)
        report = count_cost(cfg)
        assert report.macs["cross_feature"] < report.dense_macs["cross_feature"]
        assert report.params["cross_feature"] < report.dense_params["cross_feature"]

    def test_default_increment_ratio_brackets_half(self):
        cfg = ModelConfig(field_names=("item", "cat"), vocab_sizes=(1400, 10))
        ratio = count_cost(cfg).increment_ratio
        assert 0.45 <= ratio <= 0.60

    @pytest.mark.parametrize("seed", range(5))
    def test_counter_matches_instrumented_forward(self, seed):
        rng = np.random.default_rng(seed)
        while True:
            cfg = small_config(
                L=int(rng.integers(8, 20)),
                D=int(rng.integers(2, 7) * 2),
                D_prime=int(rng.integers(1, 4)),
                L_prime=2,
                S=int(rng.integers(1, 4)),
                low_rank=bool(rng.integers(0, 2)),
                cross_behavior_on=bool(rng.integers(0, 2)),
                cross_feature_on=bool(rng.integers(0, 2)),
                fusion_on=bool(rng.integers(0, 2)),
                pyramid_on=bool(rng.integers(0, 2)),
                vocab_sizes=(int(rng.integers(10, 80)), 8),
            )
            try:
                cfg.validate()
            except ConfigError:
                continue
            break
        net = PyramidMixerNet(cfg, seed=seed)
        assert tally_forward_macs(net) == count_cost(cfg).total_macs()

    def test_needs_vocab_metadata(self):
        with pytest.raises(ConfigError, match="vocab_sizes"):
            count_cost(ModelConfig())

    def test_text_rendering_mentions_every_module(self):
        cfg = small_config()
        text = count_cost(cfg).as_text()
        for module in ("cross_behavior", "cross_feature", "fusion_gate", "period_scaling",
                       "prediction_head", "embeddings"):
            assert module in text


class TestCompareVariants:
    def quick_setup(self):
        from pyramid_mixer.training import TrainSettings
        ds = split_leave_one_out(synthetic_successor_records(n_users=10, n_items=25, length=7), min_count=1)
        cfg = ModelConfig(L=6, F=2, D=8, D_prime=2, L_prime=2, S=2, K=3, stride=2, padding=1)
        settings_ = TrainSettings(batch_size=64, patience=0, max_epochs=1)
        return ds, cfg, settings_

    def test_four_way_sweep_shape(self):
        ds, cfg, settings_ = self.quick_setup()
        results = compare_variants(ablation_variants(cfg), ds, settings_, seeds=[0])
        assert [r.name for r in results] == ["full", "no_cross_behavior", "no_cross_feature", "no_cross_period"]
        assert all(not r.failed for r in results)

    def test_single_seed_reports_zero_std(self, caplog):
        ds, cfg, settings_ = self.quick_setup()
        with caplog.at_level("WARNING"):
            results = compare_variants([("full", cfg)], ds, settings_, seeds=[3])
        assert results[0].hr_std == 0.0
        assert "one seed" in caplog.text

    def test_identical_variants_produce_identical_rows(self):
        ds, cfg, settings_ = self.quick_setup()
        results = compare_variants([("a", cfg), ("b", cfg)], ds, settings_, seeds=[1])
        assert results[0].mrr_mean == results[1].mrr_mean
        assert results[0].hr_mean == results[1].hr_mean

    def test_diverging_variant_marked_failed_others_reported(self, monkeypatch, caplog):
        from pyramid_mixer import training
        from pyramid_mixer.errors import DivergenceError
        ds, cfg, settings_ = self.quick_setup()
        real_train = training.train

        def flaky_train(config, dataset, settings__, seed, out_dir=None, resume_from=None):
            if not config.cross_feature_on:
                raise DivergenceError("synthetic blow-up")
            return real_train(config, dataset, settings__, seed, out_dir=out_dir, resume_from=resume_from)

        monkeypatch.setattr(training, "train", flaky_train)
        with caplog.at_level("WARNING"):
            results = compare_variants(ablation_variants(cfg), ds, settings_, seeds=[0])
        by_name = {r.name: r for r in results}
        assert by_name["no_cross_feature"].failed
        assert not by_name["full"].failed
        assert "diverged" in caplog.text

    def test_rendering(self):
        rows = [VariantResult("full", [0], 0.5, 0.0, 0.4, 0.0, 0.3, 0.0),
                VariantResult("broken", [0], float("nan"), float("nan"), float("nan"),
                              float("nan"), float("nan"), float("nan"), failed=True)]
        text = variants_as_text(rows)
        assert "full" in text and "failed" in text
        parsed = __import__("json").loads(variants_as_json(rows))
        assert parsed[1]["failed"] is True

    def test_requires_a_seed(self):
        ds, cfg, settings_ = self.quick_setup()
        with pytest.raises(ConfigError, match="seed"):
            compare_variants([("full", cfg)], ds, settings_, seeds=[])
