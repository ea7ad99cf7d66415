import math

import pytest

from seqcal.errors import FeatureError
from seqcal.features import FeatureConfig, attention_entropy, coverage, enrich
from seqcal.records import SequenceRecord, StepFeatures

from conftest import make_record, random_simplex


class TestAttentionEntropy:
    def test_uniform_maximizes(self):
        assert attention_entropy([0.25, 0.25, 0.25, 0.25]) == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot_is_zero(self):
        assert attention_entropy([1.0, 0.0, 0.0]) == 0.0

    def test_two_way_split(self):
        assert attention_entropy([0.5, 0.5, 0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_permutation_invariant(self, rng):
        for _ in range(30):
            alpha = random_simplex(rng, int(rng.integers(2, 10)))
            shuffled = rng.permutation(alpha)
            assert attention_entropy(alpha) == pytest.approx(attention_entropy(shuffled), abs=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(FeatureError):
            attention_entropy([0.5, 0.4])

    def test_negative_rejected(self):
        with pytest.raises(FeatureError):
            attention_entropy([1.2, -0.2])


class TestCoverage:
    def test_strict_threshold_count(self):
        assert coverage([0.9, 0.4, 0.1], 0.35) == pytest.approx(2 / 3)

    def test_all_zero(self):
        assert coverage([0.0, 0.0], 0.35) == 0.0

    def test_all_above(self):
        assert coverage([0.5, 0.9, 0.8], 0.35) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(FeatureError):
            coverage([], 0.35)

    def test_threshold_range_enforced(self):
        with pytest.raises(FeatureError):
            FeatureConfig(coverage_threshold=0.0)
        with pytest.raises(FeatureError):
            FeatureConfig(coverage_threshold=1.0)


def seq_of(steps):
    return SequenceRecord(seq_id="s", steps=tuple(steps), source_len=None)


class TestEnrich:
    def test_cumulative_coverage_grows(self):
        steps = [
            make_record([1.0], gold=0, t=1, attention=[1.0, 0.0]),
            make_record([1.0], gold=0, t=2, attention=[0.0, 1.0]),
        ]
        enriched = enrich(seq_of(steps))
        assert enriched.steps[0].features.coverage == pytest.approx(0.5)
        assert enriched.steps[1].features.coverage == pytest.approx(1.0)

    def test_precomputed_features_pass_through(self):
        feats = StepFeatures(entropy=0.123, coverage=0.456)
        steps = [make_record([1.0], gold=0, t=1, features=feats)]
        enriched = enrich(seq_of(steps))
        assert enriched.steps[0].features == feats

    def test_uniform_attention_entropy(self):
        steps = [
            make_record([1.0], gold=0, t=t, attention=[0.25] * 4) for t in range(1, 4)
        ]
        enriched = enrich(seq_of(steps))
        for step in enriched.steps:
            assert step.features.entropy == pytest.approx(math.log(4), abs=1e-12)

    def test_idempotent(self, rng):
        steps = []
        for t in range(1, 6):
            alpha = random_simplex(rng, 4)
            steps.append(make_record([1.0], gold=0, t=t, attention=alpha))
        once = enrich(seq_of(steps))
        twice = enrich(once)
        assert once == twice

    def test_coverage_monotone_in_t(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 9))
            k = int(rng.integers(2, 6))
            steps = [
                make_record([1.0], gold=0, t=t, attention=random_simplex(rng, k))
                for t in range(1, n + 1)
            ]
            enriched = enrich(seq_of(steps))
            covs = [s.features.coverage for s in enriched.steps]
            assert all(b >= a for a, b in zip(covs, covs[1:]))

    def test_attention_recovered_from_cumulative_diffs(self):
        steps = [
            make_record([1.0], gold=0, t=1, cum_attention=[0.3, 0.7]),
            make_record([1.0], gold=0, t=2, cum_attention=[1.3, 0.7]),
        ]
        enriched = enrich(seq_of(steps))
        assert enriched.steps[0].features.entropy == pytest.approx(attention_entropy([0.3, 0.7]))
        assert enriched.steps[1].features.entropy == pytest.approx(0.0)
        assert enriched.steps[1].features.coverage == pytest.approx(1.0)

    def test_step_without_any_source_named_in_error(self):
        seq = SequenceRecord(seq_id="bad", steps=(make_record([1.0], gold=0, seq_id="bad", t=1),))
        with pytest.raises(FeatureError, match=r"'bad'.*1"):
            enrich(seq)

    def test_cum_attention_filled_when_reconstructed(self):
        steps = [
            make_record([1.0], gold=0, t=1, attention=[1.0, 0.0]),
            make_record([1.0], gold=0, t=2, attention=[1.0, 0.0]),
        ]
        enriched = enrich(seq_of(steps))
        assert enriched.steps[1].cum_attention == pytest.approx((2.0, 0.0))
