import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from shiftbench.data import (
    LabeledSet,
    SamplingPlan,
    ShiftSpec,
    label_audit,
    make_train_test_split,
    make_two_domain_synthetic,
    random_subsample,
    split_class_subsample,
    stratified_subsample,
)
from shiftbench.errors import (
    EmptyInputError,
    EmptySubsetError,
    InsufficientDataError,
    TooFewClassesError,
)
from shiftbench.io import load_dataset, save_dataset


def make_set(counts, seed=0, domain_id=0, d=3):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, k, dtype=np.int64) for k, n in sorted(counts.items())])
    return LabeledSet(rng.standard_normal((len(labels), d)), labels, domain_id)


class TestSynthetic:
    def test_equal_class_counts_across_domains(self):
        bundle = make_two_domain_synthetic(5, 1000, 2, ShiftSpec("rotation", 45.0), seed=0)
        for domain in ("source", "target"):
            train = getattr(bundle, f"{domain}_train")
            test = getattr(bundle, f"{domain}_test")
            joined = np.concatenate([train.labels, test.labels])
            counts = np.bincount(joined, minlength=5)
            assert counts.tolist() == [200] * 5
        src_counts = np.bincount(bundle.source_train.labels, minlength=5)
        tgt_counts = np.bincount(bundle.target_train.labels, minlength=5)
        assert src_counts.tolist() == tgt_counts.tolist()

    def test_zero_magnitude_is_same_distribution(self):
        bundle = make_two_domain_synthetic(3, 300, 2, ShiftSpec("rotation", 0.0), seed=7)
        xs = bundle.source_train.features
        xt = bundle.target_train.features
        # two-sample mean test per dimension should not reject at alpha=0.01
        for dim in range(xs.shape[1]):
            _, p = stats.ttest_ind(xs[:, dim], xt[:, dim])
            assert p > 0.01

    def test_bit_identical_regeneration(self):
        a = make_two_domain_synthetic(5, 1000, 2, ShiftSpec("rotation", 45.0), seed=0)
        b = make_two_domain_synthetic(5, 1000, 2, ShiftSpec("rotation", 45.0), seed=0)
        for name in ("source_train", "source_test", "target_train", "target_test"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientDataError):
            make_two_domain_synthetic(10, 5, 2, ShiftSpec("rotation", 10.0), seed=0)

    @pytest.mark.parametrize("family", ["translation", "scaling", "class-conditional-mean-shift", "corruption-noise"])
    def test_all_families_zero_magnitude_identity(self, family):
        shifted = make_two_domain_synthetic(3, 120, 4, ShiftSpec(family, 0.0, seed=3), seed=5)
        base = make_two_domain_synthetic(3, 120, 4, ShiftSpec("rotation", 0.0, seed=3), seed=5)
        assert shifted.target_train.tobytes() == base.target_train.tobytes()

    def test_rotation_moves_target(self):
        bundle = make_two_domain_synthetic(5, 500, 2, ShiftSpec("rotation", 45.0), seed=0)
        flat = make_two_domain_synthetic(5, 500, 2, ShiftSpec("rotation", 0.0), seed=0)
        assert not np.allclose(bundle.target_train.features, flat.target_train.features)
        # rotation preserves norms
        assert np.allclose(
            np.linalg.norm(bundle.target_train.features, axis=1),
            np.linalg.norm(flat.target_train.features, axis=1),
        )

    def test_image_mode_shapes(self):
        bundle = make_two_domain_synthetic(
            4, 200, 0, ShiftSpec("corruption-noise", 0.2, seed=1), seed=2, mode="image"
        )
        assert bundle.source_train.features.shape[1:] == (8, 8, 1)
        assert bundle.source_train.mode == "image"
        assert np.isfinite(bundle.target_train.features).all()


class TestTrainTestSplit:
    def test_ninety_ten(self):
        s = make_set({k: 10 for k in range(10)})
        train, test = make_train_test_split(s, 0.9, seed=0)
        assert len(train) == 90 and len(test) == 10
        assert np.bincount(test.labels, minlength=10).tolist() == [1] * 10

    def test_singleton_class_goes_to_train(self):
        s = make_set({0: 9, 1: 1})
        train, test = make_train_test_split(s, 0.9, seed=0)
        assert 1 in train.labels.tolist()
        assert 1 not in test.labels.tolist()

    def test_deterministic(self):
        s = make_set({0: 20, 1: 30})
        a = make_train_test_split(s, 0.8, seed=3)
        b = make_train_test_split(s, 0.8, seed=3)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_union_and_disjoint(self):
        s = make_set({0: 17, 1: 23, 2: 5})
        train, test = make_train_test_split(s, 0.7, seed=1)
        rows = lambda ls: {r.tobytes() for r in ls.features}
        assert len(rows(train) | rows(test)) == len(s)
        assert not rows(train) & rows(test)

    def test_empty_input(self):
        empty = LabeledSet(np.empty((0, 3)), np.empty(0, dtype=np.int64), 0)
        with pytest.raises(EmptyInputError):
            make_train_test_split(empty, 0.9, seed=0)


class TestStratified:
    def test_floor_min1_counts(self):
        s = make_set({0: 10, 1: 4, 2: 1})
        sub = stratified_subsample(s, 0.25, seed=0)
        assert sub.class_counts() == {0: 2, 1: 1, 2: 1}

    def test_fraction_one_is_identity(self):
        s = make_set({0: 10, 1: 4})
        sub = stratified_subsample(s, 1.0, seed=5)
        assert sub.tobytes() == s.tobytes()

    def test_min_one_clamp(self):
        s = make_set({0: 10, 1: 4, 2: 1})
        sub = stratified_subsample(s, 0.01, seed=0)
        assert sub.class_counts() == {0: 1, 1: 1, 2: 1}

    @given(
        st.lists(st.integers(min_value=20, max_value=60), min_size=2, max_size=8),
        st.floats(min_value=0.1, max_value=1.0),
        st.integers(min_value=0, max_value=1000),
    )
    def test_distribution_bound(self, counts, fraction, seed):
        # the rounding bound needs roughly balanced classes; see ledger
        s = make_set(dict(enumerate(counts)), seed=1)
        sub = stratified_subsample(s, fraction, seed)
        kept = sub.class_counts()
        total, n = len(sub), len(s)
        for k, n_c in enumerate(counts):
            share_kept = kept.get(k, 0) / total
            share_orig = n_c / n
            assert abs(share_kept - share_orig) <= 1.0 / total + 1.0 / n

    @given(
        st.lists(st.integers(min_value=1, max_value=200), min_size=1, max_size=6),
        st.floats(min_value=0.01, max_value=1.0),
        st.integers(min_value=0, max_value=10_000),
    )
    def test_exact_counts_rule(self, counts, fraction, seed):
        s = make_set(dict(enumerate(counts)), seed=2)
        sub = stratified_subsample(s, fraction, seed)
        kept = sub.class_counts()
        for k, n_c in enumerate(counts):
            assert kept.get(k, 0) == max(1, int(np.floor(fraction * n_c)))


class TestRandomSubsample:
    def test_floor_count(self):
        s = make_set({0: 50, 1: 50})
        assert len(random_subsample(s, 0.5, seed=0)) == 50

    def test_identity(self):
        s = make_set({0: 10})
        assert random_subsample(s, 1.0, seed=0).tobytes() == s.tobytes()

    def test_empty_subset_error(self):
        s = make_set({0: 10})
        with pytest.raises(EmptySubsetError):
            random_subsample(s, 0.05, seed=0)


class TestSplitClass:
    def test_removal_rule(self):
        s = make_set({0: 10, 1: 10, 2: 10, 3: 10})
        sub = split_class_subsample(s, 25.0, seed=0)
        counts = sub.class_counts()
        modified = {k for k, n in counts.items() if n != 10}
        assert len(modified) == 2
        assert all(counts[k] == 5 for k in modified)

    def test_full_removal_clamps_to_one(self):
        s = make_set({0: 10, 1: 10, 2: 10, 3: 10})
        counts = split_class_subsample(s, 50.0, seed=0).class_counts()
        assert sorted(counts.values()) == [1, 1, 10, 10]

    def test_selects_floor_half_classes(self):
        s = make_set({k: 8 for k in range(5)})
        counts = split_class_subsample(s, 10.0, seed=1).class_counts()
        modified = [k for k, n in counts.items() if n != 8]
        assert len(modified) == 2

    def test_too_few_classes(self):
        s = make_set({0: 10})
        with pytest.raises(TooFewClassesError):
            split_class_subsample(s, 25.0, seed=0)

    def test_x_range_validated(self):
        s = make_set({0: 10, 1: 10})
        with pytest.raises(ValueError):
            split_class_subsample(s, 60.0, seed=0)

    def test_selection_fixed_under_seed(self):
        s = make_set({k: 40 for k in range(6)})
        picks = []
        for x in (10.0, 20.0, 40.0):
            counts = split_class_subsample(s, x, seed=9).class_counts()
            picks.append(frozenset(k for k, n in counts.items() if n != 40))
        assert len(set(picks)) == 1


class TestSamplingPlan:
    def test_strategy_dispatch(self):
        s = make_set({0: 20, 1: 20})
        plan = SamplingPlan("stratified", 0.5, seed=0)
        assert plan.apply(s).class_counts() == {0: 10, 1: 10}

    def test_fraction_one_identity_any_strategy(self):
        s = make_set({0: 20, 1: 20})
        for strategy in ("stratified", "random", "split-class"):
            assert SamplingPlan(strategy, 1.0, seed=0).apply(s) is s

    def test_split_class_fraction_maps_to_removal(self):
        s = make_set({k: 20 for k in range(4)})
        sub = SamplingPlan("split-class", 0.75, seed=0).apply(s)
        counts = sub.class_counts()
        assert sorted(counts.values()) == [10, 10, 20, 20]

    def test_split_class_needs_half_or_more(self):
        with pytest.raises(ValueError):
            SamplingPlan("split-class", 0.3, seed=0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        bundle = make_two_domain_synthetic(4, 400, 3, ShiftSpec("translation", 1.5, seed=2), seed=9)
        save_dataset(bundle, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.num_classes == 4
        for name in ("source_train", "source_test", "target_train", "target_test"):
            assert getattr(loaded, name).tobytes() == getattr(bundle, name).tobytes()
            assert getattr(loaded, name).domain_id == getattr(bundle, name).domain_id

    def test_image_round_trip(self, tmp_path):
        bundle = make_two_domain_synthetic(
            3, 90, 0, ShiftSpec("rotation", 20.0), seed=1, mode="image"
        )
        save_dataset(bundle, tmp_path / "img")
        loaded = load_dataset(tmp_path / "img")
        assert loaded.source_train.features.shape[1:] == (8, 8, 1)
        assert loaded.target_test.tobytes() == bundle.target_test.tobytes()

    def test_meta_contents(self, tmp_path):
        bundle = make_two_domain_synthetic(4, 100, 2, ShiftSpec("scaling", 0.5, seed=4), seed=3)
        save_dataset(bundle, tmp_path / "ds")
        meta = (tmp_path / "ds" / "meta").read_text()
        for key in ("num_classes", "shift_family", "shift_magnitude", "seed", "mode"):
            assert key in meta


class TestLabelAudit:
    def test_records_caller(self):
        s = make_set({0: 5, 1: 5}, domain_id=1)
        label_audit.clear()
        stratified_subsample(s, 0.5, seed=0)
        readers = label_audit.readers(domain_id=1)
        assert ("shiftbench.data", "stratified_subsample") in readers

    def test_no_spurious_reads(self):
        s = make_set({0: 5}, domain_id=1)
        label_audit.clear()
        _ = s.features
        _ = len(s)
        assert not label_audit.readers(domain_id=1)
