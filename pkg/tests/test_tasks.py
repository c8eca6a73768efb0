import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftsearch import tasks as TK


def spec(generator="token-majority", **overrides):
    base = dict(name="t", vocab_size=12, seq_len=8, num_classes=2,
                generator=generator, train_size=40, val_size=8, test_size=16,
                seed=5)
    base.update(overrides)
    return TK.SyntheticTaskSpec(**base)


class TestSpecValidation:
    def test_unknown_generator(self):
        with pytest.raises(ValueError, match="generator"):
            spec(generator="copy-task")

    def test_pattern_needs_binary_labels(self):
        with pytest.raises(ValueError, match="binary"):
            spec(generator="pattern-presence", num_classes=3)

    def test_majority_needs_enough_vocab(self):
        with pytest.raises(ValueError, match="vocab_size"):
            spec(vocab_size=2, num_classes=3)


class TestGenerate:
    def test_split_sizes_and_balance(self):
        train, val, test = TK.generate_task(spec())
        assert (len(train), len(val), len(test)) == (40, 8, 16)
        for ds in (train, val, test):
            counts = np.bincount(ds.labels, minlength=2)
            assert abs(counts[0] - counts[1]) <= 1

    def test_splits_are_disjoint(self):
        train, val, test = TK.generate_task(spec())
        rows = {tuple(r) for ds in (train, val, test) for r in ds.tokens}
        assert len(rows) == 40 + 8 + 16

    def test_generation_is_deterministic(self):
        a = TK.generate_task(spec())
        b = TK.generate_task(spec())
        for da, db in zip(a, b):
            assert np.array_equal(da.tokens, db.tokens)
            assert np.array_equal(da.labels, db.labels)

    def test_seed_changes_data(self):
        a, _, _ = TK.generate_task(spec(seed=1))
        b, _, _ = TK.generate_task(spec(seed=2))
        assert not np.array_equal(a.tokens, b.tokens)

    def test_majority_labels_are_recoverable(self):
        train, _, _ = TK.generate_task(spec(vocab_size=12, num_classes=3,
                                            train_size=60))
        groups = np.array_split(np.arange(12), 3)
        for seq, label in zip(train.tokens, train.labels):
            counts = [np.isin(seq, g).sum() for g in groups]
            assert int(np.argmax(counts)) == label

    def test_pattern_labels_are_recoverable(self):
        train, _, _ = TK.generate_task(spec(generator="pattern-presence"))
        a, b = 10, 11  # the two highest vocabulary ids form the marker bigram
        for seq, label in zip(train.tokens, train.labels):
            present = any(seq[i] == a and seq[i + 1] == b
                          for i in range(len(seq) - 1))
            assert present == bool(label)

    def test_parity_labels_are_recoverable(self):
        train, _, _ = TK.generate_task(spec(generator="position-sensitive-parity"))
        for seq, label in zip(train.tokens, train.labels):
            high = (seq[0::2] >= 6).sum()
            assert high % 2 == label


class TestStratifiedTrim:
    def test_keeps_label_proportions(self):
        train, _, _ = TK.generate_task(spec(train_size=100))
        d = TK.stratified_trim(train, 0.1, seed=3)
        assert len(d) == 10
        counts = np.bincount(d.labels, minlength=2)
        assert counts[0] == counts[1] == 5

    def test_subset_of_original(self):
        train, _, _ = TK.generate_task(spec())
        d = TK.stratified_trim(train, 0.5, seed=3)
        originals = {tuple(r) for r in train.tokens}
        assert all(tuple(r) in originals for r in d.tokens)

    def test_trim_is_deterministic(self):
        train, _, _ = TK.generate_task(spec())
        a = TK.stratified_trim(train, 0.25, seed=9)
        b = TK.stratified_trim(train, 0.25, seed=9)
        assert np.array_equal(a.tokens, b.tokens)

    def test_rejects_fraction_out_of_range(self):
        train, _, _ = TK.generate_task(spec())
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                TK.stratified_trim(train, bad, seed=0)

    def test_rejects_fraction_that_empties_a_class(self):
        train, _, _ = TK.generate_task(spec(train_size=10))
        with pytest.raises(ValueError, match="empty"):
            TK.stratified_trim(train, 0.01, seed=0)

    @settings(max_examples=20, deadline=None)
    @given(frac=st.sampled_from([0.1, 0.2, 0.5, 1.0]), seed=st.integers(0, 10_000))
    def test_per_class_count_is_rounded_share(self, frac, seed):
        train, _, _ = TK.generate_task(spec(train_size=40))
        d = TK.stratified_trim(train, frac, seed=seed)
        for label in (0, 1):
            want = round(frac * (train.labels == label).sum())
            assert (d.labels == label).sum() == want


class TestBatcher:
    def test_steps_per_epoch_rounds_up(self):
        train, _, _ = TK.generate_task(spec(train_size=41))
        b = TK.Batcher(train, 8, np.random.default_rng(0))
        assert b.steps_per_epoch() == 6

    def test_one_epoch_covers_every_example_once(self):
        train, _, _ = TK.generate_task(spec())
        b = TK.Batcher(train, 8, np.random.default_rng(0))
        seen = []
        for _ in range(b.steps_per_epoch()):
            tokens, labels = next(b)
            assert len(tokens) == len(labels)
            seen.extend(tuple(r) for r in tokens)
        assert sorted(seen) == sorted(tuple(r) for r in train.tokens)

    def test_batch_size_clamped_to_dataset(self):
        train, _, _ = TK.generate_task(spec(train_size=4))
        b = TK.Batcher(train, 100, np.random.default_rng(0))
        tokens, _ = next(b)
        assert len(tokens) == 4

    def test_rejects_nonpositive_batch(self):
        train, _, _ = TK.generate_task(spec())
        with pytest.raises(ValueError):
            TK.Batcher(train, 0, np.random.default_rng(0))
