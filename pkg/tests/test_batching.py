import numpy as np
import pytest

from speechvec.batching import batch_examples, batch_gradient, batch_loss, make_batch
from speechvec.corpus import SkipGramExample, WordSegment
from speechvec.errors import ValidationError
from speechvec.model import ModelConfig, init_params, skipgram_gradient, skipgram_loss


def make_corpus(rng, count, d=4, max_len=6, k=2):
    examples = []
    for i in range(count):
        def seg(tag, length):
            return WordSegment("u", tag, f"w{tag}", rng.standard_normal((length, d)), 0, length)

        center = seg(i, int(rng.integers(1, max_len + 1)))
        n_targets = int(rng.integers(1, 2 * k + 1))
        offsets = rng.choice([-2, -1, 1, 2], size=n_targets, replace=False)
        targets = [
            (int(o), seg(1000 + 10 * i + j, int(rng.integers(1, max_len + 1))))
            for j, o in enumerate(offsets)
        ]
        examples.append(SkipGramExample(center=center, targets=targets))
    return examples


def sorted_chunks(examples, batch_size):
    ordered = sorted(examples, key=lambda e: e.center.features.shape[0])
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


class TestBatchConstruction:
    def test_partition_sizes(self):
        rng = np.random.default_rng(0)
        batches = batch_examples(make_corpus(rng, 5), batch_size=2)
        assert [b.size for b in batches] == [2, 2, 1]

    def test_every_example_exactly_once(self):
        rng = np.random.default_rng(1)
        examples = make_corpus(rng, 13)
        batches = batch_examples(examples, batch_size=4)
        assert sum(b.size for b in batches) == 13
        batched_lengths = sorted(
            int(n) for b in batches for n in b.center_lengths
        )
        assert batched_lengths == sorted(e.center.features.shape[0] for e in examples)

    def test_bucketing_orders_by_center_length(self):
        rng = np.random.default_rng(2)
        batches = batch_examples(make_corpus(rng, 12), batch_size=3)
        maxima = [int(b.center_lengths.max()) for b in batches]
        assert maxima == sorted(maxima)

    def test_equal_lengths_mean_no_padding(self):
        rng = np.random.default_rng(3)
        examples = make_corpus(rng, 4, max_len=1)
        for e in examples:
            e.center.features = rng.standard_normal((3, 4))
            for _, seg in e.targets:
                seg.features = rng.standard_normal((2, 4))
        batch = make_batch(examples)
        assert np.all(batch.center_mask == 1.0)
        assert np.all(batch.target_mask == 1.0)

    def test_mask_zero_exactly_beyond_length(self):
        rng = np.random.default_rng(4)
        batch = make_batch(make_corpus(rng, 6))
        for row, length in enumerate(batch.center_lengths):
            assert np.all(batch.center_mask[row, :length] == 1.0)
            assert np.all(batch.center_mask[row, length:] == 0.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValidationError):
            make_batch([])

    def test_bad_batch_size_rejected(self):
        with pytest.raises(ValidationError):
            batch_examples([], batch_size=0)


class TestBatchedEquivalence:
    @pytest.mark.parametrize("seed", range(4))
    def test_losses_match_unbatched_f64(self, seed):
        rng = np.random.default_rng(100 + seed)
        params = init_params(ModelConfig(4, 6, 2), seed=seed)
        examples = make_corpus(rng, 7)
        batches = batch_examples(examples, batch_size=3)
        for batch, chunk in zip(batches, sorted_chunks(examples, 3)):
            losses = batch_loss(params, batch)
            expected = [skipgram_loss(params, e)[0] for e in chunk]
            assert np.abs(losses - expected).max() < 1e-12

    def test_losses_match_unbatched_f32(self):
        rng = np.random.default_rng(42)
        params = init_params(ModelConfig(4, 6, 2), seed=0, dtype=np.float32)
        examples = make_corpus(rng, 6)
        batches = batch_examples(examples, batch_size=4, dtype=np.float32)
        for batch, chunk in zip(batches, sorted_chunks(examples, 4)):
            losses = batch_loss(params, batch)
            expected = [skipgram_loss(params, e)[0] for e in chunk]
            assert np.abs(losses - np.array(expected)).max() < 1e-6

    @pytest.mark.parametrize("per_frame_mean", [True, False])
    def test_gradient_matches_mean_of_unbatched(self, per_frame_mean):
        rng = np.random.default_rng(7)
        params = init_params(ModelConfig(4, 6, 2), seed=9)
        examples = make_corpus(rng, 5)
        (batch,) = batch_examples(examples, batch_size=5)
        _, batched = batch_gradient(params, batch, per_frame_mean=per_frame_mean)
        chunk = sorted_chunks(examples, 5)[0]
        mean_grad = np.mean(
            [skipgram_gradient(params, e, per_frame_mean=per_frame_mean)[1] for e in chunk],
            axis=0,
        )
        assert np.abs(batched - mean_grad).max() < 1e-12

    def test_padded_frames_contribute_exactly_zero(self):
        rng = np.random.default_rng(11)
        params = init_params(ModelConfig(4, 6, 2), seed=1)
        examples = make_corpus(rng, 5)
        (batch,) = batch_examples(examples, batch_size=5)
        base_losses = batch_loss(params, batch)
        _, base_grad = batch_gradient(params, batch)

        poisoned = make_batch(sorted_chunks(examples, 5)[0])
        for row, length in enumerate(poisoned.center_lengths):
            poisoned.center_frames[row, length:] = 1e6
        for row, length in enumerate(poisoned.target_lengths):
            poisoned.target_frames[row, length:] = 1e6

        assert np.array_equal(batch_loss(params, poisoned), base_losses)
        _, poisoned_grad = batch_gradient(params, poisoned)
        assert np.array_equal(poisoned_grad, base_grad)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        params = init_params(ModelConfig(3, 6, 2), seed=0)
        (batch,) = batch_examples(make_corpus(rng, 2), batch_size=2)
        with pytest.raises(ValidationError):
            batch_loss(params, batch)
