import numpy as np
import pytest

from reference_impls import ref_decode, ref_encode, ref_lstm_step, ref_target_loss
from speechvec.corpus import SkipGramExample, WordSegment
from speechvec.errors import ValidationError
from speechvec.model import (
    HiddenState,
    LstmLayerParams,
    ModelConfig,
    ModelParams,
    count_params,
    decode_target,
    encode,
    encode_states,
    finite_difference_check,
    flatten_params,
    init_params,
    lstm_cell_step,
    make_probe_instance,
    skipgram_gradient,
    skipgram_loss,
    unflatten_params,
)


def random_params(seed, d=3, h=6, layers=2):
    return init_params(ModelConfig(feature_dim=d, hidden_size=h, num_encoder_layers=layers), seed)


def zero_params(d=3, h=4, layers=2):
    def zero_layer(d_in):
        return LstmLayerParams(
            w_in=np.zeros((4 * h, d_in)), w_rec=np.zeros((4 * h, h)), bias=np.zeros(4 * h)
        )

    return ModelParams(
        encoder_layers=[zero_layer(d if i == 0 else h) for i in range(layers)],
        decoder=zero_layer(d),
        w_out=np.zeros((d, h)),
        b_out=np.zeros(d),
    )


def make_segment(rng, index, length, d=3, scale=1.0):
    return WordSegment(
        utterance_id="u",
        index_in_utterance=index,
        word=f"w{index}",
        features=scale * rng.standard_normal((length, d)),
        start_frame=0,
        end_frame=length,
    )


def make_example(rng, d=3, center_len=4, target_lens=(3, 2), scale=1.0):
    center = make_segment(rng, 0, center_len, d, scale)
    targets = [
        ((-1) ** i * (i + 1), make_segment(rng, 10 + i, length, d, scale))
        for i, length in enumerate(target_lens)
    ]
    return SkipGramExample(center=center, targets=targets)


def layer_as_lists(layer):
    return (layer.w_in.tolist(), layer.w_rec.tolist(), layer.bias.tolist())


class TestLstmCell:
    def test_zero_params_give_zero_state(self):
        params = zero_params()
        layer = params.encoder_layers[0]
        out = lstm_cell_step(layer, np.array([1.0, -2.0, 0.5]), HiddenState(np.zeros(4), np.zeros(4)))
        assert np.allclose(out.h, 0.0)
        assert np.allclose(out.c, 0.0)

    def test_gate_saturation_preserves_cell(self):
        params = zero_params()
        layer = params.encoder_layers[0]
        layer.bias[4:8] = 50.0  # forget gate pinned open
        layer.bias[0:4] = -50.0  # input gate pinned shut
        prev = HiddenState(h=np.zeros(4), c=np.array([0.3, -0.7, 1.2, 0.0]))
        out = lstm_cell_step(layer, np.array([0.4, 0.1, -0.2]), prev)
        assert np.allclose(out.c, prev.c, atol=1e-12)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(42)
        params = random_params(7, d=3, h=4, layers=1)
        layer = params.encoder_layers[0]
        x = rng.standard_normal(3)
        prev = HiddenState(h=rng.standard_normal(4), c=rng.standard_normal(4))
        got = lstm_cell_step(layer, x, prev)
        w_in, w_rec, bias = layer_as_lists(layer)
        ref_h, ref_c = ref_lstm_step(w_in, w_rec, bias, x.tolist(), prev.h.tolist(), prev.c.tolist())
        assert np.abs(got.h - ref_h).max() < 1e-12
        assert np.abs(got.c - ref_c).max() < 1e-12

    def test_shape_mismatch_rejected(self):
        params = zero_params()
        with pytest.raises(ValidationError):
            lstm_cell_step(params.encoder_layers[0], np.zeros(5), HiddenState(np.zeros(4), np.zeros(4)))


class TestEncode:
    def test_zero_params_give_zero_embedding(self):
        params = zero_params()
        rng = np.random.default_rng(0)
        assert np.allclose(encode(params, rng.standard_normal((6, 3))), 0.0)

    def test_single_frame_equals_stacked_cell_steps(self):
        params = random_params(3)
        x = np.random.default_rng(1).standard_normal((1, 3))
        z = encode(params, x)
        state_in = x[0]
        for layer in params.encoder_layers:
            h = layer.hidden_size
            state = lstm_cell_step(layer, state_in, HiddenState(np.zeros(h), np.zeros(h)))
            state_in = state.h
        assert np.allclose(z, state_in, atol=1e-15)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(5)
        params = random_params(11, d=3, h=8, layers=2)
        frames = rng.standard_normal((5, 3))
        got = encode(params, frames)
        ref = ref_encode([layer_as_lists(l) for l in params.encoder_layers], frames.tolist())
        assert np.abs(got - ref).max() < 1e-12

    def test_length_covariant_one_extra_step(self):
        # Encoding T+1 frames equals encoding T frames then stepping each
        # layer once with the extra frame (state-injection equivalence).
        rng = np.random.default_rng(9)
        params = random_params(13)
        frames = rng.standard_normal((6, 3))
        states = encode_states(params, frames[:5])
        x = frames[5]
        for layer, state in zip(params.encoder_layers, states):
            new_state = lstm_cell_step(layer, x, state)
            x = new_state.h
        assert np.allclose(x, encode(params, frames), atol=1e-13)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            encode(random_params(0), np.zeros((4, 7)))

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValidationError):
            encode(random_params(0), np.zeros((0, 3)))


class TestDecode:
    def test_zero_params_output_projection_bias(self):
        params = zero_params()
        out = decode_target(params, np.zeros(4), np.ones((3, 3)))
        assert np.allclose(out, 0.0)

    def test_teacher_forcing_irrelevant_for_single_step(self):
        rng = np.random.default_rng(2)
        params = random_params(4)
        z = rng.standard_normal(6)
        target = rng.standard_normal((1, 3))
        forced = decode_target(params, z, target, teacher_forcing=True)
        free = decode_target(params, z, target, teacher_forcing=False)
        assert np.array_equal(forced, free)

    @pytest.mark.parametrize("teacher_forcing", [True, False])
    def test_matches_scalar_reference(self, teacher_forcing):
        rng = np.random.default_rng(3)
        params = random_params(6)
        z = rng.standard_normal(6)
        target = rng.standard_normal((4, 3))
        got = decode_target(params, z, target, teacher_forcing=teacher_forcing)
        w_in, w_rec, bias = layer_as_lists(params.decoder)
        ref = ref_decode(
            w_in, w_rec, bias, params.w_out.tolist(), params.b_out.tolist(),
            z.tolist(), target.tolist(), teacher_forcing=teacher_forcing,
        )
        assert np.abs(got - np.array(ref)).max() < 1e-12

    def test_empty_target_rejected(self):
        with pytest.raises(ValidationError):
            decode_target(random_params(0), np.zeros(6), np.zeros((0, 3)))

    def test_wrong_embedding_size_rejected(self):
        with pytest.raises(ValidationError):
            decode_target(random_params(0), np.zeros(5), np.zeros((2, 3)))


class TestSkipgramLoss:
    def test_zero_everything_is_zero_loss(self):
        params = zero_params()
        rng = np.random.default_rng(0)
        example = make_example(rng, scale=0.0)
        loss, per_target = skipgram_loss(params, example)
        assert loss == 0.0
        assert per_target == [0.0, 0.0]

    def test_zero_params_loss_is_mean_square_of_targets(self):
        params = zero_params()
        rng = np.random.default_rng(1)
        example = make_example(rng)
        loss, per_target = skipgram_loss(params, example)
        for (_, segment), got in zip(example.targets, per_target):
            assert got == pytest.approx(np.mean(segment.features**2))
        assert loss == pytest.approx(sum(per_target))

    def test_raw_sum_variant(self):
        params = random_params(8)
        rng = np.random.default_rng(2)
        example = make_example(rng)
        loss_mean, _ = skipgram_loss(params, example, per_frame_mean=True)
        loss_raw, per_target = skipgram_loss(params, example, per_frame_mean=False)
        expected = sum(
            p * seg.features.size for p, (_, seg) in zip(
                skipgram_loss(params, example, per_frame_mean=True)[1], example.targets
            )
        )
        assert loss_raw == pytest.approx(expected, rel=1e-12)
        assert loss_raw > loss_mean

    def test_recomposes_from_reference_parts(self):
        rng = np.random.default_rng(4)
        params = random_params(10)
        example = make_example(rng)
        loss, _ = skipgram_loss(params, example)
        z = ref_encode(
            [layer_as_lists(l) for l in params.encoder_layers], example.center.features.tolist()
        )
        w_in, w_rec, bias = layer_as_lists(params.decoder)
        expected = 0.0
        for _, segment in example.targets:
            decoded = ref_decode(
                w_in, w_rec, bias, params.w_out.tolist(), params.b_out.tolist(),
                z, segment.features.tolist(),
            )
            expected += ref_target_loss(segment.features.tolist(), decoded)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_loss_non_negative_and_permutation_invariant(self):
        rng = np.random.default_rng(6)
        params = random_params(12)
        example = make_example(rng, target_lens=(3, 2, 4))
        loss, _ = skipgram_loss(params, example)
        assert loss >= 0.0
        shuffled = SkipGramExample(center=example.center, targets=example.targets[::-1])
        loss_shuffled, _ = skipgram_loss(params, shuffled)
        assert loss_shuffled == pytest.approx(loss, abs=1e-12)


class TestSkipgramGradient:
    def test_zero_loss_configuration_has_zero_gradient(self):
        params = zero_params()
        rng = np.random.default_rng(0)
        example = make_example(rng, scale=0.0)
        loss, grad = skipgram_gradient(params, example)
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_duplicate_target_doubles_its_contribution(self):
        rng = np.random.default_rng(3)
        params = random_params(9)
        single = make_example(rng, target_lens=(3,))
        doubled = SkipGramExample(center=single.center, targets=single.targets * 2)
        _, g1 = skipgram_gradient(params, single)
        _, g2 = skipgram_gradient(params, doubled)
        assert np.allclose(g2, 2.0 * g1, atol=1e-12)

    def test_target_permutation_invariance(self):
        rng = np.random.default_rng(7)
        params = random_params(15)
        example = make_example(rng, target_lens=(2, 4, 3))
        _, g1 = skipgram_gradient(params, example)
        _, g2 = skipgram_gradient(
            params, SkipGramExample(center=example.center, targets=example.targets[::-1])
        )
        assert np.abs(g1 - g2).max() < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        params, example = make_probe_instance(seed)
        assert finite_difference_check(params, example, epsilon=1e-5) < 1e-6

    def test_raw_sum_gradient_matches_finite_differences(self):
        params, example = make_probe_instance(31)
        err = finite_difference_check(params, example, epsilon=1e-5, per_frame_mean=False)
        assert err < 1e-6

    def test_non_finite_gradient_reports_location(self):
        from speechvec.errors import NumericalError

        params, example = make_probe_instance(0)
        params.w_out[0, 0] = np.inf
        with np.errstate(all="ignore"), pytest.raises(NumericalError, match="index"):
            skipgram_gradient(params, example)


class TestFiniteDifferenceCheck:
    def test_detects_a_wrong_gradient(self):
        params, example = make_probe_instance(0)
        err = finite_difference_check(params, example, analytic=np.zeros(count_params(params)))
        assert err > 1e-2

    def test_epsilon_insensitivity(self):
        # Neither epsilon should be in the round-off-dominated regime.
        params, example = make_probe_instance(1)
        coarse = finite_difference_check(params, example, epsilon=1e-5)
        fine = finite_difference_check(params, example, epsilon=1e-6)
        assert coarse < 1e-6 and fine < 1e-5
        assert fine / coarse < 100.0

    def test_requires_float64(self):
        config = ModelConfig(feature_dim=3, hidden_size=4, num_encoder_layers=1)
        params = init_params(config, seed=0, dtype=np.float32)
        _, example = make_probe_instance(0)
        with pytest.raises(ValidationError):
            finite_difference_check(params, example)


class TestParamsPlumbing:
    def test_init_deterministic(self):
        a = flatten_params(random_params(5))
        b = flatten_params(random_params(5))
        assert np.array_equal(a, b)

    def test_forget_bias_is_one_rest_zero(self):
        params = random_params(0, h=6)
        for layer in params.encoder_layers + [params.decoder]:
            assert np.all(layer.bias[6:12] == 1.0)
            assert np.all(layer.bias[:6] == 0.0)
            assert np.all(layer.bias[12:] == 0.0)

    def test_weight_support_bounds(self):
        params = random_params(1, d=3, h=6)
        first = params.encoder_layers[0]
        assert np.abs(first.w_in).max() <= 1.0 / np.sqrt(3)
        assert np.abs(first.w_rec).max() <= 1.0 / np.sqrt(6)

    def test_flat_roundtrip_preserves_forward(self):
        rng = np.random.default_rng(8)
        params = random_params(21)
        rebuilt = unflatten_params(flatten_params(params), params)
        x = rng.standard_normal((5, 3))
        assert np.array_equal(encode(params, x), encode(rebuilt, x))
        assert np.array_equal(flatten_params(rebuilt), flatten_params(params))

    def test_flat_length_is_param_count(self):
        params = random_params(2)
        assert flatten_params(params).shape == (count_params(params),)

    def test_unflatten_rejects_wrong_length(self):
        params = random_params(2)
        with pytest.raises(ValidationError):
            unflatten_params(np.zeros(3), params)
