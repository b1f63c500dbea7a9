"""LSTM encoder-decoder for skip-gram training over audio segments.

A stacked LSTM encoder reads a variable-length feature sequence and its
top-layer final hidden state is the segment's fixed-length embedding. A
single shared LSTM decoder, seeded with that embedding, reconstructs each
neighbor segment under squared-error loss; gradients are computed by
exact reverse accumulation through the unrolled network (decoder steps,
the shared embedding, then encoder steps).

Everything is plain numpy on one example; all functions are pure given
(params, inputs), so callers may evaluate different examples concurrently
against read-only parameters.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ValidationError


@dataclass
class ModelConfig:
    """Network sizes; defaults follow the 3x300 encoder / 1x300 decoder setup."""

    feature_dim: int = 13
    hidden_size: int = 300
    num_encoder_layers: int = 3


@dataclass
class LstmLayerParams:
    """One LSTM layer; rows of w_in/w_rec/bias are gate-major: i, f, g, o."""

    w_in: np.ndarray  # (4h, d_in)
    w_rec: np.ndarray  # (4h, h)
    bias: np.ndarray  # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.w_rec.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_in.shape[1]


@dataclass
class HiddenState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class ModelParams:
    """All trainable parameters of the encoder-decoder."""

    encoder_layers: list
    decoder: LstmLayerParams
    w_out: np.ndarray  # (d, h)
    b_out: np.ndarray  # (d,)

    @property
    def hidden_size(self) -> int:
        return self.encoder_layers[-1].hidden_size

    @property
    def feature_dim(self) -> int:
        return self.encoder_layers[0].input_size

    @property
    def dtype(self):
        return self.w_out.dtype

    def config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim,
            hidden_size=self.hidden_size,
            num_encoder_layers=len(self.encoder_layers),
        )


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Uniform(-r, r) weights with r = 1/sqrt(fan_in); forget-gate biases 1."""
    rng = np.random.default_rng(seed)
    h = config.hidden_size

    def layer(d_in: int) -> LstmLayerParams:
        r_in = 1.0 / math.sqrt(d_in)
        r_rec = 1.0 / math.sqrt(h)
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0
        return LstmLayerParams(
            w_in=rng.uniform(-r_in, r_in, size=(4 * h, d_in)).astype(dtype),
            w_rec=rng.uniform(-r_rec, r_rec, size=(4 * h, h)).astype(dtype),
            bias=bias.astype(dtype),
        )

    encoder = [
        layer(config.feature_dim if i == 0 else h) for i in range(config.num_encoder_layers)
    ]
    decoder = layer(config.feature_dim)
    r_out = 1.0 / math.sqrt(h)
    w_out = rng.uniform(-r_out, r_out, size=(config.feature_dim, h)).astype(dtype)
    b_out = np.zeros(config.feature_dim, dtype=dtype)
    return ModelParams(encoder_layers=encoder, decoder=decoder, w_out=w_out, b_out=b_out)


def param_arrays(params: ModelParams) -> list:
    """Every parameter array in flat_view order; views, not copies."""
    arrays = []
    for layer in params.encoder_layers:
        arrays.extend([layer.w_in, layer.w_rec, layer.bias])
    arrays.extend([params.decoder.w_in, params.decoder.w_rec, params.decoder.bias])
    arrays.extend([params.w_out, params.b_out])
    return arrays


def count_params(params: ModelParams) -> int:
    return sum(a.size for a in param_arrays(params))


def flatten_params(params: ModelParams) -> np.ndarray:
    """Stable enumeration of every scalar: encoder layers, decoder, projection."""
    return np.concatenate([a.ravel() for a in param_arrays(params)])


def unflatten_params(flat: np.ndarray, like: ModelParams) -> ModelParams:
    """Inverse of flatten_params, taking shapes (and dtype) from `like`."""
    flat = np.asarray(flat)
    if flat.shape != (count_params(like),):
        raise ValidationError(
            f"flat vector of {flat.shape} does not match {count_params(like)} parameters"
        )
    pos = 0

    def take(template: np.ndarray) -> np.ndarray:
        nonlocal pos
        chunk = flat[pos : pos + template.size]
        pos += template.size
        return chunk.reshape(template.shape).astype(like.dtype)

    encoder = [
        LstmLayerParams(w_in=take(l.w_in), w_rec=take(l.w_rec), bias=take(l.bias))
        for l in like.encoder_layers
    ]
    decoder = LstmLayerParams(
        w_in=take(like.decoder.w_in), w_rec=take(like.decoder.w_rec), bias=take(like.decoder.bias)
    )
    return ModelParams(
        encoder_layers=encoder, decoder=decoder, w_out=take(like.w_out), b_out=take(like.b_out)
    )


def lstm_cell_step(layer: LstmLayerParams, x: np.ndarray, prev: HiddenState) -> HiddenState:
    """One LSTM update: c = f*c_prev + i*g, h = o*tanh(c)."""
    h_size = layer.hidden_size
    x = np.asarray(x)
    if x.shape != (layer.input_size,) or prev.h.shape != (h_size,) or prev.c.shape != (h_size,):
        raise ValidationError(
            f"shape mismatch: x {x.shape}, h {prev.h.shape}, expected input "
            f"{layer.input_size} and hidden {h_size}"
        )
    pre = layer.w_in @ x + layer.w_rec @ prev.h + layer.bias
    gate_i = expit(pre[:h_size])
    gate_f = expit(pre[h_size : 2 * h_size])
    gate_g = np.tanh(pre[2 * h_size : 3 * h_size])
    gate_o = expit(pre[3 * h_size :])
    c = gate_f * prev.c + gate_i * gate_g
    return HiddenState(h=gate_o * np.tanh(c), c=c)


class _LayerTrace:
    """Per-step activations of one layer, kept for reverse accumulation."""

    __slots__ = ("inputs", "gate_i", "gate_f", "gate_g", "gate_o", "c", "tanh_c", "h")

    def __init__(self, n_steps: int, d_in: int, h_size: int, dtype):
        self.inputs = np.zeros((n_steps, d_in), dtype=dtype)
        self.gate_i = np.zeros((n_steps, h_size), dtype=dtype)
        self.gate_f = np.zeros((n_steps, h_size), dtype=dtype)
        self.gate_g = np.zeros((n_steps, h_size), dtype=dtype)
        self.gate_o = np.zeros((n_steps, h_size), dtype=dtype)
        self.c = np.zeros((n_steps, h_size), dtype=dtype)
        self.tanh_c = np.zeros((n_steps, h_size), dtype=dtype)
        self.h = np.zeros((n_steps, h_size), dtype=dtype)


def _layer_forward(layer: LstmLayerParams, inputs: np.ndarray, h0=None) -> _LayerTrace:
    """Run one layer over a (T, d_in) sequence; h0 defaults to zero, c0 is zero."""
    n_steps = inputs.shape[0]
    h_size = layer.hidden_size
    trace = _LayerTrace(n_steps, layer.input_size, h_size, inputs.dtype)
    trace.inputs[:] = inputs
    h = np.zeros(h_size, dtype=inputs.dtype) if h0 is None else h0
    c = np.zeros(h_size, dtype=inputs.dtype)
    for t in range(n_steps):
        pre = layer.w_in @ inputs[t] + layer.w_rec @ h + layer.bias
        gate_i = expit(pre[:h_size])
        gate_f = expit(pre[h_size : 2 * h_size])
        gate_g = np.tanh(pre[2 * h_size : 3 * h_size])
        gate_o = expit(pre[3 * h_size :])
        c = gate_f * c + gate_i * gate_g
        tanh_c = np.tanh(c)
        h = gate_o * tanh_c
        trace.gate_i[t], trace.gate_f[t], trace.gate_g[t] = gate_i, gate_f, gate_g
        trace.gate_o[t], trace.c[t], trace.tanh_c[t] = gate_o, c, tanh_c
        trace.h[t] = h
    return trace


class _LayerGrads:
    __slots__ = ("w_in", "w_rec", "bias")

    def __init__(self, layer: LstmLayerParams):
        self.w_in = np.zeros_like(layer.w_in)
        self.w_rec = np.zeros_like(layer.w_rec)
        self.bias = np.zeros_like(layer.bias)


def _layer_backward(layer, trace, d_h_seq, grads, h0=None):
    """Reverse accumulation through one unrolled layer.

    d_h_seq holds upstream gradients w.r.t. each step's output h_t.
    Returns (d_inputs, d_h0): gradients w.r.t. the input sequence and the
    initial hidden state (nonzero path only via the first recurrence).
    """
    n_steps = trace.inputs.shape[0]
    h_size = layer.hidden_size
    d_inputs = np.zeros_like(trace.inputs)
    dh_next = np.zeros(h_size, dtype=trace.inputs.dtype)
    dc_next = np.zeros(h_size, dtype=trace.inputs.dtype)
    for t in range(n_steps - 1, -1, -1):
        dh = d_h_seq[t] + dh_next
        # h = o*tanh(c); c = f*c_prev + i*g
        d_gate_o = dh * trace.tanh_c[t]
        dc = dc_next + dh * trace.gate_o[t] * (1.0 - trace.tanh_c[t] ** 2)
        c_prev = trace.c[t - 1] if t > 0 else np.zeros(h_size, dtype=trace.inputs.dtype)
        h_prev = trace.h[t - 1] if t > 0 else (
            np.zeros(h_size, dtype=trace.inputs.dtype) if h0 is None else h0
        )
        d_gate_i = dc * trace.gate_g[t]
        d_gate_f = dc * c_prev
        d_gate_g = dc * trace.gate_i[t]
        dc_next = dc * trace.gate_f[t]
        # Through the gate nonlinearities to the pre-activations.
        d_pre = np.concatenate(
            [
                d_gate_i * trace.gate_i[t] * (1.0 - trace.gate_i[t]),
                d_gate_f * trace.gate_f[t] * (1.0 - trace.gate_f[t]),
                d_gate_g * (1.0 - trace.gate_g[t] ** 2),
                d_gate_o * trace.gate_o[t] * (1.0 - trace.gate_o[t]),
            ]
        )
        grads.w_in += np.outer(d_pre, trace.inputs[t])
        grads.w_rec += np.outer(d_pre, h_prev)
        grads.bias += d_pre
        d_inputs[t] = layer.w_in.T @ d_pre
        dh_next = layer.w_rec.T @ d_pre
    return d_inputs, dh_next


def _check_sequence(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=params.dtype)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValidationError("feature sequence must be a (T, d) matrix with T >= 1")
    if frames.shape[1] != params.feature_dim:
        raise ValidationError(
            f"feature dim {frames.shape[1]} does not match model dim {params.feature_dim}"
        )
    return frames


def _encoder_forward(params: ModelParams, frames: np.ndarray) -> list:
    traces = []
    inputs = frames
    for layer in params.encoder_layers:
        trace = _layer_forward(layer, inputs)
        traces.append(trace)
        inputs = trace.h
    return traces


def encode(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    """Run the stacked encoder from zero states; returns the top-layer final h."""
    frames = _check_sequence(params, frames)
    return _encoder_forward(params, frames)[-1].h[-1].copy()


def encode_states(params: ModelParams, frames: np.ndarray) -> list:
    """Final (h, c) of every encoder layer, bottom to top."""
    frames = _check_sequence(params, frames)
    traces = _encoder_forward(params, frames)
    return [HiddenState(h=t.h[-1].copy(), c=t.c[-1].copy()) for t in traces]


def _decoder_inputs(target: np.ndarray, dtype) -> np.ndarray:
    """Teacher-forced decoder inputs: zero frame, then target frames 0..T'-2."""
    inputs = np.zeros_like(target, dtype=dtype)
    inputs[1:] = target[:-1]
    return inputs


def decode_target(
    params: ModelParams, z: np.ndarray, target: np.ndarray, teacher_forcing: bool = True
) -> np.ndarray:
    """Decode for exactly target.shape[0] steps starting from h0 = z, c0 = 0.

    The first step consumes a zero frame; later steps consume the previous
    target frame (teacher forcing) or the previous prediction.
    """
    target = _check_sequence(params, target)
    z = np.asarray(z, dtype=params.dtype)
    if z.shape != (params.decoder.hidden_size,):
        raise ValidationError(
            f"embedding of shape {z.shape} does not match decoder size "
            f"{params.decoder.hidden_size}"
        )
    if teacher_forcing:
        trace = _layer_forward(params.decoder, _decoder_inputs(target, params.dtype), h0=z)
        return trace.h @ params.w_out.T + params.b_out

    n_steps, d = target.shape
    outputs = np.zeros((n_steps, d), dtype=params.dtype)
    state = HiddenState(h=z, c=np.zeros_like(z))
    frame = np.zeros(d, dtype=params.dtype)
    for t in range(n_steps):
        state = lstm_cell_step(params.decoder, frame, state)
        outputs[t] = params.w_out @ state.h + params.b_out
        frame = outputs[t]
    return outputs


def _target_weight(target: np.ndarray, per_frame_mean: bool) -> float:
    return 1.0 / (target.shape[0] * target.shape[1]) if per_frame_mean else 1.0


def skipgram_loss(params: ModelParams, example, per_frame_mean: bool = True):
    """Squared-error loss of decoding every target from the center's embedding.

    Returns (total_loss, per_target_losses). With per_frame_mean each
    target's squared error is averaged over its frames and coefficients;
    otherwise it is the raw sum.
    """
    z = encode(params, example.center.features)
    per_target = []
    for _, segment in example.targets:
        target = _check_sequence(params, segment.features)
        decoded = decode_target(params, z, target, teacher_forcing=True)
        per_target.append(_target_weight(target, per_frame_mean) * float(((target - decoded) ** 2).sum()))
    return float(sum(per_target)), per_target


def skipgram_gradient(params: ModelParams, example, per_frame_mean: bool = True):
    """Exact loss gradient w.r.t. flatten_params(params), via BPTT.

    Reverse accumulation runs through each teacher-forced decoder unroll,
    sums every target's contribution into the shared embedding, then
    continues through the stacked encoder. Returns (loss, flat_gradient).
    """
    center = _check_sequence(params, example.center.features)
    encoder_traces = _encoder_forward(params, center)
    z = encoder_traces[-1].h[-1]

    enc_grads = [_LayerGrads(layer) for layer in params.encoder_layers]
    dec_grads = _LayerGrads(params.decoder)
    d_w_out = np.zeros_like(params.w_out)
    d_b_out = np.zeros_like(params.b_out)
    dz = np.zeros_like(z)

    loss = 0.0
    for _, segment in example.targets:
        target = _check_sequence(params, segment.features)
        trace = _layer_forward(params.decoder, _decoder_inputs(target, params.dtype), h0=z)
        decoded = trace.h @ params.w_out.T + params.b_out
        weight = _target_weight(target, per_frame_mean)
        residual = decoded - target
        loss += weight * float((residual**2).sum())

        d_decoded = 2.0 * weight * residual
        d_w_out += d_decoded.T @ trace.h
        d_b_out += d_decoded.sum(axis=0)
        d_h_seq = d_decoded @ params.w_out
        _, d_h0 = _layer_backward(params.decoder, trace, d_h_seq, dec_grads, h0=z)
        dz += d_h0

    # Encoder: the embedding is the top layer's h at the final step only.
    d_h_seq = np.zeros_like(encoder_traces[-1].h)
    d_h_seq[-1] = dz
    for index in range(len(params.encoder_layers) - 1, -1, -1):
        d_inputs, _ = _layer_backward(
            params.encoder_layers[index], encoder_traces[index], d_h_seq, enc_grads[index]
        )
        d_h_seq = d_inputs

    pieces = []
    for grads in enc_grads:
        pieces.extend([grads.w_in.ravel(), grads.w_rec.ravel(), grads.bias])
    pieces.extend([dec_grads.w_in.ravel(), dec_grads.w_rec.ravel(), dec_grads.bias])
    pieces.extend([d_w_out.ravel(), d_b_out])
    flat = np.concatenate(pieces)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise NumericalError(f"non-finite gradient at flat parameter index {bad}")
    return float(loss), flat


def make_probe_instance(seed: int, feature_scale: float = 0.004):
    """Tiny seeded (params, example) pair for finite-difference verification.

    Sizes: 2-layer encoder with 6 hidden units, feature dim 3, sequence
    lengths up to 4, up to 4 targets within a window of 2. The small
    feature amplitude keeps the loss surface gentle enough that central
    differences at epsilon ~1e-5 resolve every parameter below the
    relative-error floor; at larger amplitudes the comparison is limited
    by the difference quotient, not by the analytic gradient.
    """
    from .corpus import SkipGramExample, WordSegment

    rng = np.random.default_rng(seed)
    config = ModelConfig(feature_dim=3, hidden_size=6, num_encoder_layers=2)
    params = init_params(config, seed=seed)

    def segment(index: int) -> WordSegment:
        length = int(rng.integers(1, 5))
        return WordSegment(
            utterance_id="probe",
            index_in_utterance=index,
            word=f"w{index}",
            features=feature_scale * rng.standard_normal((length, 3)),
            start_frame=0,
            end_frame=length,
        )

    n_targets = int(rng.integers(1, 5))
    offsets = rng.choice([-2, -1, 1, 2], size=n_targets, replace=False)
    example = SkipGramExample(
        center=segment(0),
        targets=[(int(o), segment(10 + i)) for i, o in enumerate(offsets)],
    )
    return params, example


def finite_difference_check(
    params: ModelParams,
    example,
    epsilon: float = 1e-5,
    indices=None,
    analytic: np.ndarray | None = None,
    per_frame_mean: bool = True,
) -> float:
    """Max relative error between central differences and the analytic gradient.

    Relative error is |a - b| / max(1e-8, |a| + |b|), checked per parameter
    (all of them unless `indices` narrows the sweep). 64-bit only.
    """
    if params.dtype != np.float64:
        raise ValidationError("finite differences require float64 parameters")
    if analytic is None:
        _, analytic = skipgram_gradient(params, example, per_frame_mean=per_frame_mean)
    flat = flatten_params(params)
    if indices is None:
        indices = range(flat.size)

    worst = 0.0
    for j in indices:
        bumped = flat.copy()
        bumped[j] = flat[j] + epsilon
        up, _ = skipgram_loss(unflatten_params(bumped, params), example, per_frame_mean)
        bumped[j] = flat[j] - epsilon
        down, _ = skipgram_loss(unflatten_params(bumped, params), example, per_frame_mean)
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(numeric - analytic[j]) / max(1e-8, abs(numeric) + abs(analytic[j]))
        worst = max(worst, err)
    return worst
