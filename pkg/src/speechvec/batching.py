"""Padded mini-batches and the vectorized batched loss/gradient.

Batching is purely a throughput device: the masked batched path produces
the same per-example losses and the same mean gradient as running each
example through the single-example code, up to float summation order.
Sequences are right-padded; masks are 1.0 inside each true length and
exactly 0.0 beyond it, and padded positions contribute exactly zero to
losses and gradients. Hidden states carry through masked encoder steps,
so the final state equals the state at each sequence's true last frame.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .model import ModelParams


@dataclass
class PaddedBatch:
    """Center and target sequences for a set of examples, padded and masked."""

    center_frames: np.ndarray  # (B, Tc, d)
    center_mask: np.ndarray  # (B, Tc)
    center_lengths: np.ndarray  # (B,)
    target_frames: np.ndarray  # (N, Tt, d)
    target_mask: np.ndarray  # (N, Tt)
    target_lengths: np.ndarray  # (N,)
    target_example: np.ndarray  # (N,) row of the example each target belongs to

    @property
    def size(self) -> int:
        return self.center_frames.shape[0]


def _pad(sequences, dtype):
    longest = max(s.shape[0] for s in sequences)
    dim = sequences[0].shape[1]
    frames = np.zeros((len(sequences), longest, dim), dtype=dtype)
    mask = np.zeros((len(sequences), longest), dtype=dtype)
    lengths = np.zeros(len(sequences), dtype=np.int64)
    for row, seq in enumerate(sequences):
        n = seq.shape[0]
        frames[row, :n] = seq
        mask[row, :n] = 1.0
        lengths[row] = n
    return frames, mask, lengths


def make_batch(examples, dtype=np.float64) -> PaddedBatch:
    """Pad one group of examples into a batch."""
    if not examples:
        raise ValidationError("cannot build an empty batch")
    centers = [np.asarray(e.center.features, dtype=dtype) for e in examples]
    targets, owner = [], []
    for row, example in enumerate(examples):
        if not example.targets:
            raise ValidationError("example without targets cannot be batched")
        for _, segment in example.targets:
            targets.append(np.asarray(segment.features, dtype=dtype))
            owner.append(row)
    center_frames, center_mask, center_lengths = _pad(centers, dtype)
    target_frames, target_mask, target_lengths = _pad(targets, dtype)
    return PaddedBatch(
        center_frames=center_frames,
        center_mask=center_mask,
        center_lengths=center_lengths,
        target_frames=target_frames,
        target_mask=target_mask,
        target_lengths=target_lengths,
        target_example=np.asarray(owner, dtype=np.int64),
    )


def batch_examples(examples, batch_size: int, dtype=np.float64) -> list:
    """Partition examples into padded batches, bucketing by center length.

    The stable sort keeps the incoming order within each length, so a
    caller-side shuffle still controls batch composition. Every example
    lands in exactly one batch.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    ordered = sorted(examples, key=lambda e: e.center.features.shape[0])
    return [
        make_batch(ordered[start : start + batch_size], dtype=dtype)
        for start in range(0, len(ordered), batch_size)
    ]


class _BatchTrace:
    __slots__ = ("inputs", "mask", "gate_i", "gate_f", "gate_g", "gate_o",
                 "c_new", "tanh_c", "h_seq", "c_seq", "h0")

    def __init__(self, inputs, mask, h0):
        self.inputs = inputs
        self.mask = mask
        self.h0 = h0
        self.gate_i = self.gate_f = self.gate_g = self.gate_o = None
        self.c_new = self.tanh_c = self.h_seq = self.c_seq = None


def _layer_forward_batched(layer, inputs, mask=None, h0=None) -> _BatchTrace:
    """Run one layer over (B, T, d_in) with optional per-step state carry."""
    n_rows, n_steps, _ = inputs.shape
    h_size = layer.hidden_size
    dtype = inputs.dtype
    trace = _BatchTrace(inputs, mask, h0)
    shape = (n_rows, n_steps, h_size)
    trace.gate_i, trace.gate_f = np.zeros(shape, dtype), np.zeros(shape, dtype)
    trace.gate_g, trace.gate_o = np.zeros(shape, dtype), np.zeros(shape, dtype)
    trace.c_new, trace.tanh_c = np.zeros(shape, dtype), np.zeros(shape, dtype)
    trace.h_seq, trace.c_seq = np.zeros(shape, dtype), np.zeros(shape, dtype)

    h = np.zeros((n_rows, h_size), dtype=dtype) if h0 is None else h0.astype(dtype)
    c = np.zeros((n_rows, h_size), dtype=dtype)
    for t in range(n_steps):
        pre = inputs[:, t] @ layer.w_in.T + h @ layer.w_rec.T + layer.bias
        gate_i = expit(pre[:, :h_size])
        gate_f = expit(pre[:, h_size : 2 * h_size])
        gate_g = np.tanh(pre[:, 2 * h_size : 3 * h_size])
        gate_o = expit(pre[:, 3 * h_size :])
        c_new = gate_f * c + gate_i * gate_g
        tanh_c = np.tanh(c_new)
        h_new = gate_o * tanh_c
        if mask is None:
            h, c = h_new, c_new
        else:
            m = mask[:, t : t + 1]
            h = m * h_new + (1.0 - m) * h
            c = m * c_new + (1.0 - m) * c
        trace.gate_i[:, t], trace.gate_f[:, t] = gate_i, gate_f
        trace.gate_g[:, t], trace.gate_o[:, t] = gate_g, gate_o
        trace.c_new[:, t], trace.tanh_c[:, t] = c_new, tanh_c
        trace.h_seq[:, t], trace.c_seq[:, t] = h, c
    return trace


class _BatchLayerGrads:
    __slots__ = ("w_in", "w_rec", "bias")

    def __init__(self, layer):
        self.w_in = np.zeros_like(layer.w_in)
        self.w_rec = np.zeros_like(layer.w_rec)
        self.bias = np.zeros_like(layer.bias)


def _layer_backward_batched(layer, trace, d_h_seq, grads):
    """Reverse pass matching _layer_forward_batched, honoring the state carry."""
    inputs, mask = trace.inputs, trace.mask
    n_rows, n_steps, _ = inputs.shape
    h_size = layer.hidden_size
    dtype = inputs.dtype
    d_inputs = np.zeros_like(inputs)
    dh_carry = np.zeros((n_rows, h_size), dtype=dtype)
    dc_carry = np.zeros((n_rows, h_size), dtype=dtype)
    zeros_state = np.zeros((n_rows, h_size), dtype=dtype)
    for t in range(n_steps - 1, -1, -1):
        d_h_out = d_h_seq[:, t] + dh_carry
        d_c_out = dc_carry
        if mask is None:
            dh_new, dc_new = d_h_out, d_c_out
            dh_pass = dc_pass = 0.0
        else:
            m = mask[:, t : t + 1]
            dh_new, dh_pass = m * d_h_out, (1.0 - m) * d_h_out
            dc_new, dc_pass = m * d_c_out, (1.0 - m) * d_c_out
        c_prev = trace.c_seq[:, t - 1] if t > 0 else zeros_state
        if t > 0:
            h_prev = trace.h_seq[:, t - 1]
        else:
            h_prev = trace.h0 if trace.h0 is not None else zeros_state

        d_gate_o = dh_new * trace.tanh_c[:, t]
        dc_total = dc_new + dh_new * trace.gate_o[:, t] * (1.0 - trace.tanh_c[:, t] ** 2)
        d_gate_i = dc_total * trace.gate_g[:, t]
        d_gate_f = dc_total * c_prev
        d_gate_g = dc_total * trace.gate_i[:, t]
        d_pre = np.concatenate(
            [
                d_gate_i * trace.gate_i[:, t] * (1.0 - trace.gate_i[:, t]),
                d_gate_f * trace.gate_f[:, t] * (1.0 - trace.gate_f[:, t]),
                d_gate_g * (1.0 - trace.gate_g[:, t] ** 2),
                d_gate_o * trace.gate_o[:, t] * (1.0 - trace.gate_o[:, t]),
            ],
            axis=1,
        )
        grads.w_in += d_pre.T @ inputs[:, t]
        grads.w_rec += d_pre.T @ h_prev
        grads.bias += d_pre.sum(axis=0)
        d_inputs[:, t] = d_pre @ layer.w_in
        dh_carry = dh_pass + d_pre @ layer.w_rec
        dc_carry = dc_pass + dc_total * trace.gate_f[:, t]
    return d_inputs, dh_carry


def _check_batch(params: ModelParams, batch: PaddedBatch):
    if batch.center_frames.shape[2] != params.feature_dim:
        raise ValidationError(
            f"batch feature dim {batch.center_frames.shape[2]} does not match "
            f"model dim {params.feature_dim}"
        )


def _encode_batched(params, batch, dtype):
    traces = []
    inputs = batch.center_frames.astype(dtype, copy=False)
    mask = batch.center_mask.astype(dtype, copy=False)
    for layer in params.encoder_layers:
        trace = _layer_forward_batched(layer, inputs, mask=mask)
        traces.append(trace)
        inputs = trace.h_seq
    return traces, traces[-1].h_seq[:, -1]


def _decoder_inputs_batched(target_frames, dtype):
    inputs = np.zeros_like(target_frames, dtype=dtype)
    inputs[:, 1:] = target_frames[:, :-1]
    return inputs


def _target_weights(batch, per_frame_mean, dtype):
    d = batch.target_frames.shape[2]
    if per_frame_mean:
        return (1.0 / (batch.target_lengths * d)).astype(dtype)
    return np.ones(len(batch.target_lengths), dtype=dtype)


def batch_loss(params: ModelParams, batch: PaddedBatch, per_frame_mean: bool = True) -> np.ndarray:
    """Per-example losses (B,) for a padded batch; masked frames contribute 0."""
    _check_batch(params, batch)
    dtype = params.dtype
    _, z = _encode_batched(params, batch, dtype)
    targets = batch.target_frames.astype(dtype, copy=False)
    dec_trace = _layer_forward_batched(
        params.decoder, _decoder_inputs_batched(targets, dtype), h0=z[batch.target_example]
    )
    decoded = dec_trace.h_seq @ params.w_out.T + params.b_out
    residual = (decoded - targets) * batch.target_mask.astype(dtype, copy=False)[:, :, None]
    per_target = _target_weights(batch, per_frame_mean, dtype) * (residual**2).sum(axis=(1, 2))
    per_example = np.zeros(batch.size, dtype=dtype)
    np.add.at(per_example, batch.target_example, per_target)
    return per_example


def batch_gradient(params: ModelParams, batch: PaddedBatch, per_frame_mean: bool = True):
    """Per-example losses and the flat gradient of their mean over the batch.

    The flat layout matches model.flatten_params: encoder layers (w_in,
    w_rec, bias) bottom-up, then the decoder, then the projection.
    """
    _check_batch(params, batch)
    dtype = params.dtype
    encoder_traces, z = _encode_batched(params, batch, dtype)
    targets = batch.target_frames.astype(dtype, copy=False)
    dec_trace = _layer_forward_batched(
        params.decoder, _decoder_inputs_batched(targets, dtype), h0=z[batch.target_example]
    )
    decoded = dec_trace.h_seq @ params.w_out.T + params.b_out
    residual = (decoded - targets) * batch.target_mask.astype(dtype, copy=False)[:, :, None]
    weights = _target_weights(batch, per_frame_mean, dtype)
    per_target = weights * (residual**2).sum(axis=(1, 2))
    per_example = np.zeros(batch.size, dtype=dtype)
    np.add.at(per_example, batch.target_example, per_target)

    # Gradient of mean(per_example): each target carries 2*w/B times its residual.
    d_decoded = (2.0 / batch.size) * weights[:, None, None] * residual
    d_w_out = np.einsum("ntd,nth->dh", d_decoded, dec_trace.h_seq)
    d_b_out = d_decoded.sum(axis=(0, 1))
    d_h_seq = d_decoded @ params.w_out

    dec_grads = _BatchLayerGrads(params.decoder)
    _, d_h0 = _layer_backward_batched(params.decoder, dec_trace, d_h_seq, dec_grads)
    dz = np.zeros_like(z)
    np.add.at(dz, batch.target_example, d_h0)

    enc_grads = [_BatchLayerGrads(layer) for layer in params.encoder_layers]
    d_h_upstream = np.zeros_like(encoder_traces[-1].h_seq)
    d_h_upstream[:, -1] = dz  # carried back to each row's true last frame by the mask
    for index in range(len(params.encoder_layers) - 1, -1, -1):
        d_inputs, _ = _layer_backward_batched(
            params.encoder_layers[index], encoder_traces[index], d_h_upstream, enc_grads[index]
        )
        d_h_upstream = d_inputs

    pieces = []
    for grads in enc_grads:
        pieces.extend([grads.w_in.ravel(), grads.w_rec.ravel(), grads.bias])
    pieces.extend([dec_grads.w_in.ravel(), dec_grads.w_rec.ravel(), dec_grads.bias])
    pieces.extend([d_w_out.ravel(), d_b_out])
    return per_example, np.concatenate(pieces)
