"""SGD training loop with padded batches, plus binary checkpointing.

Plain stochastic gradient descent without momentum at a fixed learning
rate, the original training regime. Per epoch: shuffle with a seeded
generator, bucket into padded batches, step along the mean batch gradient
with optional global-norm clipping. Runs are deterministic given the seed
under single-threaded execution.
"""

import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .batching import batch_examples, batch_gradient
from .corpus import NormalizationStats
from .errors import FormatError, NumericalError, ValidationError
from .model import ModelConfig, ModelParams, flatten_params, init_params, param_arrays

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"A2VC"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults mirror the original recipe (lr 1e-3,
    500 epochs, k=5), with clipping and per-frame loss normalization added
    for stability. Set faithful() to train with the raw summed objective
    and no clipping."""

    learning_rate: float = 1e-3
    epochs: int = 500
    k: int = 5
    batch_size: int = 32
    grad_clip_norm: float | None = 5.0
    seed: int = 0
    precision: str = "f64"
    per_frame_loss: bool = True

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.k < 1:
            raise ValidationError("window k must be >= 1")
        if self.precision not in _DTYPES:
            raise ValidationError(f"precision must be one of {sorted(_DTYPES)}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValidationError("grad_clip_norm must be positive or None")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def faithful(self) -> "TrainConfig":
        """Variant with no clipping and the raw summed squared-error loss."""
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            k=self.k,
            batch_size=self.batch_size,
            grad_clip_norm=None,
            seed=self.seed,
            precision=self.precision,
            per_frame_loss=False,
        )


@dataclass
class TrainState:
    """Everything needed to resume or deploy: parameters, feature
    normalization, progress counters, and the shuffler's generator state."""

    params: ModelParams
    normalization: NormalizationStats | None
    epoch: int
    running_loss: float
    rng_state: dict
    config: TrainConfig
    loss_history: list = field(default_factory=list)


class TrainingDivergedError(NumericalError):
    """Raised when a loss or gradient goes non-finite; carries the last
    state that was still finite."""

    def __init__(self, message, state: TrainState):
        super().__init__(message)
        self.state = state


def clip_gradient(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Scale grad so its global norm is at most max_norm; direction unchanged."""
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def _apply_update(params: ModelParams, step: np.ndarray) -> None:
    pos = 0
    for array in param_arrays(params):
        array -= step[pos : pos + array.size].reshape(array.shape).astype(array.dtype)
        pos += array.size


def _copy_params(params: ModelParams) -> ModelParams:
    from .model import unflatten_params

    return unflatten_params(flatten_params(params), params)


def train(
    examples,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    params: ModelParams | None = None,
    normalization: NormalizationStats | None = None,
    on_epoch=None,
) -> TrainState:
    """Run SGD over skip-gram examples and return the final TrainState.

    on_epoch(epoch, mean_loss, wall_seconds, state) fires after every
    epoch with that epoch's TrainState snapshot. A non-finite loss or
    gradient aborts with TrainingDivergedError carrying the last finite
    state.
    """
    config.validate()
    if not examples:
        raise ValidationError("need at least one training example")

    seed_seq = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq = seed_seq.spawn(2)
    if params is None:
        if model_config is None:
            model_config = ModelConfig(feature_dim=examples[0].center.features.shape[1])
        params = init_params(model_config, seed=init_seq, dtype=config.dtype)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    def snapshot(epoch, loss, history):
        return TrainState(
            params=_copy_params(params),
            normalization=normalization,
            epoch=epoch,
            running_loss=loss,
            rng_state=shuffle_rng.bit_generator.state,
            config=config,
            loss_history=list(history),
        )

    history: list[float] = []
    last_good = snapshot(0, float("nan"), history)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(examples))
        shuffled = [examples[i] for i in order]
        batches = batch_examples(shuffled, config.batch_size, dtype=config.dtype)

        loss_sum = 0.0
        for batch in batches:
            per_example, grad = batch_gradient(params, batch, per_frame_mean=config.per_frame_loss)
            if not np.all(np.isfinite(per_example)) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(
                    f"non-finite loss or gradient in epoch {epoch}", last_good
                )
            loss_sum += float(per_example.sum())
            grad = clip_gradient(grad, config.grad_clip_norm)
            _apply_update(params, config.learning_rate * grad)

        mean_loss = loss_sum / len(examples)
        history.append(mean_loss)
        last_good = snapshot(epoch, mean_loss, history)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, time.perf_counter() - started, last_good)

    return last_good


# --- Checkpoint format -------------------------------------------------------
#
# magic "A2VC" | u32 version | u32 len + key=value config block (UTF-8)
# | u32 d + d f64 means + d f64 stds | u64 param count + raw params
# (dtype per the config's precision key) | u32 len + RNG state JSON


def _config_block(state: TrainState) -> bytes:
    config, model = state.config, state.params.config()
    pairs = {
        "precision": config.precision,
        "learning_rate": repr(config.learning_rate),
        "epochs": config.epochs,
        "k": config.k,
        "batch_size": config.batch_size,
        "grad_clip_norm": "none" if config.grad_clip_norm is None else repr(config.grad_clip_norm),
        "seed": config.seed,
        "per_frame_loss": "true" if config.per_frame_loss else "false",
        "feature_dim": model.feature_dim,
        "hidden_size": model.hidden_size,
        "num_encoder_layers": model.num_encoder_layers,
        "epoch": state.epoch,
        "running_loss": repr(state.running_loss),
    }
    return "".join(f"{k}={v}\n" for k, v in pairs.items()).encode("utf-8")


def _parse_config_block(blob: bytes) -> dict:
    values = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        values[key] = value
    return values


def save_checkpoint(state: TrainState, path) -> None:
    """Serialize a TrainState; the round trip is bit-identical."""
    config_block = _config_block(state)
    flat = flatten_params(state.params)
    rng_blob = json.dumps(state.rng_state).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_block)))
        fh.write(config_block)
        if state.normalization is None:
            fh.write(struct.pack("<I", 0))
        else:
            mean = np.asarray(state.normalization.mean, dtype="<f8")
            std = np.asarray(state.normalization.std, dtype="<f8")
            fh.write(struct.pack("<I", mean.size))
            fh.write(mean.tobytes())
            fh.write(std.tobytes())
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype(flat.dtype.newbyteorder("<")).tobytes())
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, cast_to: str | None = None) -> TrainState:
    """Load a checkpoint; cast_to ('f32'/'f64') converts parameters, logged."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    magic, version = reader.unpack("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    (config_len,) = reader.unpack("<I")
    values = _parse_config_block(reader.take(config_len))
    try:
        clip = values["grad_clip_norm"]
        config = TrainConfig(
            learning_rate=float(values["learning_rate"]),
            epochs=int(values["epochs"]),
            k=int(values["k"]),
            batch_size=int(values["batch_size"]),
            grad_clip_norm=None if clip == "none" else float(clip),
            seed=int(values["seed"]),
            precision=values["precision"],
            per_frame_loss=values["per_frame_loss"] == "true",
        )
        model_config = ModelConfig(
            feature_dim=int(values["feature_dim"]),
            hidden_size=int(values["hidden_size"]),
            num_encoder_layers=int(values["num_encoder_layers"]),
        )
        epoch = int(values["epoch"])
        running_loss = float(values["running_loss"])
    except KeyError as exc:
        raise FormatError(f"{path}: config block is missing {exc}")

    (norm_dim,) = reader.unpack("<I")
    normalization = None
    if norm_dim:
        mean = np.frombuffer(reader.take(8 * norm_dim), dtype="<f8").copy()
        std = np.frombuffer(reader.take(8 * norm_dim), dtype="<f8").copy()
        normalization = NormalizationStats(mean=mean, std=std)

    (param_count,) = reader.unpack("<Q")
    dtype = config.dtype
    flat = np.frombuffer(
        reader.take(param_count * dtype().itemsize), dtype=np.dtype(dtype).newbyteorder("<")
    ).astype(dtype)

    (rng_len,) = reader.unpack("<I")
    rng_state = json.loads(reader.take(rng_len).decode("utf-8"))
    if reader.pos != len(reader.blob):
        raise FormatError(f"{path}: {len(reader.blob) - reader.pos} trailing bytes")

    from .model import count_params, unflatten_params

    template = init_params(model_config, seed=0, dtype=dtype)
    if param_count != count_params(template):
        raise FormatError(
            f"{path}: parameter count {param_count} does not match the declared shape"
        )
    params = unflatten_params(flat, template)

    if cast_to is not None and cast_to != config.precision:
        if cast_to not in _DTYPES:
            raise ValidationError(f"cannot cast parameters to {cast_to!r}")
        logger.info("casting checkpoint parameters from %s to %s", config.precision, cast_to)
        target = _DTYPES[cast_to]
        params = unflatten_params(
            flatten_params(params).astype(target),
            init_params(model_config, seed=0, dtype=target),
        )
        config.precision = cast_to

    return TrainState(
        params=params,
        normalization=normalization,
        epoch=epoch,
        running_loss=running_loss,
        rng_state=rng_state,
        config=config,
    )
