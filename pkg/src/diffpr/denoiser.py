"""Noise-prediction models: an exact Gaussian-prior oracle and a tiny trainable net.

Both implement the same interface: map a noisy latent and a step index to the
predicted injected noise. The analytic model is the MMSE-optimal predictor
when the clean data is Gaussian, which makes it an exact oracle for sampler
math; the tiny convolutional net exercises the denoising training loss
end-to-end at toy scale with hand-derived backpropagation.
"""

from __future__ import annotations

import abc
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, DimensionError, ParameterError, TrainingError
from .fields import ensure_image_field
from .schedule import NoiseSchedule

CHECKPOINT_FORMAT = "tiny-denoiser-v1"


class EpsilonModel(abc.ABC):
    """Interface: predict the injected noise from a latent and its step index."""

    @abc.abstractmethod
    def predict(self, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
        """Return a noise prediction with the shape of ``x_t``."""


# ---------------------------------------------------------------------------
# Analytic Gaussian-prior oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian clean-data model with mean ``mean`` and pixel variance ``var``."""

    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        if not self.var > 0.0:
            raise ParameterError(f"prior variance must be positive, got {self.var}")


def analytic_epsilon(prior: GaussianPrior, x_t: np.ndarray, t: int,
                     sched: NoiseSchedule) -> np.ndarray:
    """MMSE-optimal noise prediction under a Gaussian clean-data model.

    The latent and the injected noise are jointly Gaussian, so the posterior
    mean of the noise is linear in the latent:

        sqrt(1 - a_bar) * (x_t - sqrt(a_bar) * mean) / (a_bar * var + 1 - a_bar)

    with a_bar the cumulative signal fraction at step t.
    """
    x_t = ensure_image_field(x_t, "x_t")
    a_bar = sched.alpha_bar_at(t)
    denom = a_bar * prior.var + 1.0 - a_bar
    return np.sqrt(1.0 - a_bar) * (x_t - np.sqrt(a_bar) * prior.mean) / denom


class AnalyticGaussianDenoiser(EpsilonModel):
    def __init__(self, prior: GaussianPrior):
        self.prior = prior

    def predict(self, x_t, t, sched):
        return analytic_epsilon(self.prior, x_t, t, sched)


# ---------------------------------------------------------------------------
# Tiny convolutional noise predictor (manual backprop)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TinyDenoiserConfig:
    """Architecture: stacked periodic convolutions with tanh hidden activations.

    The step index enters as one extra input plane holding t/T, so the input
    has ``channels + 1`` planes and the output has ``channels``.
    """

    channels: int = 1
    hidden: tuple[int, ...] = (8,)
    kernel_size: int = 3

    def __post_init__(self):
        if self.channels < 1:
            raise ParameterError(f"channels must be >= 1, got {self.channels}")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise ParameterError(f"hidden widths must be positive, got {self.hidden}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def layer_widths(self) -> list[tuple[int, int]]:
        """(in_channels, out_channels) per conv layer, input plane included."""
        widths = [self.channels + 1, *self.hidden, self.channels]
        return list(zip(widths[:-1], widths[1:]))

    def arch_dict(self) -> dict:
        return {"channels": self.channels, "hidden": list(self.hidden),
                "kernel_size": self.kernel_size}

    def arch_hash(self) -> str:
        blob = json.dumps(self.arch_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TinyDenoiserParams:
    """Kernel/bias arrays per layer; kernels are (out_ch, in_ch, k*k) float64."""

    config: TinyDenoiserConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "TinyDenoiserParams":
        return TinyDenoiserParams(self.config, [w.copy() for w in self.weights],
                                  [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def with_flat(self, vec: np.ndarray) -> "TinyDenoiserParams":
        out = self.copy()
        pos = 0
        for arrs in zip(out.weights, out.biases):
            for a in arrs:
                a[...] = vec[pos : pos + a.size].reshape(a.shape)
                pos += a.size
        if pos != vec.size:
            raise ParameterError(f"flat vector has {vec.size} entries, expected {pos}")
        return out


def init_tiny_denoiser(config: TinyDenoiserConfig, rng: np.random.Generator,
                       init_scale: float = 0.5) -> TinyDenoiserParams:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    k2 = config.kernel_size ** 2
    weights, biases = [], []
    for c_in, c_out in config.layer_widths():
        weights.append(rng.standard_normal((c_out, c_in, k2)) * (init_scale / np.sqrt(c_in * k2)))
        biases.append(np.zeros(c_out))
    return TinyDenoiserParams(config=config, weights=weights, biases=biases)


def _kernel_offsets(kernel_size: int) -> list[tuple[int, int]]:
    r = kernel_size // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _shift_stack(x: np.ndarray, offsets) -> np.ndarray:
    # (N, C, H, W) -> (N, C, K, H, W); entry k at pixel p holds x at p + offset_k
    # (periodic boundary, so the adjoint is the opposite shift).
    return np.stack([np.roll(x, (-dy, -dx), axis=(-2, -1)) for dy, dx in offsets], axis=2)


def _forward_batch(params: TinyDenoiserParams, x: np.ndarray, t_frac: np.ndarray):
    """Forward pass on a batch (N, C, H, W); t_frac is (N,) step fractions."""
    n, _, h, w = x.shape
    t_plane = np.broadcast_to(np.asarray(t_frac, dtype=np.float64)[:, None, None, None],
                              (n, 1, h, w))
    a = np.concatenate([x, t_plane], axis=1)
    offsets = _kernel_offsets(params.config.kernel_size)
    last = len(params.weights) - 1
    caches = []
    for i, (wgt, b) in enumerate(zip(params.weights, params.biases)):
        stack = _shift_stack(a, offsets)
        z = np.einsum("nckhw,ock->nohw", stack, wgt) + b[None, :, None, None]
        caches.append((stack, z))
        a = z if i == last else np.tanh(z)
    return a, caches


def _backward_batch(params: TinyDenoiserParams, caches, d_out: np.ndarray):
    """Parameter gradients for the batch given dLoss/dOutput."""
    offsets = _kernel_offsets(params.config.kernel_size)
    last = len(params.weights) - 1
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    d = d_out
    for i in range(last, -1, -1):
        stack, z = caches[i]
        dz = d if i == last else d * (1.0 - np.tanh(z) ** 2)
        grads_w[i] = np.einsum("nohw,nckhw->ock", dz, stack)
        grads_b[i] = dz.sum(axis=(0, 2, 3))
        if i > 0:
            dstack = np.einsum("nohw,ock->nckhw", dz, params.weights[i])
            d = sum(np.roll(dstack[:, :, k], (dy, dx), axis=(-2, -1))
                    for k, (dy, dx) in enumerate(offsets))
    return grads_w, grads_b


def denoising_loss_and_grads(params: TinyDenoiserParams, x_t: np.ndarray,
                             t_frac: np.ndarray, eps: np.ndarray):
    """Monte-Carlo denoising loss on a fixed batch, with parameter gradients.

    Loss is the per-sample squared error summed over entries, averaged over
    the batch, so an all-zero predictor scores about the field size.
    """
    pred, caches = _forward_batch(params, x_t, t_frac)
    resid = pred - eps
    n = x_t.shape[0]
    loss = float((resid ** 2).sum()) / n
    grads_w, grads_b = _backward_batch(params, caches, 2.0 * resid / n)
    return loss, grads_w, grads_b


def epsilon_apply(params: TinyDenoiserParams, x_t: np.ndarray, t: int,
                  sched: NoiseSchedule) -> np.ndarray:
    """Deterministic forward pass on one field (channels, h, w)."""
    x_t = ensure_image_field(x_t, "x_t")
    if x_t.ndim != 3 or x_t.shape[0] != params.config.channels:
        raise DimensionError(
            f"x_t must be ({params.config.channels}, h, w), got {x_t.shape}")
    t = sched._check_t(t)
    out, _ = _forward_batch(params, x_t[None], np.array([t / sched.T]))
    return out[0]


class TinyDenoiser(EpsilonModel):
    def __init__(self, params: TinyDenoiserParams):
        self.params = params

    def predict(self, x_t, t, sched):
        return epsilon_apply(self.params, x_t, t, sched)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    arch: TinyDenoiserConfig = field(default_factory=TinyDenoiserConfig)
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 5e-3
    momentum: float = 0.9
    init_scale: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class TrainResult:
    params: TinyDenoiserParams
    epoch_losses: list[float]


def _as_dataset(dataset) -> np.ndarray:
    arr = np.asarray(dataset, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ParameterError(f"dataset must be a nonempty (n, channels, h, w) stack, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ParameterError("dataset contains NaN or Inf entries")
    return arr


def train_tiny_denoiser(dataset, sched: NoiseSchedule, config: TrainConfig,
                        rng: np.random.Generator,
                        init: TinyDenoiserParams | None = None) -> TrainResult:
    """Minibatch momentum-SGD on the Monte-Carlo denoising loss.

    Each step draws clean samples from the dataset, a uniform step index in
    1..T per sample, fresh Gaussian noise, forms the noisy latent with the
    closed-form marginal, and regresses the noise. Deterministic for a fixed
    (dataset order, rng, config). Returns the parameters and the per-epoch
    average loss trace.
    """
    data = _as_dataset(dataset)
    if data.shape[1] != config.arch.channels:
        raise ParameterError(
            f"dataset has {data.shape[1]} channels, architecture expects {config.arch.channels}")
    params = init.copy() if init is not None else init_tiny_denoiser(config.arch, rng, config.init_scale)
    if init is not None and init.config != config.arch:
        raise ParameterError("init params architecture does not match config.arch")

    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    n = data.shape[0]
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x0 = data[idx]
            t_idx = rng.integers(1, sched.T + 1, size=idx.size)
            eps = rng.standard_normal(x0.shape)
            a_bar = sched.alpha_bar[t_idx - 1][:, None, None, None]
            x_t = np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps
            loss, grads_w, grads_b = denoising_loss_and_grads(
                params, x_t, t_idx / sched.T, eps)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss became nonfinite at epoch {epoch}, batch offset {start} "
                    f"(lr={config.learning_rate}, batch_size={config.batch_size})")
            for w, v, g in zip(params.weights, vel_w, grads_w):
                v *= config.momentum
                v -= config.learning_rate * g
                w += v
            for b, v, g in zip(params.biases, vel_b, grads_b):
                v *= config.momentum
                v -= config.learning_rate * g
                b += v
            total += loss * idx.size
            count += idx.size
        epoch_losses.append(total / count)
    return TrainResult(params=params, epoch_losses=epoch_losses)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON preamble line + concatenated float32 arrays
# ---------------------------------------------------------------------------


def save_checkpoint(params: TinyDenoiserParams, path) -> None:
    arrays = []
    payload = b""
    for w, b in zip(params.weights, params.biases):
        for a in (w, b):
            arrays.append(list(a.shape))
            payload += np.ascontiguousarray(a, dtype="<f4").tobytes()
    preamble = {
        "format": CHECKPOINT_FORMAT,
        "arch": params.config.arch_dict(),
        "arch_hash": params.config.arch_hash(),
        "array_shapes": arrays,
        "created_unix": time.time(),
    }
    Path(path).write_bytes(json.dumps(preamble, sort_keys=True).encode("utf-8") + b"\n" + payload)


def load_checkpoint(path, expected: TinyDenoiserConfig | None = None) -> TinyDenoiserParams:
    """Read a checkpoint, verifying the stored architecture hash.

    ``expected`` additionally pins the architecture the caller is about to
    use; a mismatch raises instead of silently reshaping.
    """
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing preamble line")
    try:
        preamble = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt preamble ({exc})") from exc
    if preamble.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {preamble.get('format')!r}")
    try:
        config = TinyDenoiserConfig(channels=preamble["arch"]["channels"],
                                    hidden=tuple(preamble["arch"]["hidden"]),
                                    kernel_size=preamble["arch"]["kernel_size"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete architecture record") from exc
    if config.arch_hash() != preamble.get("arch_hash"):
        raise CheckpointError(f"{path}: architecture hash mismatch (corrupt or edited file)")
    if expected is not None and config != expected:
        raise CheckpointError(
            f"{path}: checkpoint architecture {config.arch_dict()} "
            f"does not match expected {expected.arch_dict()}")

    shapes = [tuple(s) for s in preamble["array_shapes"]]
    blob = data[nl + 1 :]
    need = sum(int(np.prod(s)) for s in shapes) * 4
    if len(blob) != need:
        raise CheckpointError(f"{path}: payload size mismatch ({len(blob)} != {need} bytes)")
    weights, biases = [], []
    pos = 0
    for i, shape in enumerate(shapes):
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[pos : pos + size], dtype="<f4").reshape(shape).astype(np.float64)
        pos += size
        (weights if i % 2 == 0 else biases).append(arr)
    k2 = config.kernel_size ** 2
    expected_shapes = [s for c_in, c_out in config.layer_widths() for s in ((c_out, c_in, k2), (c_out,))]
    if shapes != expected_shapes:
        raise CheckpointError(f"{path}: array shapes inconsistent with the stored architecture")
    return TinyDenoiserParams(config=config, weights=weights, biases=biases)
