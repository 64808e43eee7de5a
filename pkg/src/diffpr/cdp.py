"""Coded-diffraction-pattern forward operator, noise synthesis, and data fidelity.

The measurement map applies one or more unit-modulus phase masks to the image
plane and Fourier-transforms each masked copy; with the unitary FFT every
mask block is an isometry, so ||A x||^2 = L ||x||^2 for L masks. Color
channels share the mask set and are measured independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, ParameterError
from .fields import (
    ensure_image_field,
    fft2_unitary,
    ifft2_unitary,
    is_power_of_two,
    read_array,
    write_array,
)

UNIT_MODULUS_TOL = 1e-12


@dataclass(frozen=True)
class CdpOperator:
    """Measurement operator: block l maps x to fft2_unitary(masks[l] * x)."""

    masks: np.ndarray  # (num_masks, height, width), unit-modulus complex

    def __post_init__(self):
        masks = np.ascontiguousarray(self.masks, dtype=np.complex128)
        if masks.ndim != 3 or masks.shape[0] < 1:
            raise DimensionError(f"masks must be (L, h, w) with L >= 1, got {masks.shape}")
        _, h, w = masks.shape
        if not (is_power_of_two(h) and is_power_of_two(w)):
            raise DimensionError(f"mask plane must be power-of-two sized, got {h}x{w}")
        if np.abs(np.abs(masks) - 1.0).max() > UNIT_MODULUS_TOL:
            raise ParameterError("mask entries must have unit modulus")
        masks.flags.writeable = False
        object.__setattr__(self, "masks", masks)

    @property
    def num_masks(self) -> int:
        return self.masks.shape[0]

    @property
    def plane_shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def _check_input(self, x) -> np.ndarray:
        x = ensure_image_field(x, "x")
        if x.ndim != 3 or x.shape[1:] != self.plane_shape:
            raise DimensionError(
                f"x must be (channels, {self.plane_shape[0]}, {self.plane_shape[1]}), got {x.shape}")
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward map; returns complex blocks of shape (L, channels, h, w)."""
        x = self._check_input(x)
        return fft2_unitary(self.masks[:, None, :, :] * x[None, :, :, :])

    def amplitudes(self, x: np.ndarray) -> np.ndarray:
        """Element-wise moduli |A x|, one block per mask."""
        return np.abs(self.apply(x))

    def adjoint(self, blocks: np.ndarray) -> np.ndarray:
        """Conjugate-transpose map, summed over mask blocks (complex output)."""
        blocks = np.asarray(blocks, dtype=np.complex128)
        if blocks.ndim != 4 or blocks.shape[0] != self.num_masks or blocks.shape[2:] != self.plane_shape:
            raise DimensionError(
                f"blocks must be ({self.num_masks}, channels, {self.plane_shape[0]}, "
                f"{self.plane_shape[1]}), got {blocks.shape}")
        return (np.conj(self.masks)[:, None, :, :] * ifft2_unitary(blocks)).sum(axis=0)

    def fidelity(self, y, x: np.ndarray) -> float:
        """Least-squares amplitude mismatch: 0.5 * sum((y - |A x|)^2)."""
        y = amplitude_blocks(y)
        amps = self.amplitudes(x)
        if y.shape != amps.shape:
            raise DimensionError(f"y shape {y.shape} != measurement shape {amps.shape}")
        return 0.5 * float(((y - amps) ** 2).sum())

    def subgradient(self, y, x: np.ndarray) -> np.ndarray:
        """A subgradient of :meth:`fidelity` at x.

        Computes Re[A^H (A x - y * sgn(A x))] with sgn(z) = z/|z| and
        sgn(0) = 0; the real part is taken because x is real. Matches central
        finite differences of fidelity() wherever |A x| is bounded away from
        zero, and vanishes exactly at consistent measurements y = |A x|.
        """
        y = amplitude_blocks(y)
        z = self.apply(x)
        if y.shape != z.shape:
            raise DimensionError(f"y shape {y.shape} != measurement shape {z.shape}")
        mod = np.abs(z)
        sgn = np.divide(z, mod, out=np.zeros_like(z), where=mod > 0)
        return self.adjoint(z - y * sgn).real


@dataclass(frozen=True)
class MeasurementSet:
    """Measured amplitudes, one block per mask, plus the noise metadata.

    ``y`` is stored exactly as synthesized: AWGN can push entries negative and
    they are kept unclipped (the fidelity term handles them as-is).
    ``input_snr_db`` is None for noiseless measurements.
    """

    y: np.ndarray  # (num_masks, channels, height, width)
    input_snr_db: float | None = None
    noise_seed: int | None = None

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if y.ndim != 4:
            raise DimensionError(f"y must be (L, channels, h, w), got shape {y.shape}")
        if not np.isfinite(y).all():
            raise ParameterError("y contains NaN or Inf entries")
        y.flags.writeable = False
        object.__setattr__(self, "y", y)

    @property
    def num_masks(self) -> int:
        return self.y.shape[0]


def amplitude_blocks(y) -> np.ndarray:
    """Coerce a MeasurementSet or bare array to its amplitude-block array."""
    if isinstance(y, MeasurementSet):
        return y.y
    return np.asarray(y, dtype=np.float64)


def make_phase_masks(plane_shape: tuple[int, int], num_masks: int,
                     rng: np.random.Generator) -> np.ndarray:
    """I.i.d. masks with entries exp(i*phi), phi uniform on [0, 2*pi)."""
    if num_masks < 1:
        raise ParameterError(f"num_masks must be >= 1, got {num_masks}")
    h, w = plane_shape
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"mask plane must be power-of-two sized, got {h}x{w}")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(num_masks, h, w))
    return np.exp(1j * phases)


def make_cdp_operator(plane_shape: tuple[int, int], num_masks: int,
                      rng: np.random.Generator) -> CdpOperator:
    return CdpOperator(masks=make_phase_masks(plane_shape, num_masks, rng))


def add_noise_at_snr(clean: np.ndarray, input_snr_db: float | None,
                     rng: np.random.Generator, noise_seed: int | None = None) -> MeasurementSet:
    """Corrupt clean amplitude blocks with AWGN calibrated to an input SNR.

    The noise scale is sigma = ||clean|| / (sqrt(m) * 10^(snr/20)) with m the
    total measurement count, so the expected noise norm realizes the requested
    20*log10(||clean|| / ||e||). ``input_snr_db=None`` (or +inf) returns the
    clean amplitudes unchanged.
    """
    clean = np.ascontiguousarray(clean, dtype=np.float64)
    if clean.ndim != 4:
        raise DimensionError(f"clean blocks must be (L, channels, h, w), got {clean.shape}")
    if input_snr_db is None or np.isinf(input_snr_db):
        return MeasurementSet(y=clean.copy(), input_snr_db=None, noise_seed=noise_seed)
    clean_norm = float(np.linalg.norm(clean))
    if clean_norm == 0.0:
        raise ParameterError("cannot calibrate noise to a finite SNR on all-zero measurements")
    sigma = clean_norm / (np.sqrt(clean.size) * 10.0 ** (input_snr_db / 20.0))
    e = sigma * rng.standard_normal(clean.shape)
    return MeasurementSet(y=clean + e, input_snr_db=float(input_snr_db), noise_seed=noise_seed)


def realized_snr_db(clean: np.ndarray, noisy) -> float:
    """20*log10(||clean|| / ||noisy - clean||); +inf when the noise is zero."""
    noisy = amplitude_blocks(noisy)
    err = float(np.linalg.norm(noisy - clean))
    if err == 0.0:
        return float("inf")
    return 20.0 * float(np.log10(np.linalg.norm(clean) / err))


def save_masks(op: CdpOperator, path) -> None:
    """Serialize masks to the complex raw array format (block index as channel)."""
    write_array(op.masks, path)


def load_masks(path) -> np.ndarray:
    """Read masks back and reproject onto the unit circle.

    The float32 round trip perturbs moduli by ~1e-7, so the stored phases are
    kept and the modulus is renormalized to satisfy the operator invariant.
    """
    masks = read_array(path)
    mod = np.abs(masks)
    if mod.min() <= 0.0:
        raise ParameterError(f"{path}: zero entry cannot be a phase mask value")
    return masks / mod
