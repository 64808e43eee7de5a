"""Core grid types, unitary FFTs, seeded RNG streams, and file I/O.

Images and latents are plain numpy arrays of shape (channels, height, width):
float64 for real fields, complex128 for complex fields. A C-contiguous array
in that shape is exactly the row-major channel-planar layout used by the raw
array file format. Operators that only act along the trailing two axes accept
extra leading axes, which lets Monte-Carlo tests batch trials as channels.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionError, FormatError, ParameterError

RAW_REAL_MAGIC = b"DFLD"
RAW_COMPLEX_MAGIC = b"CFLD"


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_grid_dims(shape: tuple[int, ...]) -> None:
    if len(shape) < 2:
        raise DimensionError(f"expected at least 2 axes (height, width), got shape {shape}")
    h, w = shape[-2], shape[-1]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise DimensionError(f"grid dimensions must be powers of two, got {h}x{w}")


def ensure_image_field(x, name: str = "field") -> np.ndarray:
    """Validate and return a real field as a C-contiguous float64 array.

    Accepts (channels, height, width) or batched (..., height, width) arrays;
    rejects complex data and nonfinite entries.
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim < 2:
        raise DimensionError(f"{name}: expected at least 2 axes, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ParameterError(f"{name}: contains NaN or Inf entries")
    return arr


def ensure_complex_field(x, name: str = "field") -> np.ndarray:
    """Validate and return a complex field as a C-contiguous complex128 array."""
    arr = np.ascontiguousarray(x, dtype=np.complex128)
    if arr.ndim < 2:
        raise DimensionError(f"{name}: expected at least 2 axes, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ParameterError(f"{name}: contains NaN or Inf entries")
    return arr


# ---------------------------------------------------------------------------
# Unitary FFT
# ---------------------------------------------------------------------------


def fft2_unitary(f: np.ndarray) -> np.ndarray:
    """2-D DFT over the trailing (height, width) axes with 1/sqrt(h*w) scaling.

    Unitary normalization makes the transform an isometry, so norms and inner
    products are preserved and the inverse equals the adjoint. Grid dimensions
    are restricted to powers of two.
    """
    f = np.asarray(f)
    _check_grid_dims(f.shape)
    return np.fft.fft2(f, axes=(-2, -1), norm="ortho")


def ifft2_unitary(f: np.ndarray) -> np.ndarray:
    """Exact inverse (and adjoint) of :func:`fft2_unitary`."""
    f = np.asarray(f)
    _check_grid_dims(f.shape)
    return np.fft.ifft2(f, axes=(-2, -1), norm="ortho")


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ParameterError(f"rng tag must be nonnegative, got {tag}")
        return int(tag)
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")
    raise ParameterError(f"rng tag must be int or str, got {type(tag).__name__}")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical seed gives a bit-identical stream."""
    if seed < 0:
        raise ParameterError(f"seed must be nonnegative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def substream(seed: int, *tags) -> np.random.Generator:
    """Derive an independent, reproducible stream from (master seed, tags).

    Tags may be ints or strings; the same (seed, tags) tuple always yields the
    same stream, and distinct tags yield statistically independent streams.
    """
    if seed < 0:
        raise ParameterError(f"seed must be nonnegative, got {seed}")
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_standard_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. standard normal field of the given shape, advancing ``rng``."""
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# Image files (PNG via Pillow, binary PGM/PPM by hand)
# ---------------------------------------------------------------------------

_PNM_MAGIC = {1: b"P5", 3: b"P6"}


def quantize_to_bytes(field: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint8 (1.0 maps to byte 255)."""
    arr = ensure_image_field(field)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(field: np.ndarray, path) -> None:
    """Write a (channels, height, width) field as an 8-bit PNG/PGM/PPM file."""
    path = Path(path)
    arr = quantize_to_bytes(field)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionError(f"image must have shape (1|3, h, w), got {arr.shape}")
    c, h, w = arr.shape
    suffix = path.suffix.lower()
    if suffix == ".png":
        planes = np.moveaxis(arr, 0, -1)  # (h, w, c) for Pillow
        img = Image.fromarray(planes[:, :, 0], mode="L") if c == 1 else Image.fromarray(planes, mode="RGB")
        img.save(path, format="PNG")
    elif suffix in (".pgm", ".ppm"):
        if (suffix == ".pgm") != (c == 1):
            raise FormatError(f"{path.name}: .pgm needs 1 channel, .ppm needs 3, got {c}")
        header = _PNM_MAGIC[c] + f"\n{w} {h}\n255\n".encode("ascii")
        pixels = np.moveaxis(arr, 0, -1)  # interleaved per pixel, row-major
        path.write_bytes(header + pixels.tobytes())
    else:
        raise FormatError(f"unsupported image format: {path.suffix!r}")


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PGM/PPM into a (channels, height, width) field in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        try:
            img = Image.open(path)
            img.load()
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise FormatError(f"{path}: not a readable PNG ({exc})") from exc
        if img.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: unsupported PNG mode {img.mode!r}, expected 8-bit L or RGB")
        arr = np.asarray(img, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.moveaxis(arr, -1, 0)
        return np.ascontiguousarray(arr)
    if suffix in (".pgm", ".ppm"):
        return _read_pnm(path)
    raise FormatError(f"unsupported image format: {path.suffix!r}")


def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    magic = data[:2]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise FormatError(f"{path}: bad PNM magic {magic!r}")

    # Header tokens: width, height, maxval; '#' starts a comment to end of line.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PNM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            try:
                tokens.append(int(data[start:pos]))
            except ValueError:
                raise FormatError(f"{path}: bad PNM header token {data[start:pos]!r}")
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    n = w * h * channels
    raw = data[pos : pos + n]
    if len(raw) != n:
        raise FormatError(f"{path}: truncated PNM payload ({len(raw)} of {n} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0).astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# Raw array files (DFLD real / CFLD complex)
# ---------------------------------------------------------------------------


def write_array(arr: np.ndarray, path) -> None:
    """Dump a 3-D (channels, height, width) array to the raw binary format.

    Layout: 16-byte header (magic, u32 height, u32 width, u32 channels, all
    little-endian) followed by the payload in row-major channel-planar order.
    Real arrays store float32 ("DFLD"); complex arrays store interleaved
    (re, im) float32 pairs ("CFLD").
    """
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise DimensionError(f"raw array files are 3-D (c, h, w), got shape {arr.shape}")
    c, h, w = arr.shape
    if np.iscomplexobj(arr):
        magic, payload = RAW_COMPLEX_MAGIC, np.ascontiguousarray(arr, dtype="<c8")
    else:
        magic, payload = RAW_REAL_MAGIC, np.ascontiguousarray(arr, dtype="<f4")
    header = magic + np.array([h, w, c], dtype="<u4").tobytes()
    Path(path).write_bytes(header + payload.tobytes())


def read_array(path) -> np.ndarray:
    """Read a raw array file back as float64 (DFLD) or complex128 (CFLD)."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: file shorter than the 16-byte header")
    magic = data[:4]
    if magic not in (RAW_REAL_MAGIC, RAW_COMPLEX_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r}")
    h, w, c = (int(v) for v in np.frombuffer(data[4:16], dtype="<u4"))
    itemsize = 8 if magic == RAW_COMPLEX_MAGIC else 4
    n = h * w * c
    if len(data) != 16 + n * itemsize:
        raise FormatError(f"{path}: payload size mismatch (header says {n} values)")
    dtype = "<c8" if magic == RAW_COMPLEX_MAGIC else "<f4"
    arr = np.frombuffer(data[16:], dtype=dtype).reshape(c, h, w)
    out_dtype = np.complex128 if magic == RAW_COMPLEX_MAGIC else np.float64
    return np.ascontiguousarray(arr, dtype=out_dtype)
