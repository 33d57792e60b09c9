"""Evaluation-time image preprocessing, including padded receptive-field
calibration, plus binary PPM (P6) ingestion.

The pipeline has two routes keyed on the crop ratio:

* ratio <= 1: the classic recipe -- resize the shorter side to
  ``round(S / ratio)`` and take the central S x S crop;
* ratio > 1: downscale so the content occupies ``round(S / ratio)`` pixels
  and zero-pad symmetrically up to S x S, keeping the content centred so
  nothing is cropped away.

Rounding is round-half-up; odd crop remainders split floor-left/ceil-right
and odd padding splits floor-before/ceil-after.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from . import rvt


@dataclass
class EvalPipelineConfig:
    test_size: int
    ratio: float = 1.0
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.test_size <= 0:
            raise ConfigError(f"test_size must be positive, got {self.test_size}")
        if self.ratio <= 0:
            raise ConfigError(f"ratio must be positive, got {self.ratio}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resampling with half-pixel centre alignment."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeMismatchError(f"expected [C, h, w], got {img.shape}")
    c, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out.astype(img.dtype, copy=False)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Central size x size crop; odd remainders leave the extra pixel on the
    right/bottom."""
    c, h, w = img.shape
    if h < size or w < size:
        raise ConfigError(f"cannot crop {size}x{size} from {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[:, top : top + size, left : left + size].copy()


def _resize_shorter(img: np.ndarray, target: int) -> np.ndarray:
    c, h, w = img.shape
    if h <= w:
        return bilinear_resize(img, target, _round_half_up(w * target / h))
    return bilinear_resize(img, _round_half_up(h * target / w), target)


def rfc_geometry(size: int, ratio: float) -> tuple[int, int, int]:
    """(content side, pad before, pad after) for a padded evaluation frame."""
    content = _round_half_up(size / ratio)
    total = size - content
    return content, total // 2, total - total // 2


def rfc_pad(img: np.ndarray, size: int, ratio: float) -> np.ndarray:
    """Downscale and centre the content on a zero canvas of size x size."""
    if ratio <= 1.0:
        raise ConfigError(f"padded calibration needs ratio > 1, got {ratio}")
    content, before, _after = rfc_geometry(size, ratio)
    small = center_crop(_resize_shorter(img, content), content)
    canvas = np.zeros((img.shape[0], size, size), dtype=small.dtype)
    canvas[:, before : before + content, before : before + content] = small
    return canvas


def eval_preprocess(img: np.ndarray, cfg: EvalPipelineConfig) -> np.ndarray:
    """Resize/crop or pad to the test size, then normalise per channel."""
    img = np.asarray(img, dtype=np.float32)
    if cfg.ratio > 1.0:
        out = rfc_pad(img, cfg.test_size, cfg.ratio)
    else:
        resized = _resize_shorter(img, _round_half_up(cfg.test_size / cfg.ratio))
        out = center_crop(resized, cfg.test_size)
    mean = np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float32)[:, None, None]
    return (out - mean) / std


# ---------------------------------------------------------------------------
# binary PPM (P6)


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 file into float32 [3, h, w] scaled to [0, 1].

    The header grammar is strict: ``P6``, whitespace, width, height, then a
    maxval that must be 255, then a single whitespace byte before the pixel
    payload.
    """
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise ConfigError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ConfigError(f"{path}: malformed PPM header")
        fields.append(int(raw[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ConfigError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header and payload
    expected = width * height * 3
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise ConfigError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write float [3, h, w] values in [0, 1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeMismatchError(f"expected [3, h, w], got {img.shape}")
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + u8.transpose(1, 2, 0).tobytes())


def load_image(path: str | Path) -> np.ndarray:
    """Read .ppm or .rvt image files into float32 [3, h, w]."""
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    if path.suffix == ".rvt":
        arr = rvt.read_rvt(path).astype(np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeMismatchError(f"{path}: expected [3, h, w], got {arr.shape}")
        return arr
    raise ConfigError(f"{path}: unsupported image format (use .ppm or .rvt)")
