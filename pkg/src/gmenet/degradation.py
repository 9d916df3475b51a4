"""Bicubic resampling and Gaussian blur on HxW or HxWxC pixel arrays."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError

__all__ = [
    "DegradationSpec",
    "cubic_kernel",
    "resize_weights",
    "bicubic_resize",
    "gaussian_kernel",
    "gaussian_blur",
    "prepare_student_input",
    "prepare_teacher_input",
    "to_tensor",
]

Size = Union[int, Sequence[int]]
PIXEL_RANGE = (0.0, 255.0)


def _pair(size: Size) -> tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    h, w = size
    return int(h), int(w)


@dataclass
class DegradationSpec:
    target_size: int = 14
    blur_sigma: float = 1.0
    blur_kernel: int = 3
    scale_method: str = "bicubic"
    antialias: bool = True

    def validate(self) -> None:
        if self.scale_method != "bicubic":
            raise ConfigurationError(f"only bicubic scaling is supported, got {self.scale_method!r}")
        if min(_pair(self.target_size)) < 1:
            raise ConfigurationError(f"target_size must be >= 1, got {self.target_size}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigurationError(f"blur_kernel must be a positive odd integer, got {self.blur_kernel}")
        if self.blur_sigma < 0:
            raise ConfigurationError(f"blur_sigma must be >= 0, got {self.blur_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """(out_len, in_len) resampling matrix with pixel-centre alignment.

    On downscaling with ``antialias`` the kernel is stretched by the scale
    factor (as MATLAB ``imresize`` and Pillow do). Out-of-range taps are
    dropped at the border and each row is renormalised to sum to 1.
    """
    scale = out_len / in_len
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centres = (np.arange(out_len) + 0.5) / scale - 0.5
    w = cubic_kernel((centres[:, None] - np.arange(in_len)[None, :]) / stretch)
    return w / w.sum(axis=1, keepdims=True)


def _check_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.size == 0 or min(arr.shape[:2]) < 1:
        raise ValidationError(f"expected a non-empty HxW or HxWxC image, got shape {arr.shape}")
    return arr


def _finish(out: np.ndarray, like: np.ndarray, value_range) -> np.ndarray:
    out = np.clip(out, *value_range)
    if np.issubdtype(like.dtype, np.integer):
        return np.rint(out).astype(like.dtype)
    return out


def bicubic_resize(
    image: np.ndarray,
    target: Size,
    antialias: bool = True,
    value_range: tuple[float, float] = PIXEL_RANGE,
) -> np.ndarray:
    """Resize each channel independently; integer inputs come back rounded to their dtype."""
    arr = _check_image(image)
    th, tw = _pair(target)
    if th < 1 or tw < 1:
        raise ValidationError(f"target size must be positive, got {(th, tw)}")
    h, w = arr.shape[:2]
    x = arr.astype(np.float64)
    if (th, tw) != (h, w):
        wh = resize_weights(h, th, antialias)
        ww = resize_weights(w, tw, antialias)
        if x.ndim == 2:
            x = wh @ x @ ww.T
        else:
            x = np.einsum("oh,hwc,pw->opc", wh, x, ww)
    return _finish(x, arr, value_range)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian; sigma == 0 gives a centred delta."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {size}")
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    k = np.zeros(size)
    if sigma == 0:
        k[size // 2] = 1.0
        return k
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(
    image: np.ndarray,
    kernel_size: int = 3,
    sigma: float = 1.0,
    value_range: tuple[float, float] = PIXEL_RANGE,
) -> np.ndarray:
    """Separable Gaussian blur with reflected borders."""
    arr = _check_image(image)
    k = gaussian_kernel(kernel_size, sigma)
    r = kernel_size // 2
    x = arr.astype(np.float64)
    if sigma > 0 and r > 0:
        pad = [(r, r), (r, r)] + [(0, 0)] * (x.ndim - 2)
        p = np.pad(x, pad, mode="symmetric")
        h, w = x.shape[:2]
        x = sum(k[i] * p[i:i + h] for i in range(kernel_size))
        x = sum(k[i] * x[:, i:i + w] for i in range(kernel_size))
    return _finish(x, arr, value_range)


def to_tensor(
    image: np.ndarray,
    normalization: Optional[dict] = None,
    dtype: Optional[torch.dtype] = None,
) -> torch.Tensor:
    """HxWxC pixels in [0, 255] -> (C, H, W) tensor in [0, 1], optionally standardised."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr = arr.transpose(2, 0, 1) / 255.0
    if normalization is not None:
        mean = np.asarray(normalization["mean"], dtype=np.float64)[:, None, None]
        std = np.asarray(normalization["std"], dtype=np.float64)[:, None, None]
        arr = (arr - mean) / std
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype or torch.get_default_dtype())


def prepare_student_input(
    lr_image: np.ndarray,
    network_input_size: Size,
    spec: DegradationSpec,
    normalization: Optional[dict] = None,
    as_tensor: bool = True,
):
    """Bicubic upscale to the network input size, then Gaussian blur.

    With ``as_tensor=False`` returns the float pixel array before scaling
    to [0, 1] and normalisation.
    """
    spec.validate()
    up = bicubic_resize(np.asarray(lr_image, dtype=np.float64), network_input_size, spec.antialias)
    out = gaussian_blur(up, spec.blur_kernel, spec.blur_sigma)
    if not as_tensor:
        return out
    return to_tensor(out, normalization)


def prepare_teacher_input(
    hr_image: np.ndarray,
    network_input_size: Size,
    normalization: Optional[dict] = None,
    as_tensor: bool = True,
):
    arr = np.asarray(hr_image, dtype=np.float64)
    if arr.shape[:2] != _pair(network_input_size):
        arr = bicubic_resize(arr, network_input_size)
    if not as_tensor:
        return arr
    return to_tensor(arr, normalization)
