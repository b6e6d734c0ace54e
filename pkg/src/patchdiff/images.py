"""8-bit RGB image I/O and the canonical [-1, 1] value mapping."""

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DivisibilityError, ImageFormatError

__all__ = ["load_image", "save_image", "load_mask", "center_crop_to_multiple"]


def load_image(path) -> torch.Tensor:
    """Read an 8-bit RGB image to a float32 (3, H, W) tensor in [-1, 1].

    Pixel value 255 maps to 1.0 and 0 to -1.0.  Non-RGB modes (grayscale,
    palette, alpha, 16-bit) are rejected rather than silently converted.
    """
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode != "RGB":
                raise ImageFormatError(
                    f"{path}: mode {mode!r} unsupported; need 8-bit RGB"
                )
            arr = np.asarray(im, dtype=np.float32)
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: not a readable image ({e})") from None
    chw = np.transpose(arr / 127.5 - 1.0, (2, 0, 1))
    return torch.from_numpy(np.ascontiguousarray(chw))


def save_image(tensor: torch.Tensor, path) -> None:
    """Write a (3, H, W) tensor in [-1, 1] as PNG.

    Values are clamped, mapped back to [0, 255] and rounded half-to-even.
    """
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise ImageFormatError(
            f"expected a (3, H, W) tensor, got {tuple(tensor.shape)}"
        )
    arr = tensor.detach().cpu().numpy()
    arr = np.clip(arr, -1.0, 1.0)
    arr = np.rint((arr + 1.0) * 127.5).astype(np.uint8)
    Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path,
                                                                   format="PNG")


def load_mask(path) -> torch.Tensor:
    """Read a single-channel mask image to a float (H, W) tensor of 0s and 1s.

    Pixel 0 means "keep from the source", 255 means "generate"; other values
    are rejected so a resampled mask cannot silently blur the constraint.
    """
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ImageFormatError(
                    f"{path}: mask mode {im.mode!r} unsupported; need "
                    "single-channel 8-bit (L)"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: not a readable image ({e})") from None
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ImageFormatError(
            f"{path}: mask holds values other than 0/255 "
            f"(e.g. {int(arr[bad][0])})"
        )
    return torch.from_numpy((arr == 255).astype(np.float32))


def center_crop_to_multiple(image: torch.Tensor, divisor: int):
    """Center-crop each spatial side down to the nearest multiple of divisor.

    Returns (cropped, (top, left)); cropping rather than padding keeps the
    patch statistics of the original image intact.
    """
    if divisor < 1:
        raise DivisibilityError(f"divisor must be >= 1, got {divisor}")
    _, h, w = image.shape
    new_h = (h // divisor) * divisor
    new_w = (w // divisor) * divisor
    if new_h == 0 or new_w == 0:
        raise DivisibilityError(
            f"image {h}x{w} smaller than divisor {divisor}"
        )
    top = (h - new_h) // 2
    left = (w - new_w) // 2
    return image[:, top:top + new_h, left:left + new_w], (top, left)
