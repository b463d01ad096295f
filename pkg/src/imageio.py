"""Binary PPM (P6) and PGM (P5) reading and writing through Pillow."""

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(OSError):
    """Raised when a file is not a readable 8-bit PPM/PGM image."""

    pass


def _atomic_save(path: str, image: Image.Image) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=target.parent, prefix=f".tmp_{target.stem}_")
    try:
        with os.fdopen(fd, "wb") as f:
            image.save(f, format="PPM")
        os.replace(temp_path, target)
    except OSError:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def _to_bytes(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ImageFormatError("pixel values must lie in [0, 1]")
    return np.rint(values * 255.0).astype(np.uint8)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` image with values in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"PPM needs shape (H, W, 3), got {image.shape}")
    _atomic_save(path, Image.fromarray(_to_bytes(image)))


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write an ``(H, W)`` image with values in [0, 1]."""
    if image.ndim != 2:
        raise ImageFormatError(f"PGM needs shape (H, W), got {image.shape}")
    _atomic_save(path, Image.fromarray(_to_bytes(image)))


def _read_netpbm(path: str, mode: str, kind: str) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.format != "PPM" or image.mode != mode:
                if image.format == "PPM" and image.mode in ("I", "I;16", "I;16B"):
                    raise ImageFormatError(
                        f"{path}: only 8-bit images are supported"
                    )
                raise ImageFormatError(
                    f"{path}: expected {kind} image, got {image.format} {image.mode}"
                )
            pixels = np.asarray(image, dtype=np.float64)
    except ImageFormatError:
        raise
    except OSError as e:
        raise ImageFormatError(f"Cannot read image {path}: {e}")
    return pixels / 255.0


def read_ppm(path: str) -> np.ndarray:
    return _read_netpbm(path, "RGB", "P6")


def read_pgm(path: str) -> np.ndarray:
    return _read_netpbm(path, "L", "P5")
