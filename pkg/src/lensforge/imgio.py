"""Image file I/O: 8/16-bit PNG (via OpenCV) and portable float maps."""

from __future__ import annotations

import numpy as np


class ImageIOError(RuntimeError):
    pass


def read_png(path) -> tuple[np.ndarray, int]:
    """Read an 8- or 16-bit PNG as float RGB in [0, 1].

    Returns (image (H, W, 3), bit_depth)."""
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(f"could not read image {path}")
    if raw.dtype == np.uint8:
        depth, scale = 8, 255.0
    elif raw.dtype == np.uint16:
        depth, scale = 16, 65535.0
    else:
        raise ImageIOError(f"unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    rgb = raw[:, :, ::-1].astype(float) / scale
    return rgb, depth


def write_png(path, image: np.ndarray, bit_depth: int = 8) -> None:
    """Write float RGB in [0, 1] as an 8- or 16-bit PNG."""
    import cv2

    if bit_depth == 8:
        scaled = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        scaled = np.round(np.clip(image, 0, 1) * 65535.0).astype(np.uint16)
    else:
        raise ImageIOError(f"unsupported bit depth {bit_depth}")
    bgr = scaled[:, :, ::-1]
    if not cv2.imwrite(str(path), bgr):
        raise ImageIOError(f"could not write image {path}")


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel portable float map (little-endian 'Pf')."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ImageIOError("PFM writer expects a 2-D array")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        # PFM stores rows bottom-to-top.
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ImageIOError("not a grayscale PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(float)
