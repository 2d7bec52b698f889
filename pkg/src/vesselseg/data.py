"""Binary PNM image I/O and dataset loading.

Grayscale maps use P5, color images P6, both with maxval 255.  Parse
failures carry the byte offset of the offending input.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .tensor import FormatError

_WHITESPACE = (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C)


class PnmError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


def _next_token(data: bytes, pos: int):
    while pos < len(data):
        ch = data[pos]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == 0x23:
            while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                pos += 1
        else:
            break
    if pos >= len(data):
        raise PnmError("unexpected end of header", pos)
    start = pos
    while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != 0x23:
        pos += 1
    return data[start:pos], start, pos


def _int_token(data: bytes, pos: int, what: str):
    token, start, end = _next_token(data, pos)
    if not token.isdigit():
        raise PnmError(f"{what} must be a decimal integer, got {token!r}", start)
    return int(token), start, end


def _parse_pnm(data: bytes):
    """Returns (array, data_start) for a P5 or P6 byte string."""
    if len(data) < 2 or data[:1] != b"P":
        raise PnmError("not a PNM file", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    width, _, pos = _int_token(data, 2, "width")
    height, _, pos = _int_token(data, pos, "height")
    maxval, maxval_at, pos = _int_token(data, pos, "maxval")
    if width < 1 or height < 1:
        raise PnmError(f"bad dimensions {width}x{height}", maxval_at)
    if maxval != 255:
        raise PnmError(f"maxval must be 255, got {maxval}", maxval_at)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PnmError("expected single whitespace after maxval", pos)
    start = pos + 1
    need = width * height * channels
    have = len(data) - start
    if have < need:
        raise PnmError(f"expected {need} pixel bytes, found {have}", len(data))
    if have > need:
        raise PnmError("trailing bytes after pixel data", start + need)
    flat = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    if channels == 1:
        return flat.reshape(height, width).copy(), start
    return flat.reshape(height, width, 3).copy(), start


def read_pnm(path) -> np.ndarray:
    """(h,w) uint8 from P5, (h,w,3) uint8 from P6."""
    arr, _ = _parse_pnm(Path(path).read_bytes())
    return arr


def write_pnm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNM output must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def save_mask(path, mask: np.ndarray) -> None:
    """Binary {0,1} map written as a {0,255} grayscale image."""
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    write_pnm(path, (arr.astype(np.uint8)) * 255)


def save_prob(path, prob: np.ndarray) -> None:
    """Probability map in [0,1] quantized to 256 gray levels."""
    arr = np.asarray(prob, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    write_pnm(path, np.rint(arr * 255.0).astype(np.uint8))


@dataclass
class Dataset:
    names: List[str]
    images: List[np.ndarray]
    gts: List[np.ndarray]
    fovs: Optional[List[np.ndarray]]

    def __len__(self) -> int:
        return len(self.names)


def _load_label(path: Path) -> np.ndarray:
    data = path.read_bytes()
    arr, start = _parse_pnm(data)
    if arr.ndim != 2:
        raise PnmError(f"label {path.name} must be grayscale", 0)
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        index = int(np.argmax(bad.ravel()))
        raise PnmError(
            f"label {path.name} has value {int(arr.ravel()[index])}, "
            "expected 0 or 255", start + index)
    return (arr == 255).astype(np.uint8)


def load_dataset(root) -> Dataset:
    """Pairs images/<stem>.ppm with labels/<stem>.pgm, plus optional
    fovs/<stem>.pgm masks when that directory exists."""
    root = Path(root)
    img_dir = root / "images"
    lbl_dir = root / "labels"
    fov_dir = root / "fovs"
    if not img_dir.is_dir() or not lbl_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and labels/")
    stems = sorted(p.stem for p in img_dir.iterdir() if p.suffix == ".ppm")
    if not stems:
        raise FileNotFoundError(f"no .ppm images under {img_dir}")
    names, images, gts = [], [], []
    fovs = [] if fov_dir.is_dir() else None
    for stem in stems:
        image = read_pnm(img_dir / f"{stem}.ppm")
        if image.ndim != 3:
            raise PnmError(f"image {stem}.ppm must be color", 0)
        label_path = lbl_dir / f"{stem}.pgm"
        if not label_path.exists():
            raise FileNotFoundError(f"missing label {label_path}")
        gt = _load_label(label_path)
        if gt.shape != image.shape[:2]:
            raise ValueError(
                f"label {stem} shape {gt.shape} does not match image {image.shape[:2]}")
        if fovs is not None:
            fov_path = fov_dir / f"{stem}.pgm"
            if not fov_path.exists():
                raise FileNotFoundError(f"missing field-of-view mask {fov_path}")
            fovs.append(_load_label(fov_path).astype(bool))
        names.append(stem)
        images.append(image)
        gts.append(gt)
    return Dataset(names, images, gts, fovs)
