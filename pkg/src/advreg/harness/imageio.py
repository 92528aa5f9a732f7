"""Image exchange: 16-bit PGM with an affine-mapping sidecar, and plain CSV."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAXVAL = 65535


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".map.json")


def write_pgm(path, img) -> dict:
    """Write ``img`` as binary 16-bit PGM; the value range goes to a sidecar file.

    Values are mapped affinely from ``[lo, hi]`` onto ``[0, 65535]``; a
    constant image maps to 0 with ``hi == lo``.
    """
    path = Path(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("cannot write non-finite values")
    lo, hi = float(img.min()), float(img.max())
    scale = (hi - lo) / MAXVAL if hi > lo else 0.0
    q = np.zeros(img.shape) if scale == 0 else np.rint((img - lo) / scale)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())
    mapping = {"offset": lo, "scale": scale, "maxval": MAXVAL}
    _sidecar(path).write_text(json.dumps(mapping))
    return mapping


def _tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the data offset."""
    out, i = [], 0
    while len(out) < count:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        out.append(data[i:j].decode("ascii"))
        i = j
    return out, i + 1


def read_pgm(path, raw: bool = False) -> np.ndarray:
    """Read a binary PGM; undo the sidecar mapping unless ``raw`` or no sidecar exists."""
    path = Path(path)
    data = path.read_bytes()
    (magic, w, h, maxval), off = _tokens(data, 4)
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - off < n:
        raise ValueError(f"{path}: truncated pixel data")
    q = np.frombuffer(data[off : off + n], dtype=dtype).reshape(h, w).astype(np.float64)
    side = _sidecar(path)
    if raw or not side.exists():
        return q
    m = json.loads(side.read_text())
    return m["offset"] + m["scale"] * q


def write_csv_image(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"CSV images must be 2-D, got shape {img.shape}")
    np.savetxt(path, img, delimiter=",", fmt="%.17g")


def read_csv_image(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def save_image(stem, img) -> None:
    """Write ``stem.pgm`` (+ sidecar) and ``stem.csv``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(stem.with_suffix(".pgm"), img)
    write_csv_image(stem.with_suffix(".csv"), img)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path)
    if path.suffix == ".csv":
        return read_csv_image(path)
    if path.suffix == ".npy":
        return np.load(path)
    raise ValueError(f"unsupported image format {path.suffix!r}")


def save_stack(path, images) -> None:
    """Many images at once, as one ``.npy`` array."""
    np.save(path, np.asarray(images, dtype=np.float64))


def load_stack(path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        # save_image writes each image twice; the lossless CSV copy wins
        files = sorted(p for p in path.iterdir() if p.suffix == ".csv")
        files = files or sorted(p for p in path.iterdir() if p.suffix == ".pgm")
        if not files:
            raise ValueError(f"no images in {path}")
        return np.stack([load_image(p) for p in files])
    arr = np.load(path) if path.suffix == ".npy" else load_image(path)[None]
    return np.asarray(arr, dtype=np.float64)
