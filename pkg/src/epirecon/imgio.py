"""Binary PPM/PGM/PFM readers and writers for bundle and render output.

PFM is written grayscale, little-endian (scale -1.0), rows bottom-to-top
per the Netpbm convention. PPM/PGM are the 8-bit binary variants.
"""

import numpy as np


def write_ppm(path, image):
    """Write an [H, W, 3] float image in [0, 1] as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm: expected [H, W, 3], got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic, dims, maxval, data = _read_netpbm(fh, path)
    if magic != b"P6":
        raise ValueError(f"{path}: expected P6, got {magic.decode(errors='replace')}")
    w, h = dims
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def write_pgm(path, mask):
    """Write a boolean [H, W] mask as binary P5 (255 = true)."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"write_pgm: expected [H, W], got {m.shape}")
    data = np.where(m.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic, dims, maxval, data = _read_netpbm(fh, path)
    if magic != b"P5":
        raise ValueError(f"{path}: expected P5, got {magic.decode(errors='replace')}")
    w, h = dims
    img = np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)
    return img > 127


def _read_netpbm(fh, path):
    magic = fh.read(2)
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError(f"{path}: truncated netpbm header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    w, h, maxval = fields[:3]
    return magic, (w, h), maxval, fh.read()


def write_pfm(path, data):
    """Write an [H, W] float map as grayscale little-endian PFM."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"write_pfm: expected [H, W], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode())
        fh.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"{path}: expected grayscale PFM magic 'Pf', got {magic!r}")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        raw = fh.read(w * h * 4)
    if len(raw) != w * h * 4:
        raise ValueError(f"{path}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float64)
