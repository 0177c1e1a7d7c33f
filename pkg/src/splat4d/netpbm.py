"""Binary netpbm images (P6/P5/P4) and raw typed grids with a small header.

Images are exchanged as float arrays in [0, 1] (quantized to maxval 255 on
write) or boolean masks (P4). Depth and instance-id grids use a raw format:
a 16-byte header (4-byte magic, u32 height, u32 width, u32 reserved, all
little-endian) followed by row-major payload, f32 or u16.
"""

import struct

import numpy as np

F32_MAGIC = b"GF32"
U16_MAGIC = b"GU16"
_GRID_HEADER = struct.Struct("<4sIII")


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def write_pgm(path, img, comment=None):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected (h, w) image, got {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n")
        if comment:
            f.write(b"# " + comment.encode("ascii") + b"\n")
        f.write(b"%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def write_pbm(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (h, w) mask, got {mask.shape}")
    h, w = mask.shape
    packed = np.packbits(mask.astype(bool), axis=1)
    with open(path, "wb") as f:
        f.write(b"P4\n%d %d\n" % (w, h))
        f.write(packed.tobytes())


def _read_tokens(f, n):
    """Read n whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < n:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated netpbm header")
        if ch == b"#":
            while ch not in (b"\n", b"\r", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        tok = ch
        while True:
            ch = f.read(1)
            if not ch or ch.isspace():
                break
            if ch == b"#":  # comment glued to a token ends it
                while ch not in (b"\n", b"\r", b""):
                    ch = f.read(1)
                break
            tok += ch
        tokens.append(tok)
    return tokens


def _read_exact(f, count, path):
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"{path}: truncated pixel data")
    return buf


def read_ppm(path):
    with open(path, "rb") as f:
        if f.read(2) != b"P6":
            raise ValueError(f"{path}: not a binary PPM (P6)")
        w, h, maxval = (int(t) for t in _read_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        buf = _read_exact(f, h * w * 3, path)
    img = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def read_pgm(path):
    with open(path, "rb") as f:
        if f.read(2) != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5)")
        w, h, maxval = (int(t) for t in _read_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        buf = _read_exact(f, h * w, path)
    img = np.frombuffer(buf, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / 255.0


def read_pbm(path):
    with open(path, "rb") as f:
        if f.read(2) != b"P4":
            raise ValueError(f"{path}: not a binary PBM (P4)")
        w, h = (int(t) for t in _read_tokens(f, 2))
        row_bytes = (w + 7) // 8
        buf = _read_exact(f, h * row_bytes, path)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8).reshape(h, row_bytes),
                         axis=1)
    return bits[:, :w].astype(bool)


def _write_grid(path, arr, magic, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-d grid, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(_GRID_HEADER.pack(magic, h, w, 0))
        f.write(arr.tobytes())


def _read_grid(path, magic, dtype):
    with open(path, "rb") as f:
        head = f.read(_GRID_HEADER.size)
        if len(head) != _GRID_HEADER.size:
            raise ValueError(f"{path}: truncated grid header")
        got_magic, h, w, _ = _GRID_HEADER.unpack(head)
        if got_magic != magic:
            raise ValueError(f"{path}: bad magic {got_magic!r}, want {magic!r}")
        itemsize = np.dtype(dtype).itemsize
        buf = _read_exact(f, h * w * itemsize, path)
    return np.frombuffer(buf, dtype=dtype).reshape(h, w).copy()


def write_f32_grid(path, arr):
    _write_grid(path, arr, F32_MAGIC, "<f4")


def read_f32_grid(path):
    return _read_grid(path, F32_MAGIC, "<f4").astype(np.float64)


def write_u16_grid(path, arr):
    arr = np.asarray(arr)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("values out of u16 range")
    _write_grid(path, arr, U16_MAGIC, "<u2")


def read_u16_grid(path):
    return _read_grid(path, U16_MAGIC, "<u2").astype(np.int64)
