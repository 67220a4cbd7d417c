"""Binary (P5) PGM reading and writing."""
from pathlib import Path

import numpy as np


def write_pgm(path, array):
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError(f"{path}: PGM needs a 2-D array, got shape {a.shape}")
    if a.dtype != np.uint8:
        if a.min() < 0 or a.max() > 255:
            raise ValueError(f"{path}: values outside 0..255")
        a = a.astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()
