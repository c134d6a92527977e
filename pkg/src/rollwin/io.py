"""Binary record formats and CSV helpers.

All binary formats are little-endian with an ASCII magic prefix:

  RWCOND1  conditioning features   header: cond_dim u32, count u64
  RWFRM1   latent frames           header: latent_dim u32, count u64
  RWODE1   trajectory pairs        header: latent_dim u32, cond_dim u32,
                                   rec_frames u32, count u64; each record is
                                   clip_id u64, t f64, x_t, x0_ode, cond
  RWCKPT1  parameter checkpoint    version u32, config text blob, then a
                                   section table of named f64 matrices

Payloads are 64-bit floats; round-trips are bit-exact.  CSV floats are
written with repr() (shortest round-trip form) so reruns are byte-stable.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COND_MAGIC = b"RWCOND1"
FRAME_MAGIC = b"RWFRM1"
PAIR_MAGIC = b"RWODE1"
CKPT_MAGIC = b"RWCKPT1"


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _expect_magic(fh, magic: bytes, path) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")


def _matrix_bytes(mat: np.ndarray) -> bytes:
    return np.ascontiguousarray(mat, dtype="<f8").tobytes()


def _read_matrix(fh, rows: int, cols: int) -> np.ndarray:
    data = _read_exact(fh, rows * cols * 8)
    return np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)


# ---------------------------------------------------------------------------
# Conditioning features and latent frames (same layout, different magic)
# ---------------------------------------------------------------------------


def _write_mat_file(path, magic: bytes, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D array, got ndim={mat.ndim}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", mat.shape[1], mat.shape[0]))
        fh.write(_matrix_bytes(mat))


def _read_mat_file(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        _expect_magic(fh, magic, path)
        width, count = struct.unpack("<IQ", _read_exact(fh, 12))
        return _read_matrix(fh, count, width)


def write_cond(path, features: np.ndarray) -> None:
    _write_mat_file(path, COND_MAGIC, features)


def read_cond(path) -> np.ndarray:
    return _read_mat_file(path, COND_MAGIC)


def write_frames(path, frames: np.ndarray) -> None:
    _write_mat_file(path, FRAME_MAGIC, frames)


def read_frames(path) -> np.ndarray:
    return _read_mat_file(path, FRAME_MAGIC)


# ---------------------------------------------------------------------------
# Trajectory pairs
# ---------------------------------------------------------------------------


def write_pairs(path, records: Sequence[tuple[int, float, np.ndarray, np.ndarray, np.ndarray]]) -> None:
    """records: (clip_id, t, x_t, x0_ode, cond); all records share shapes."""
    if not records:
        raise ValueError("refusing to write an empty pair file")
    _, _, x_t0, _, cond0 = records[0]
    rec_frames, latent_dim = x_t0.shape
    cond_dim = cond0.shape[1]
    with open(path, "wb") as fh:
        fh.write(PAIR_MAGIC)
        fh.write(struct.pack("<IIIQ", latent_dim, cond_dim, rec_frames, len(records)))
        for clip_id, t, x_t, x0_ode, cond in records:
            if x_t.shape != (rec_frames, latent_dim) or x0_ode.shape != (rec_frames, latent_dim):
                raise ValueError("inconsistent latent shapes across pair records")
            if cond.shape != (rec_frames, cond_dim):
                raise ValueError("inconsistent cond shapes across pair records")
            fh.write(struct.pack("<Qd", clip_id, t))
            fh.write(_matrix_bytes(x_t))
            fh.write(_matrix_bytes(x0_ode))
            fh.write(_matrix_bytes(cond))


def read_pairs(path) -> list[tuple[int, float, np.ndarray, np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        _expect_magic(fh, PAIR_MAGIC, path)
        latent_dim, cond_dim, rec_frames, count = struct.unpack("<IIIQ", _read_exact(fh, 20))
        out = []
        for _ in range(count):
            clip_id, t = struct.unpack("<Qd", _read_exact(fh, 16))
            x_t = _read_matrix(fh, rec_frames, latent_dim)
            x0_ode = _read_matrix(fh, rec_frames, latent_dim)
            cond = _read_matrix(fh, rec_frames, cond_dim)
            out.append((clip_id, t, x_t, x0_ode, cond))
        return out


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, config_text: str, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    blob = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, mat in tensors:
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim == 1:
                mat = mat.reshape(1, -1)
            if mat.ndim != 2:
                raise ValueError(f"tensor {name!r} must be 1-D or 2-D")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
            fh.write(_matrix_bytes(mat))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        _expect_magic(fh, CKPT_MAGIC, path)
        version, blob_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config_text = _read_exact(fh, blob_len).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            rows, cols = struct.unpack("<QQ", _read_exact(fh, 16))
            tensors[name] = _read_matrix(fh, rows, cols)
        return config_text, tensors


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]
