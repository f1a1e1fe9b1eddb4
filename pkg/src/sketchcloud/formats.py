"""On-disk formats: PGM sketches, ASCII PLY clouds, binary density maps,
binary checkpoints with CRC, JSON manifests, and the loss-history CSV.

All writers are deterministic byte-for-byte given identical inputs.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"SKSM"
CHECKPOINT_VERSION = 1
DMAP_MAGIC = b"DMAP"
DMAP_SUM_TOL = 1e-5


class FormatError(ValueError):
    """Raised when a file does not parse or fails validation."""


# ---------------------------------------------------------------------------
# PGM (P5) sketch images; 255 = stroke


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"sketch image must be 2-d, got shape {img.shape}")
    data = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM file")
    # header = magic, width, height, maxval tokens; '#' starts a comment line
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, got {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# ASCII PLY point clouds


def write_ply(path, cloud: np.ndarray) -> None:
    cloud = np.asarray(cloud, dtype=np.float32)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise FormatError(f"cloud must be (N, 3), got {cloud.shape}")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for x, y, z in cloud:
        lines.append(f"{x:.9g} {y:.9g} {z:.9g}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def load_ply(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["end_header"]:
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise FormatError(f"{path}: malformed PLY header")
    rows = lines[body_at : body_at + n]
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    out = np.empty((n, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        vals = row.split()
        if len(vals) != 3:
            raise FormatError(f"{path}: bad vertex line {i}: {row!r}")
        out[i] = [float(v) for v in vals]
    return out


# ---------------------------------------------------------------------------
# binary density maps


def write_dmap(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise FormatError(f"density map must be 2-d, got {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(values.astype("<f4").tobytes())


def load_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DMAP_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack("<II", raw[4:12])
    expect = 12 + 4 * w * h
    if len(raw) != expect:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expect}")
    values = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w)
    total = float(values.sum(dtype=np.float64))
    if abs(total - 1.0) > DMAP_SUM_TOL:
        raise FormatError(f"{path}: density sums to {total}, expected 1")
    return values.astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, arrays: dict) -> None:
    """Serialize named float32 arrays: header, per-tensor records, CRC32."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FormatError(f"{path}: CRC mismatch, file is corrupt")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    end = len(raw) - 4
    arrays = {}
    for _ in range(count):
        if pos + 4 > end:
            raise FormatError(f"{path}: truncated tensor record")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n_vals = int(np.prod(dims)) if rank else 1
        nbytes = 4 * n_vals
        if pos + nbytes > end:
            raise FormatError(f"{path}: tensor {name!r} payload truncated")
        arrays[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f4").reshape(dims).copy()
        pos += nbytes
    if pos != end:
        raise FormatError(f"{path}: {end - pos} trailing bytes after last tensor")
    return arrays


# ---------------------------------------------------------------------------
# manifests and CSV tables


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_bytes(
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
    )


def load_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid manifest JSON ({e})") from e


def write_loss_csv(path, history) -> None:
    """history rows: (epoch, mean_l_cd, mean_l_d, mean_total)."""
    lines = ["epoch,mean_l_cd,mean_l_d,mean_total"]
    for epoch, l_cd, l_d, total in history:
        lines.append(f"{epoch},{l_cd:.9g},{l_d:.9g},{total:.9g}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def write_metrics_csv(path, rows) -> None:
    """rows: dicts with sample_id, metric, value."""
    lines = ["sample_id,metric,value"]
    for row in rows:
        lines.append(f"{row['sample_id']},{row['metric']},{row['value']:.9g}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))
