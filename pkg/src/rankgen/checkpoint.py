"""Versioned binary parameter container with a text manifest.

Layout: magic, format version, then a header (vocab size, embedding and
hidden dims, seed), then named blocks of little-endian float64 data. A
sibling ``<path>.manifest`` text file lists every block's name, shape, and
CRC32 so artifacts can be checksum-validated before resuming. Loaders
reject files written by a newer format version.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, corrupt, or newer-versioned checkpoint data."""


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def save_blocks(path, blocks: dict, *, vocab_size: int, d_e: int, d_h: int,
                seed: int) -> None:
    """Write named float64 arrays plus the text manifest."""
    path = Path(path)
    lines = [f"format_version={FORMAT_VERSION} vocab={vocab_size} "
             f"d_e={d_e} d_h={d_h} seed={seed}"]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIqI", FORMAT_VERSION, vocab_size, d_e, d_h,
                             seed, len(blocks)))
        for name, arr in blocks.items():
            # asarray keeps 0-d blocks 0-d; ascontiguousarray would not
            data = np.asarray(arr, dtype="<f8", order="C")
            raw = data.tobytes()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(raw)
            shape = "x".join(str(d) for d in data.shape) or "scalar"
            lines.append(f"{name} {shape} {zlib.crc32(raw):08x}")
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_blocks(path):
    """Read a checkpoint back: (header dict, ordered name->array dict).

    The manifest must be present and every block must checksum-validate.
    """
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, vocab_size, d_e, d_h, seed, n_blocks = struct.unpack(
            "<IIIIqI", _read_exact(fh, 28, "header"))
        if version > FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} is newer than supported "
                f"{FORMAT_VERSION}")
        header = {"format_version": version, "vocab_size": vocab_size,
                  "d_e": d_e, "d_h": d_h, "seed": seed}
        blocks = {}
        checksums = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "block name"))
            name = _read_exact(fh, name_len, "block name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "block rank"))
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, "block shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 8 * count, f"block {name!r}")
            blocks[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            checksums[name] = zlib.crc32(raw)
    _verify_manifest(path, checksums)
    return header, blocks


def _verify_manifest(path, checksums):
    mpath = manifest_path(path)
    if not mpath.exists():
        raise CheckpointError(f"missing manifest {mpath}")
    listed = {}
    for line in mpath.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        name, _shape, crc = line.rsplit(" ", 2)
        listed[name] = int(crc, 16)
    if set(listed) != set(checksums):
        raise CheckpointError(f"{path}: manifest block names disagree with data")
    for name, crc in checksums.items():
        if listed[name] != crc:
            raise CheckpointError(f"{path}: checksum mismatch for block {name!r}")


# -- model adapters ----------------------------------------------------------


def save_generator(path, model) -> None:
    save_blocks(path, {n: p.data for n, p in model.parameters().items()},
                vocab_size=model.vocab_size, d_e=model.d_e, d_h=model.d_h,
                seed=model.seed)


def load_generator(path):
    from .generator import GeneratorModel

    header, blocks = load_blocks(path)
    model = GeneratorModel(header["vocab_size"], d_e=header["d_e"],
                           d_h=header["d_h"], seed=header["seed"])
    load_into(path, model, blocks=(header, blocks))
    return model


def save_params(path, model, *, vocab_size: int, seed: int) -> None:
    """Container for encoder-style models: dims live in the blocks' shapes."""
    save_blocks(path, {n: p.data for n, p in model.parameters().items()},
                vocab_size=vocab_size, d_e=0, d_h=0, seed=seed)


def load_into(path, model, blocks=None) -> None:
    """Copy a checkpoint's blocks into an existing model, shape-checked."""
    header, data = blocks if blocks is not None else load_blocks(path)
    params = model.parameters()
    if set(params) != set(data):
        raise CheckpointError(
            f"{path}: checkpoint blocks {sorted(data)} do not match "
            f"model parameters {sorted(params)}")
    for name, tensor in params.items():
        if data[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: block {name!r} has shape {data[name].shape}, "
                f"model expects {tensor.data.shape}")
        tensor.data[...] = data[name]
