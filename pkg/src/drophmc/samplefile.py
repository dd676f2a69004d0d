"""Self-describing binary container for posterior draws.

Layout (all integers little-endian):

    magic           8 bytes  b"DROPHMC\\0"
    version         u32      currently 1
    class_count     u32
    feature_count   u32
    seed            i64
    algorithm       u32 length + UTF-8 bytes
    meta            u32 length + UTF-8 JSON (full chain/config echo)
    draw_count      u64
    records         draw_count times: u64 iteration index,
                    then class_count*feature_count + class_count float64
                    (weights row-major, then biases)

The JSON echo contains everything needed to reproduce the file, so a
sample file is its own provenance record.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .samplers import ChainMeta, PosteriorSamples

MAGIC = b"DROPHMC\x00"
VERSION = 1


def write_samples(path: str, samples: PosteriorSamples) -> None:
    """Serialize one chain's draws; writing is deterministic per input."""
    meta = samples.meta
    algo = meta.algorithm.encode("utf-8")
    meta_json = json.dumps(meta.to_dict()).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIq", VERSION, meta.class_count,
                             meta.feature_count, meta.seed))
        fh.write(struct.pack("<I", len(algo)))
        fh.write(algo)
        fh.write(struct.pack("<I", len(meta_json)))
        fh.write(meta_json)
        fh.write(struct.pack("<Q", len(samples)))
        for idx, row in zip(samples.draw_indices, samples.draws):
            fh.write(struct.pack("<Q", int(idx)))
            fh.write(np.ascontiguousarray(row, dtype="<f8").tobytes())


def read_samples(path: str) -> PosteriorSamples:
    """Read a sample container back into a PosteriorSamples."""
    with open(path, "rb") as fh:
        raw = fh.read()

    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a drophmc sample file")
    off = len(MAGIC)
    version, class_count, feature_count, seed = struct.unpack_from("<IIIq", raw, off)
    off += struct.calcsize("<IIIq")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")

    (algo_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    algorithm = raw[off : off + algo_len].decode("utf-8")
    off += algo_len
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = ChainMeta.from_dict(json.loads(raw[off : off + meta_len]))
    off += meta_len
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8

    if (meta.algorithm, meta.class_count, meta.feature_count, meta.seed) != (
        algorithm, class_count, feature_count, seed
    ):
        raise ValueError(f"{path}: header disagrees with its metadata echo")

    dim = class_count * feature_count + class_count
    record = 8 + dim * 8
    if len(raw) - off != count * record:
        raise ValueError(f"{path}: truncated draw records")

    indices = np.empty(count, dtype=np.int64)
    draws = np.empty((count, dim))
    for i in range(count):
        (indices[i],) = struct.unpack_from("<Q", raw, off)
        off += 8
        draws[i] = np.frombuffer(raw, dtype="<f8", count=dim, offset=off)
        off += dim * 8
    return PosteriorSamples(draws, indices, meta)
