"""Checkpoint directory: manifest.json, decoder.bin, history.bin and submaps/*.rims.

Everything needed to resume a run bit-for-bit is stored, including the RNG
state and the Adam moments. Binary files are little-endian, versioned and end
with a 64-bit blake2b checksum.
"""
from __future__ import annotations

import json
import shutil
import struct
from pathlib import Path

import numpy as np

from .config import config_from_dict
from .decoder import PARAM_NAMES, Decoder
from .errors import DataFormatError
from .feature_grid import LocalFeatureGrid
from .global_map import checksum64

FORMAT_VERSION = 1
_DEC_HEADER = struct.Struct("<4sHBIIQQB")
_HIST_HEADER = struct.Struct("<4sHQQ")


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<Q", checksum64(body))


def _unseal(data: bytes, magic: bytes, what: str) -> bytes:
    if len(data) < 12 or data[:4] != magic:
        raise DataFormatError(f"{what}: bad magic or truncated file")
    body, tail = data[:-8], data[-8:]
    if struct.unpack("<Q", tail)[0] != checksum64(body):
        raise DataFormatError(f"{what}: checksum mismatch")
    return body


def decoder_to_bytes(dec: Decoder) -> bytes:
    real = dec.dtype.itemsize
    rt = np.dtype(f"<f{real}")
    parts = [_DEC_HEADER.pack(b"RIMD", FORMAT_VERSION, real, dec.in_dim, dec.hidden_dim,
                              dec.step_count, dec.version, int(dec.frozen))]
    for group in (dec.params(), dec.adam_m, dec.adam_v):
        for name in PARAM_NAMES:
            parts.append(np.asarray(group[name], dtype=rt).tobytes())
    return _seal(b"".join(parts))


def decoder_from_bytes(data: bytes) -> Decoder:
    body = _unseal(data, b"RIMD", "decoder")
    _, version, real, in_dim, hidden, steps, pversion, frozen = _DEC_HEADER.unpack_from(body)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"decoder: unsupported version {version}")
    if real not in (4, 8):
        raise DataFormatError(f"decoder: bad real size {real}")
    dtype = np.float32 if real == 4 else np.float64
    dec = Decoder(in_dim, hidden, dtype=dtype)
    shapes = {n: getattr(dec, n).shape for n in PARAM_NAMES}
    off = _DEC_HEADER.size
    rt = np.dtype(f"<f{real}")
    for group in ("params", "adam_m", "adam_v"):
        for name in PARAM_NAMES:
            count = int(np.prod(shapes[name], dtype=np.int64))
            if off + count * real > len(body):
                raise DataFormatError("decoder: truncated payload")
            arr = np.frombuffer(body, rt, count, off).reshape(shapes[name]).astype(dtype)
            off += count * real
            if group == "params":
                setattr(dec, name, arr)
            else:
                getattr(dec, group)[name] = arr
    if off != len(body):
        raise DataFormatError("decoder: trailing bytes")
    dec.step_count = steps
    dec.version = pversion
    dec.frozen = bool(frozen)
    return dec


def history_to_bytes(hist_pos, hist_org, out_pts, out_org) -> bytes:
    parts = [_HIST_HEADER.pack(b"RIMH", FORMAT_VERSION, len(hist_pos), len(out_pts))]
    for arr in (hist_pos, hist_org, out_pts, out_org):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return _seal(b"".join(parts))


def history_from_bytes(data: bytes):
    body = _unseal(data, b"RIMH", "history")
    _, version, n_hist, n_out = _HIST_HEADER.unpack_from(body)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"history: unsupported version {version}")
    if len(body) != _HIST_HEADER.size + 48 * (n_hist + n_out):
        raise DataFormatError("history: payload size mismatch")
    off = _HIST_HEADER.size
    out = []
    for n in (n_hist, n_hist, n_out, n_out):
        out.append(np.frombuffer(body, "<f8", 3 * n, off).reshape(n, 3).astype(np.float64))
        off += 24 * n
    return out


def _key_name(key) -> str:
    return "%d_%d_%d.rims" % tuple(key)


def save_checkpoint(mapper, path) -> None:
    """Write ``mapper`` to directory ``path`` atomically (via a sibling ``.partial`` dir)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        (tmp / "submaps").mkdir(parents=True)
        mapper.flush()
        gm = mapper.global_map
        entries = []
        for key in gm.keys():
            blob = gm.submap_bytes(key)
            (tmp / "submaps" / _key_name(key)).write_bytes(blob)
            entries.append({"key": list(key), "state": gm.state(key), "checksum": checksum64(blob)})
        (tmp / "decoder.bin").write_bytes(decoder_to_bytes(mapper.decoder))
        (tmp / "history.bin").write_bytes(
            history_to_bytes(mapper.hist_pos, mapper.hist_org, mapper.out_pts, mapper.out_org))
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": mapper.config.to_dict(),
            "frame_count": mapper.frame_count,
            "slide_count": mapper.slide_count,
            "origin_index": None if mapper.grid is None else [int(x) for x in mapper.grid.origin_index],
            "visited": mapper.visited,
            "rng_state": mapper.rng.bit_generator.state,
            "submaps": entries,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
        if path.exists():
            old = path.with_name(path.name + ".old")
            shutil.rmtree(old, ignore_errors=True)
            path.rename(old)
            tmp.rename(path)
            shutil.rmtree(old)
        else:
            tmp.rename(path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path, work_dir=None):
    from .trainer import Mapper

    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = config_from_dict(manifest["config"])
    mapper = Mapper(cfg, work_dir=work_dir)
    dec = decoder_from_bytes((path / "decoder.bin").read_bytes())
    if dec.dtype != mapper.dtype or dec.in_dim != cfg.grid.feature_width:
        raise DataFormatError("decoder does not match the checkpoint config")
    mapper.decoder = dec
    mapper.hist_pos, mapper.hist_org, mapper.out_pts, mapper.out_org = history_from_bytes(
        (path / "history.bin").read_bytes())
    for entry in manifest["submaps"]:
        blob = (path / "submaps" / _key_name(entry["key"])).read_bytes()
        if checksum64(blob) != entry["checksum"]:
            raise DataFormatError(f"sub-map {entry['key']} checksum does not match the manifest")
        mapper.global_map.load_submap(blob, entry["state"])
    mapper.frame_count = manifest["frame_count"]
    mapper.slide_count = manifest["slide_count"]
    mapper.visited = [(list(lo), list(hi)) for lo, hi in manifest["visited"]]
    mapper.rng.bit_generator.state = manifest["rng_state"]
    if manifest["origin_index"] is not None:
        grid = LocalFeatureGrid(cfg.grid, manifest["origin_index"], dtype=mapper.dtype)
        for block in mapper.global_map.fetch_blocks(grid.full_regions()):
            grid.pad_block(block)
        mapper.grid = grid
    return mapper
