"""Checkpoint bundles on disk.

A checkpoint is a directory holding

``tensors.bin``
    every array concatenated as little-endian float32, in manifest order;
``manifest.txt``
    one line per array ``tensor <name> <d0>x<d1>... <byte offset> <nbytes> <crc32>``
    and one line per scalar ``meta <key> <value>``.

Array names: ``param/<name>``, ``momentum/<name>`` and
``cache/<layer>/mode<m>`` for the warm-start factor of mode ``m`` (its
shape gives the rows and columns).
"""
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decomposition import WarmStartCache


@dataclass
class CheckpointBundle:
    params: dict
    buffers: dict
    caches: dict
    config_hash: str
    step: int
    meta: dict = field(default_factory=dict)


def _arrays(bundle):
    for k in sorted(bundle.params):
        yield f"param/{k}", bundle.params[k]
    for k in sorted(bundle.buffers):
        yield f"momentum/{k}", bundle.buffers[k]
    for layer in sorted(bundle.caches):
        cache = bundle.caches[layer]
        if cache.factors is None:
            continue
        for m, u in enumerate(cache.factors, start=1):
            yield f"cache/{layer}/mode{m}", u


def save_checkpoint(bundle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"meta config_hash {bundle.config_hash}", f"meta step {bundle.step}"]
    for layer in sorted(bundle.caches):
        lines.append(f"meta cache_step.{layer} {bundle.caches[layer].step}")
    for k, v in bundle.meta.items():
        lines.append(f"meta {k} {v}")
    offset = 0
    with (d / "tensors.bin").open("wb") as fh:
        for name, a in _arrays(bundle):
            raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
            fh.write(raw)
            dims = "x".join(str(n) for n in np.shape(a)) or "scalar"
            lines.append(f"tensor {name} {dims} {offset} {len(raw)} {zlib.crc32(raw):08x}")
            offset += len(raw)
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    d = Path(directory)
    blob = (d / "tensors.bin").read_bytes()
    meta, params, buffers, cache_parts = {}, {}, {}, {}
    for n, line in enumerate((d / "manifest.txt").read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "meta" and len(parts) >= 3:
            meta[parts[1]] = " ".join(parts[2:])
            continue
        if parts[0] != "tensor" or len(parts) != 6:
            raise ValueError(f"{d}/manifest.txt:{n}: malformed line")
        _, name, dims, off, nbytes, crc = parts
        off, nbytes = int(off), int(nbytes)
        raw = blob[off:off + nbytes]
        if len(raw) != nbytes or f"{zlib.crc32(raw):08x}" != crc:
            raise ValueError(f"{d}: checksum mismatch for {name}")
        shape = () if dims == "scalar" else tuple(int(x) for x in dims.split("x"))
        a = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = a
        elif kind == "momentum":
            buffers[rest] = a
        elif kind == "cache":
            layer, _, mode = rest.rpartition("/")
            cache_parts.setdefault(layer, {})[int(mode.removeprefix("mode"))] = a
        else:
            raise ValueError(f"{d}: unknown array kind in {name}")
    caches = {}
    for layer, modes in cache_parts.items():
        if sorted(modes) != [1, 2, 3, 4]:
            raise ValueError(f"{d}: incomplete warm-start cache for {layer}")
        step = int(meta.pop(f"cache_step.{layer}", 0))
        caches[layer] = WarmStartCache(tuple(modes[m] for m in (1, 2, 3, 4)), step)
    config_hash = meta.pop("config_hash", "")
    step = int(meta.pop("step", 0))
    return CheckpointBundle(params, buffers, caches, config_hash, step, meta)
