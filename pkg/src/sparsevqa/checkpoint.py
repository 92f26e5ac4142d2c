"""Binary checkpoint format for model parameters and pruning masks.

Layout: magic, format version, a JSON header (model config, matrix manifest
with name/shape/tag/prunable, optional mask metadata, free-form meta), then
row-major float64 payloads per matrix in manifest order. When masks are
present, each prunable matrix contributes a bit-packed binary mask, an
optional float64 real-valued mask, and its current threshold.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .model import ModelConfig, ParameterRegistry
from .pruning import MaskSet

MAGIC = b"SVQC"
VERSION = 1


def save_checkpoint(path, registry: ParameterRegistry,
                    maskset: Optional[MaskSet] = None, meta: Optional[dict] = None):
    manifest = [
        {"name": n, "shape": list(e.tensor.shape), "tag": e.tag,
         "prunable": e.prunable}
        for n, e in registry.items()
    ]
    header = {
        "version": VERSION,
        "config": registry.config.to_dict(),
        "manifest": manifest,
        "meta": meta or {},
        "masks": None,
    }
    if maskset is not None:
        header["masks"] = {
            "names": list(maskset.binary),
            "has_real": maskset.real is not None,
            "targets": maskset.targets,
            "alpha": maskset.alpha,
            "phi0": maskset.phi0,
            "recompute_every": maskset.recompute_every,
            "mask_lr": maskset.mask_lr,
            "global_threshold": maskset.global_threshold,
        }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name, entry in registry.items():
            fh.write(np.ascontiguousarray(entry.tensor.data, dtype=np.float64).tobytes())
        if maskset is not None:
            for name in maskset.binary:
                m = maskset.binary[name]
                fh.write(np.packbits(m.astype(np.uint8).ravel()).tobytes())
                if maskset.real is not None:
                    fh.write(np.ascontiguousarray(maskset.real[name], dtype=np.float64).tobytes())
                fh.write(struct.pack("<d", maskset.thresholds[name]))


def load_checkpoint(path):
    """Returns (registry, maskset or None, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        config = ModelConfig.from_dict(header["config"])
        registry = ParameterRegistry(config)
        for item in header["manifest"]:
            shape = tuple(item["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype=np.float64).reshape(shape)
            registry.add(item["name"], data.copy(), item["tag"], item["prunable"])
        maskset = None
        minfo = header.get("masks")
        if minfo:
            binary, real, thresholds = {}, {}, {}
            for name in minfo["names"]:
                shape = tuple(registry[name].tensor.shape)
                n = int(np.prod(shape))
                nbytes = (n + 7) // 8
                bits = np.unpackbits(
                    np.frombuffer(fh.read(nbytes), dtype=np.uint8), count=n)
                binary[name] = bits.reshape(shape).astype(np.float64)
                if minfo["has_real"]:
                    real[name] = np.frombuffer(fh.read(8 * n),
                                               dtype=np.float64).reshape(shape).copy()
                (thresholds[name],) = struct.unpack("<d", fh.read(8))
            maskset = MaskSet(
                targets={k: float(v) for k, v in minfo["targets"].items()},
                binary=binary,
                real=real if minfo["has_real"] else None,
                thresholds=thresholds,
                alpha=minfo["alpha"],
                phi0=minfo["phi0"],
                recompute_every=minfo["recompute_every"],
                mask_lr=minfo["mask_lr"],
                global_threshold=minfo["global_threshold"],
            )
    return registry, maskset, header.get("meta", {})
