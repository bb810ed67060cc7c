"""Checkpoint files: named float32 tensors around the binary container format.

Layout (little-endian):

    magic   4 bytes  b"PCKP"
    version 1 byte   0x01
    count   u32
    entries count * { u16 name length, UTF-8 name, tensor container blob }

Entry order is canonical per parameter set, so save -> load -> save is
byte-identical. Every checkpoint carries a leading "meta" entry encoding the
architecture so the full expected name set is known before validation.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .container import read_tensor, write_tensor
from .errors import FormatError
from .recalibration import PcsrConfig, PcsrParams, init_pcsr
from .tensor import Tensor
from .vit import VitConfig, VitParams, expected_tensor_names, init_vit

MAGIC = b"PCKP"
VERSION = 1

VIT_META = "meta"
_VIT_META_LEN = 7
_PCSR_META_LEN = 4


def save_entries(path: str | Path, entries: list[tuple[str, np.ndarray]]):
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<B", VERSION))
        fp.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            encoded = name.encode("utf-8")
            fp.write(struct.pack("<H", len(encoded)))
            fp.write(encoded)
            write_tensor(fp, array)


def load_entries(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fp:
        head = fp.read(4)
        if len(head) < 4:
            raise FormatError(f"checkpoint {path}: truncated in magic")
        if head != MAGIC:
            raise FormatError(f"checkpoint {path}: bad magic {head!r}, expected {MAGIC!r}")
        raw = fp.read(5)
        if len(raw) < 5:
            raise FormatError(f"checkpoint {path}: truncated in header")
        version, count = struct.unpack("<BI", raw)
        if version != VERSION:
            raise FormatError(f"checkpoint {path}: unsupported version {version}")
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            raw = fp.read(2)
            if len(raw) < 2:
                raise FormatError(f"checkpoint {path}: truncated in entry name length")
            (nlen,) = struct.unpack("<H", raw)
            name_bytes = fp.read(nlen)
            if len(name_bytes) < nlen:
                raise FormatError(f"checkpoint {path}: truncated in entry name")
            name = name_bytes.decode("utf-8")
            if name in entries:
                raise FormatError(f"checkpoint {path}: duplicate entry {name!r}")
            entries[name] = read_tensor(fp)
        if fp.read(1):
            raise FormatError(f"checkpoint {path}: trailing bytes after last entry")
    return entries


def _validate_names(path, entries: dict[str, np.ndarray], expected: list[str]):
    expected_set = set(expected)
    unknown = sorted(set(entries) - expected_set)
    missing = sorted(expected_set - set(entries))
    if unknown or missing:
        raise FormatError(
            f"checkpoint {path}: unknown entries {unknown}, missing entries {missing}; "
            f"expected exactly {sorted(expected_set)}"
        )


def _check_shape(path, name, array, shape):
    if array.shape != tuple(shape):
        raise FormatError(
            f"checkpoint {path}: entry {name!r} has shape {list(array.shape)}, expected {list(shape)}"
        )


# -- backbone checkpoints --------------------------------------------------------


def save_vit(path: str | Path, params: VitParams):
    cfg = params.config
    meta = np.array([cfg.image_size, cfg.patch_size, cfg.d_model, cfg.n_layers,
                     cfg.n_heads, cfg.mlp_ratio, cfg.n_classes], dtype=np.float32)
    entries = [(VIT_META, meta)]
    entries += [(name, t.data) for name, t in params.named_tensors()]
    save_entries(path, entries)


def load_vit(path: str | Path) -> VitParams:
    entries = load_entries(path)
    if VIT_META not in entries:
        raise FormatError(f"checkpoint {path}: missing {VIT_META!r} entry")
    meta = entries[VIT_META]
    if meta.shape != (_VIT_META_LEN,):
        raise FormatError(f"checkpoint {path}: meta entry has shape {list(meta.shape)}")
    cfg = VitConfig(
        image_size=int(meta[0]), patch_size=int(meta[1]), d_model=int(meta[2]),
        n_layers=int(meta[3]), n_heads=int(meta[4]), mlp_ratio=float(meta[5]),
        n_classes=int(meta[6]),
    )
    _validate_names(path, entries, [VIT_META] + expected_tensor_names(cfg))
    params = init_vit(cfg, seed=0)
    for name, tensor in params.named_tensors():
        _check_shape(path, name, entries[name], tensor.dims)
        tensor.data = entries[name].copy()
        tensor.requires_grad = False
        tensor.grad = None
    return params


# -- adapter checkpoints ---------------------------------------------------------


def save_pcsr(path: str | Path, params: PcsrParams):
    cfg = params.config
    meta = np.array([params.n_layers, params.d_model, cfg.factor_mult,
                     1.0 if cfg.layer_shared else 0.0], dtype=np.float32)
    entries = [(VIT_META, meta)]
    entries += [(name, t.data) for name, t in params.named_tensors()]
    save_entries(path, entries)


def load_pcsr(path: str | Path, config: PcsrConfig | None = None) -> PcsrParams:
    """Load adapter weights; `config` supplies the conditioning/aggregation modes
    (which do not change the tensor shapes) and must agree with the stored
    sharing/layer-sharing structure."""
    entries = load_entries(path)
    if VIT_META not in entries:
        raise FormatError(f"checkpoint {path}: missing {VIT_META!r} entry")
    meta = entries[VIT_META]
    if meta.shape != (_PCSR_META_LEN,):
        raise FormatError(f"checkpoint {path}: meta entry has shape {list(meta.shape)}")
    n_layers, d_model, mult, layer_shared = (int(meta[0]), int(meta[1]),
                                             int(meta[2]), bool(meta[3]))
    sharing = "shared" if mult == 2 else "independent"
    if config is None:
        config = PcsrConfig(sharing=sharing, layer_shared=layer_shared)
    if config.factor_mult != mult or config.layer_shared != layer_shared:
        raise FormatError(
            f"checkpoint {path}: stored sharing structure (mult={mult}, "
            f"layer_shared={layer_shared}) conflicts with requested config {config}"
        )
    params = init_pcsr(n_layers, d_model, config)
    expected = [VIT_META] + [name for name, _ in params.named_tensors()]
    _validate_names(path, entries, expected)
    for name, tensor in params.named_tensors():
        _check_shape(path, name, entries[name], tensor.dims)
        tensor.data = entries[name].copy()
        tensor.grad = None
    return params
