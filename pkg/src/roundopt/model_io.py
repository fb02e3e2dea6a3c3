"""On-disk formats for models, calibration sets, rounding masks and reports.

Model: a JSON header (``model.json``) next to one raw blob per tensor. Blobs
are little-endian float32; the header records each blob's file name and
shape. Layers that carry a quantization grid are snapped back onto it at load
time, so quantized weights survive the float32 trip bit-exactly.

Calibration file layout (all integers little-endian)::

    magic   b"RCAL"
    u32     version (1)
    u32     count
    u32     ndim, then ndim x u32 per-record shape
    u8      has_labels
    f32     count * prod(shape) values
    i64     count labels, only if has_labels

Mask file layout::

    magic   b"RMSK"
    u32     ndim, then ndim x u32 shape
    u8      packed bits (numpy.packbits, big bit order), ceil(size / 8) bytes
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelGraph
from .quantizer import QuantGrid, quantize_nearest
from .tensor import LayerSpec

FORMAT_NAME = "roundopt-model"
FORMAT_VERSION = "1.0"
CALIB_MAGIC = b"RCAL"
CALIB_VERSION = 1
MASK_MAGIC = b"RMSK"

REPORT_COLUMNS = ("layer", "name", "method", "grid_policy", "bits", "scale", "local_mse",
                  "nearest_local_mse", "wall_time_ms", "flipped_vs_nearest", "decided_fraction")


class FormatError(ValueError):
    """Base class for malformed files."""


class VersionMismatchError(FormatError):
    pass


class TruncatedBlobError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


# ---- model ------------------------------------------------------------------

def _blob_name(layer_index: int, what: str) -> str:
    return f"layer{layer_index}.{what}.f32"


def _write_blob(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(base: Path, ref: dict, field: str) -> np.ndarray:
    if not isinstance(ref, dict) or "blob" not in ref or "shape" not in ref:
        raise FormatError(f"{field}: expected an object with 'blob' and 'shape'")
    shape = tuple(int(d) for d in ref["shape"])
    if any(d < 0 for d in shape):
        raise ShapeMismatchError(f"{field}: negative dimension in shape {shape}")
    path = base / ref["blob"]
    if not path.is_file():
        raise FormatError(f"{field}: blob file {ref['blob']!r} is missing")
    raw = path.read_bytes()
    expected = 4 * math.prod(shape)
    if len(raw) < expected:
        raise TruncatedBlobError(f"{field}: truncated blob {ref['blob']!r}, {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise ShapeMismatchError(f"{field}: blob {ref['blob']!r} holds {len(raw)} bytes but shape {shape} "
                                 f"needs {expected}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def _snap(W: np.ndarray, grid: QuantGrid) -> np.ndarray:
    return quantize_nearest(W, grid)


def save_model(model: ModelGraph, path) -> Path:
    """Write ``model`` as ``path`` (the JSON header) plus blobs in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grids = (model.meta.get("quantization") or {}).get("grids")
    layers = []
    for i, layer in enumerate(model.layers):
        w_name = _blob_name(i, "weight")
        _write_blob(path.parent / w_name, layer.weight)
        entry = {
            "name": layer.name, "kind": layer.kind, "activation": layer.activation,
            "stride": layer.stride, "padding": layer.padding,
            "weight": {"blob": w_name, "shape": list(layer.weight.shape)},
            "bias": None, "grid": None,
        }
        if layer.bias is not None:
            b_name = _blob_name(i, "bias")
            _write_blob(path.parent / b_name, layer.bias)
            entry["bias"] = {"blob": b_name, "shape": list(layer.bias.shape)}
        if grids is not None:
            entry["grid"] = grids[i]
        layers.append(entry)
    meta = {k: v for k, v in model.meta.items() if k != "quantization"}
    header = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION,
              "input_shape": list(model.input_shape), "meta": meta, "layers": layers}
    if grids is not None:
        header["quantization"] = model.meta["quantization"]
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"model header {path} is not valid JSON: {e}") from None
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"format: expected {FORMAT_NAME!r}, got {header.get('format')!r}")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format_version: file has {header.get('format_version')!r}, this reader supports {FORMAT_VERSION!r}")
    base = path.parent
    layers = []
    for i, entry in enumerate(header.get("layers", [])):
        W = _read_blob(base, entry.get("weight"), f"layers[{i}].weight")
        b = None
        if entry.get("bias") is not None:
            b = _read_blob(base, entry["bias"], f"layers[{i}].bias")
        if entry.get("grid") is not None:
            W = _snap(W, QuantGrid(**entry["grid"]))
        try:
            layers.append(LayerSpec(entry["kind"], W, b, entry.get("activation", "identity"),
                                    int(entry.get("stride", 1)), int(entry.get("padding", 0)),
                                    entry.get("name", "")))
        except ValueError as e:
            raise ShapeMismatchError(f"layers[{i}]: {e}") from None
    meta = dict(header.get("meta", {}))
    if "quantization" in header:
        meta["quantization"] = header["quantization"]
    model = ModelGraph(layers, tuple(header.get("input_shape", ())), meta)
    _check_chain(model)
    return model


def _check_chain(model: ModelGraph):
    """Each layer's fan-in must match what the previous layer produces."""
    if not model.layers or not model.input_shape:
        return
    try:
        model.forward(np.zeros((1,) + tuple(model.input_shape)))
    except ValueError as e:
        raise ShapeMismatchError(f"layers: shapes do not chain from input_shape {model.input_shape}: {e}") from None


# ---- calibration data -------------------------------------------------------

def save_calib(path, x, labels=None) -> Path:
    x = np.asarray(x)
    if x.ndim < 1:
        raise ShapeMismatchError("calibration tensor needs a leading record axis")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (len(x),):
            raise ShapeMismatchError(f"labels: shape {labels.shape} does not match {len(x)} records")
    shape = x.shape[1:]
    buf = io.BytesIO()
    buf.write(CALIB_MAGIC)
    buf.write(struct.pack("<III", CALIB_VERSION, len(x), len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<B", labels is not None))
    buf.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    if labels is not None:
        buf.write(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_calib(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """``(x, labels)``; ``labels`` is None for an unlabeled set."""
    raw = Path(path).read_bytes()
    if raw[:4] != CALIB_MAGIC:
        raise FormatError(f"magic: {path} is not a calibration file")
    if len(raw) < 17:
        raise TruncatedBlobError("header: truncated calibration header")
    version, count, ndim = struct.unpack_from("<III", raw, 4)
    if version != CALIB_VERSION:
        raise VersionMismatchError(f"version: file has {version}, this reader supports {CALIB_VERSION}")
    off = 16
    if len(raw) < off + 4 * ndim + 1:
        raise TruncatedBlobError("shape: truncated calibration header")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    has_labels = raw[off]
    off += 1
    n_vals = count * math.prod(shape)
    expected = off + 4 * n_vals + (8 * count if has_labels else 0)
    if len(raw) < expected:
        raise TruncatedBlobError(f"payload: truncated blob, {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise ShapeMismatchError(f"payload: {len(raw) - expected} trailing bytes beyond count x shape")
    x = np.frombuffer(raw, dtype="<f4", count=n_vals, offset=off).astype(np.float64).reshape((count,) + shape)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i8", count=count, offset=off + 4 * n_vals).astype(np.int64)
    return x, labels


# ---- masks ------------------------------------------------------------------

def save_mask(path, mask) -> Path:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        mask = mask.astype(bool)
    body = MASK_MAGIC + struct.pack(f"<I{mask.ndim}I", mask.ndim, *mask.shape) + np.packbits(mask.ravel()).tobytes()
    path = Path(path)
    path.write_bytes(body)
    return path


def load_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise FormatError(f"magic: {path} is not a mask file")
    if len(raw) < 8:
        raise TruncatedBlobError("ndim: truncated mask header")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + 4 * ndim:
        raise TruncatedBlobError("shape: truncated mask header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    size = math.prod(shape)
    body = raw[8 + 4 * ndim:]
    expected = (size + 7) // 8
    if len(body) < expected:
        raise TruncatedBlobError(f"bits: truncated blob, {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise ShapeMismatchError(f"bits: {len(body)} bytes but shape {shape} needs {expected}")
    return np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=size).astype(bool).reshape(shape)


def save_masks(directory, masks: dict) -> list[Path]:
    """One ``<name>.mask`` file per entry of ``masks``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [save_mask(directory / f"{name}.mask", m) for name, m in masks.items()]


# ---- reports ----------------------------------------------------------------

def report_rows(result) -> list[dict]:
    rows = []
    policy = result.config.get("grid_policy", "")
    for rec in result.layers:
        d = rec.diagnostics
        rows.append({
            "layer": rec.index, "name": rec.name, "method": rec.method, "grid_policy": policy,
            "bits": rec.grid.bits, "scale": repr(float(rec.grid.scale)),
            "local_mse": repr(float(rec.local_mse)), "nearest_local_mse": repr(float(rec.nearest_local_mse)),
            "wall_time_ms": f"{rec.wall_time_ms:.3f}",
            "flipped_vs_nearest": d.get("flipped_vs_nearest", ""),
            "decided_fraction": "" if "decided_fraction" not in d else repr(float(d["decided_fraction"])),
        })
    return rows


def write_report(path, rows: list[dict], config: dict, columns=REPORT_COLUMNS) -> Path:
    """CSV of per-layer metrics, preceded by ``# key=value`` lines echoing the run config."""
    path = Path(path)
    with path.open("w", newline="") as f:
        for key in sorted(config):
            f.write(f"# {key}={json.dumps(config[key])}\n")
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def read_report(path) -> tuple[dict, list[dict]]:
    config, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            config[key] = json.loads(value)
        else:
            body.append(line)
    return config, list(csv.DictReader(body))
