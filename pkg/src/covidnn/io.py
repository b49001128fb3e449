"""Binary weight archives.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"CVNW"
    offset 4   uint32    format version (1)
    offset 8   uint64    header length L in bytes
    offset 16  L bytes   UTF-8 JSON header
    16 + L     ...       payload: row-major float32 blobs, back to back

The header is ``{"tensors": [{"name", "dtype", "shape", "offset"}, ...]}``
with ``offset`` counted from the start of the payload and ``dtype`` 0 for
32-bit float. Entries follow layer order, then parameter name, so equal
weights always give equal bytes. The model description is written next to
the archive as ``<archive>.spec.json``.
"""

import json
import os
import struct
from collections import OrderedDict
from typing import NamedTuple

import numpy as np

from .exceptions import (
    ArchiveError,
    BadMagicError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedArchiveError,
    UnexpectedTensorError,
    UnsupportedVersionError,
)
from .models import ModelSpec, Network, build_alexnet

MAGIC = b"CVNW"
VERSION = 1
DTYPE_FLOAT32 = 0
PREAMBLE = struct.Struct("<4sIQ")


def spec_path(path):
    return os.fspath(path) + ".spec.json"


def encode_archive(tensors):
    """Serialize an ordered ``name -> array`` mapping to archive bytes."""
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        if not name:
            raise ArchiveError("tensor names must be non-empty")
        blob = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": DTYPE_FLOAT32, "shape": list(np.shape(value)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    if len({e["name"] for e in entries}) != len(entries):
        raise ArchiveError("tensor names must be unique")
    header = json.dumps({"tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([PREAMBLE.pack(MAGIC, VERSION, len(header)), header, *blobs])


def _read_preamble(fh, path):
    raw = fh.read(PREAMBLE.size)
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < PREAMBLE.size:
        raise TruncatedArchiveError(f"{path}: archive ends inside the preamble")
    _, version, header_len = PREAMBLE.unpack(raw)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported archive version {version}")
    return header_len


def read_header(path):
    """Parse only the JSON header; the payload is not touched."""
    with open(path, "rb") as fh:
        header_len = _read_preamble(fh, path)
        raw = fh.read(header_len)
    if len(raw) < header_len:
        raise TruncatedArchiveError(f"{path}: archive ends inside the header")
    try:
        header = json.loads(raw.decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{path}: malformed header: {exc}") from None
    expected = 0
    names = set()
    for e in entries:
        if e.get("dtype") != DTYPE_FLOAT32:
            raise ArchiveError(f"{path}: tensor {e.get('name')!r} has unsupported dtype {e.get('dtype')!r}")
        if e["name"] in names:
            raise ArchiveError(f"{path}: duplicate tensor {e['name']!r}")
        names.add(e["name"])
        if e["offset"] != expected:
            raise ArchiveError(f"{path}: tensor {e['name']!r} at offset {e['offset']}, expected {expected}")
        expected += 4 * int(np.prod(e["shape"], dtype=np.int64))
    return header_len, entries, expected


def read_archive(path):
    """Return an ordered ``name -> float32 array`` mapping from ``path``."""
    header_len, entries, payload_len = read_header(path)
    start = PREAMBLE.size + header_len
    size = os.path.getsize(path)
    if size < start + payload_len:
        raise TruncatedArchiveError(f"{path}: payload has {size - start} bytes, header describes {payload_len}")
    if size > start + payload_len:
        raise ArchiveError(f"{path}: {size - start - payload_len} trailing bytes after payload")
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read(payload_len)
    out = OrderedDict()
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out


def save_weights(network, path):
    """Write ``network``'s parameters (and initialized buffers) plus the model description sidecar."""
    data = encode_archive(network.state_dict())
    with open(path, "wb") as fh:
        fh.write(data)
    with open(spec_path(path), "w", encoding="utf-8") as fh:
        fh.write(network.spec.to_json())
    return path


def check_state(state, network, allow_extra=False):
    """Validate an archive mapping against ``network``; returns the subset to load."""
    params = network.param_shapes()
    buffers = network.buffer_shapes()
    for name, shape in params.items():
        if name not in state:
            raise MissingTensorError(f"archive is missing tensor {name!r}")
        if tuple(state[name].shape) != shape:
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tuple(state[name].shape)} in the archive, model expects {shape}"
            )
    selected = OrderedDict((name, state[name]) for name in params)
    layers_with_buffers = {}
    for name, shape in buffers.items():
        if name in state:
            if tuple(state[name].shape) != shape:
                raise ShapeMismatchError(
                    f"tensor {name!r} has shape {tuple(state[name].shape)} in the archive, model expects {shape}"
                )
            selected[name] = state[name]
            layers_with_buffers.setdefault(name.rsplit(".", 1)[0], []).append(name)
    for lname, names in layers_with_buffers.items():
        if len(names) != 2:
            raise MissingTensorError(f"archive has only {names[0]!r} of the running statistics for {lname!r}")
        if np.any(state[f"{lname}.running_var"] < 0):
            raise ArchiveError(f"tensor {lname + '.running_var'!r} has negative entries")
    extra = [name for name in state if name not in selected]
    if extra and not allow_extra:
        raise UnexpectedTensorError(f"archive has tensors the model does not: {extra}")
    return selected


def load_weights(path, network, allow_extra=False):
    """Fill ``network`` from the archive at ``path``.

    Every parameter must be present with the expected shape. Tensors the
    model does not know are an error unless ``allow_extra``. Nothing is
    modified unless the whole archive checks out.
    """
    state = check_state(read_archive(path), network, allow_extra)
    network.load_state_dict(state)
    return network


def load_model(path):
    """Rebuild a network from an archive and its ``.spec.json`` sidecar."""
    try:
        with open(spec_path(path), encoding="utf-8") as fh:
            spec = ModelSpec.from_json(fh.read())
    except FileNotFoundError:
        raise ArchiveError(f"missing model description {spec_path(path)}") from None
    network = Network(spec, initialize=False)
    return load_weights(path, network)


# -- pretrained AlexNet checks --------------------------------------------------

class TensorCheck(NamedTuple):
    name: str
    expected_shape: tuple
    found_shape: object
    present: bool
    shape_ok: bool
    degenerate: bool
    stats: dict

    @property
    def passed(self):
        return self.present and self.shape_ok and not self.degenerate


class PretrainedReport(NamedTuple):
    checks: list
    extra: list

    @property
    def flagged(self):
        return [c.name for c in self.checks if not c.passed]

    @property
    def ok(self):
        return not self.flagged

    def to_dict(self):
        return {
            "ok": self.ok,
            "flagged": self.flagged,
            "extra": self.extra,
            "tensors": [
                {
                    "name": c.name,
                    "expected_shape": list(c.expected_shape),
                    "found_shape": None if c.found_shape is None else list(c.found_shape),
                    "present": c.present,
                    "shape_ok": c.shape_ok,
                    "degenerate": c.degenerate,
                    **c.stats,
                }
                for c in self.checks
            ],
        }


def alexnet_shape_table():
    """Canonical ``name -> shape`` table of the 1000-way ImageNet AlexNet."""
    return Network(build_alexnet(1000), initialize=False).param_shapes()


def verify_pretrained_alexnet(path):
    """Check an archive against the canonical AlexNet table.

    Each tensor is reported with min/max/mean/std. A weight tensor whose
    values are all identical (or any tensor with non-finite values) is marked
    degenerate. Archive format errors propagate; content problems do not.
    """
    state = read_archive(path)
    checks = []
    for name, shape in alexnet_shape_table().items():
        value = state.get(name)
        if value is None:
            checks.append(TensorCheck(name, shape, None, False, False, False, {}))
            continue
        finite = bool(np.all(np.isfinite(value)))
        stats = {}
        if value.size:
            stats = {
                "min": float(value.min()),
                "max": float(value.max()),
                "mean": float(value.mean(dtype=np.float64)),
                "std": float(value.std(dtype=np.float64)),
            }
        constant = value.size > 0 and stats["min"] == stats["max"]
        degenerate = not finite or (name.endswith(".weight") and constant)
        checks.append(TensorCheck(name, shape, tuple(value.shape), True, tuple(value.shape) == shape, degenerate, stats))
    known = {c.name for c in checks}
    return PretrainedReport(checks, [name for name in state if name not in known])
