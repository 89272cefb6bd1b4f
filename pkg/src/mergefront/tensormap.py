"""Binary tensor container and layer-name indexing.

File layout: bytes 0-7 hold a little-endian uint64 header length N, bytes
8..8+N hold a UTF-8 JSON header ``{"tensors": [...], "metadata": {...}}``,
and the remainder is the payload: each tensor stored as little-endian
IEEE-754 binary32, row-major, contiguous in index order, at the offset
(relative to payload start) declared in the header.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptPayload,
    FormatError,
    IndexGapError,
    PatternError,
    ShapeError,
)

DTYPE = np.dtype("<f4")


@dataclass
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray  # float32, row-major, shape == self.shape

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.shape != self.shape:
            if arr.size != math.prod(self.shape):
                raise ShapeError(
                    f"tensor {self.name!r}: {arr.size} values for shape {self.shape}"
                )
            arr = arr.reshape(self.shape)
        self.data = arr

    @property
    def nbytes(self) -> int:
        return self.data.size * 4


class TensorMap:
    """Ordered, named collection of float32 tensors plus string metadata.

    Immutable by convention once built: entries are never mutated in place,
    so instances are safe to share across concurrent evaluations.
    """

    def __init__(self, entries, metadata=None):
        self.entries: list[TensorEntry] = []
        self._by_name: dict[str, TensorEntry] = {}
        for e in entries:
            if not isinstance(e, TensorEntry):
                e = TensorEntry(*e)
            if e.name in self._by_name:
                raise FormatError(f"duplicate tensor name {e.name!r}")
            self.entries.append(e)
            self._by_name[e.name] = e
        self.metadata: dict[str, str] = dict(metadata or {})

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self.entries)

    def tensor(self, name: str) -> np.ndarray:
        return self._by_name[name].data

    def entry(self, name: str) -> TensorEntry:
        return self._by_name[name]

    def __eq__(self, other) -> bool:
        """Bit-level equality: same names, shapes, payload bytes, metadata."""
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.metadata != other.metadata or len(self) != len(other):
            return False
        for a, b in zip(self.entries, other.entries):
            if a.name != b.name or a.shape != b.shape:
                return False
            if a.data.tobytes() != b.data.tobytes():
                return False
        return True

    def with_entries(self, entries) -> "TensorMap":
        return TensorMap(entries, self.metadata)


def save_tensor_map(tmap: TensorMap, path) -> None:
    """Write ``tmap`` to ``path``; deterministic byte-for-byte per content."""
    descriptors = []
    offset = 0
    for e in tmap.entries:
        descriptors.append(
            {
                "name": e.name,
                "shape": list(e.shape),
                "dtype": "f32",
                "offset": offset,
                "nbytes": e.nbytes,
            }
        )
        offset += e.nbytes
    header = json.dumps(
        {"tensors": descriptors, "metadata": tmap.metadata},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for e in tmap.entries:
            fh.write(e.data.astype(DTYPE, copy=False).tobytes(order="C"))


def load_tensor_map(path) -> TensorMap:
    """Read a container file; round-trips bit-identically with save."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise FormatError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError(f"{path}: header missing 'tensors' list")
    metadata = header.get("metadata", {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{path}: metadata must be a string-to-string map")

    payload = raw[8 + header_len :]
    entries = []
    expected_offset = 0
    for desc in header["tensors"]:
        try:
            name = desc["name"]
            shape = tuple(int(s) for s in desc["shape"])
            dtype = desc["dtype"]
            offset = int(desc["offset"])
            nbytes = int(desc["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor descriptor {desc!r}") from exc
        if dtype != "f32":
            raise FormatError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        if any(s <= 0 for s in shape):
            raise FormatError(f"{path}: non-positive dimension in shape {shape} for {name!r}")
        if offset != expected_offset:
            raise FormatError(
                f"{path}: tensor {name!r} offset {offset}, expected contiguous {expected_offset}"
            )
        if nbytes != 4 * math.prod(shape):
            raise CorruptPayload(
                f"{path}: tensor {name!r} declares {nbytes} bytes for shape {shape}"
            )
        if offset + nbytes > len(payload):
            raise CorruptPayload(f"{path}: payload truncated at tensor {name!r}")
        data = np.frombuffer(payload, dtype=DTYPE, count=nbytes // 4, offset=offset)
        entries.append(TensorEntry(name, shape, data.reshape(shape).copy()))
        expected_offset = offset + nbytes
    if len(payload) != expected_offset:
        raise CorruptPayload(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected_offset}"
        )
    return TensorMap(entries, metadata)


@dataclass
class LayerIndex:
    """Assignment of every tensor name to a layer or a boundary group."""

    layer_groups: list[tuple[int, list[str]]]
    embedding_names: list[str] = field(default_factory=list)
    head_names: list[str] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layer_groups)

    def layer_names(self, layer_id: int) -> list[str]:
        return self.layer_groups[layer_id][1]

    def all_names(self) -> list[str]:
        names = list(self.embedding_names)
        for _, group in self.layer_groups:
            names.extend(group)
        names.extend(self.head_names)
        return names


def _pattern_regex(layer_pattern: str) -> re.Pattern:
    m = re.search(r"\{[^{}]*\}", layer_pattern)
    if m is None:
        raise PatternError(
            f"layer pattern {layer_pattern!r} has no integer placeholder like '{{n}}'"
        )
    prefix, suffix = layer_pattern[: m.start()], layer_pattern[m.end() :]
    return re.compile(re.escape(prefix) + r"(\d+)" + re.escape(suffix))


def infer_layer_index(tmap: TensorMap, layer_pattern: str) -> LayerIndex:
    """Group tensor names by the integer captured from ``layer_pattern``.

    Non-matching names before the first layer tensor (in file order) become
    the embedding group; names after the last become the head group.
    """
    regex = _pattern_regex(layer_pattern)
    names = tmap.names()
    matches: list[int | None] = []
    for name in names:
        m = regex.search(name)
        matches.append(int(m.group(1)) if m else None)

    hit_positions = [i for i, lid in enumerate(matches) if lid is not None]
    if not hit_positions:
        raise PatternError(f"pattern {layer_pattern!r} matched no tensor names")
    first, last = hit_positions[0], hit_positions[-1]

    ids = sorted({lid for lid in matches if lid is not None})
    if ids != list(range(len(ids))):
        raise IndexGapError(f"layer ids {ids} are not contiguous 0..{len(ids) - 1}")

    groups: dict[int, list[str]] = {lid: [] for lid in ids}
    embedding, head = [], []
    for pos, (name, lid) in enumerate(zip(names, matches)):
        if lid is not None:
            groups[lid].append(name)
        elif pos < first:
            embedding.append(name)
        elif pos > last:
            head.append(name)
        else:
            raise PatternError(
                f"tensor {name!r} sits between layer tensors but matches no layer"
            )
    return LayerIndex(
        layer_groups=[(lid, groups[lid]) for lid in ids],
        embedding_names=embedding,
        head_names=head,
    )
