"""Binary persistence: the embedding store and a named-tensor container.

Two file formats live here (byte layouts in ``docs/formats.md``):

* ``CVS3`` -- the embedding store: per recording a matrix of unit-norm
  local embeddings plus its duration.  This is the synchronization point
  between indexing and retrieval.
* ``CVST`` -- a generic ordered name->array container used for model
  parameters and for debug dumps of feature tensors.

Both formats are little-endian, carry a version word and end with a CRC32
over everything that precedes it.  Readers verify the checksum before
constructing any objects, so a corrupt file never yields a partial result.
"""

import io
import struct
import zlib
from collections import OrderedDict

import numpy as np

from .errors import DataIntegrityError, FormatError

STORE_MAGIC = b"CVS3"
STORE_VERSION = 1
TENSOR_MAGIC = b"CVST"
TENSOR_VERSION = 1

UNIT_NORM_TOL = 1e-5

_DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int64"): 2,
    np.dtype("uint32"): 3,
    np.dtype("uint8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated file: unexpected end of data")
    return data


class EmbeddingStore:
    """In-memory map recording_id -> (N x C float32 embeddings, duration).

    Ids are unique, iteration follows insertion order, and every stored row
    must be unit-norm within ``UNIT_NORM_TOL`` (validated again on read).
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        self.dim = int(dim)
        self._records: "OrderedDict[str, tuple[np.ndarray, float]]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, recording_id: str) -> bool:
        return recording_id in self._records

    def ids(self):
        return list(self._records.keys())

    def put(self, recording_id: str, vectors, duration_s: float) -> None:
        if recording_id in self._records:
            raise DataIntegrityError(f"duplicate recording id: {recording_id!r}")
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError("vectors must be a non-empty 2-D matrix")
        if vectors.shape[1] != self.dim:
            raise ValueError(
                f"dimension mismatch: store holds {self.dim}, got {vectors.shape[1]}"
            )
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise DataIntegrityError(
                f"non unit-norm embedding for {recording_id!r} (|norm-1| = {worst:.2e})"
            )
        self._records[recording_id] = (vectors, float(duration_s))

    def get(self, recording_id: str) -> np.ndarray:
        try:
            return self._records[recording_id][0]
        except KeyError:
            raise DataIntegrityError(f"unknown recording id: {recording_id!r}") from None

    def duration(self, recording_id: str) -> float:
        try:
            return self._records[recording_id][1]
        except KeyError:
            raise DataIntegrityError(f"unknown recording id: {recording_id!r}") from None

    def iterate(self):
        """Yield (recording_id, vectors, duration_s) in insertion order."""
        for rid, (vecs, dur) in self._records.items():
            yield rid, vecs, dur

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(STORE_MAGIC)
        out.write(struct.pack("<II", STORE_VERSION, self.dim))
        out.write(struct.pack("<Q", len(self._records)))
        for rid, (vecs, dur) in self._records.items():
            rid_b = rid.encode("utf-8")
            if len(rid_b) > 0xFFFF:
                raise ValueError("recording id too long")
            out.write(struct.pack("<H", len(rid_b)))
            out.write(rid_b)
            out.write(struct.pack("<I", vecs.shape[0]))
            out.write(vecs.astype("<f4").tobytes())
            out.write(struct.pack("<f", dur))
        payload = out.getvalue()
        return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        if len(data) < 4:
            raise FormatError("file too short for a store container")
        payload, crc_bytes = data[:-4], data[-4:]
        if len(payload) < 4 or payload[:4] != STORE_MAGIC:
            raise FormatError("bad magic: not an embedding store file")
        (expected,) = struct.unpack("<I", crc_bytes)
        if zlib.crc32(payload) & 0xFFFFFFFF != expected:
            raise FormatError("checksum mismatch: store file is corrupt")
        buf = io.BytesIO(payload)
        _read_exact(buf, 4)
        version, dim = struct.unpack("<II", _read_exact(buf, 8))
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}")
        (count,) = struct.unpack("<Q", _read_exact(buf, 8))
        store = cls(dim)
        for _ in range(count):
            (rid_len,) = struct.unpack("<H", _read_exact(buf, 2))
            rid = _read_exact(buf, rid_len).decode("utf-8")
            (n,) = struct.unpack("<I", _read_exact(buf, 4))
            raw = _read_exact(buf, n * dim * 4)
            vecs = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
            (dur,) = struct.unpack("<f", _read_exact(buf, 4))
            store.put(rid, vecs, dur)
        if buf.read(1):
            raise FormatError("trailing bytes after last store record")
        return store

    def write_file(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def read_file(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def write_tensors(path, tensors: "dict[str, np.ndarray]") -> None:
    """Write an ordered name->array mapping as a CVST container."""
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<II", TENSOR_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ValueError("tensor name too long")
        out.write(struct.pack("<H", len(name_b)))
        out.write(name_b)
        out.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.write(struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape))
        le = arr.dtype.newbyteorder("<")
        out.write(arr.astype(le, copy=False).tobytes())
    payload = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    """Read a CVST container back into an ordered name->array mapping."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError("file too short for a tensor container")
    payload, crc_bytes = data[:-4], data[-4:]
    if len(payload) < 4 or payload[:4] != TENSOR_MAGIC:
        raise FormatError("bad magic: not a tensor container")
    (expected,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != expected:
        raise FormatError("checksum mismatch: tensor container is corrupt")
    buf = io.BytesIO(payload)
    _read_exact(buf, 4)
    version, count = struct.unpack("<II", _read_exact(buf, 8))
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor container version {version}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(buf, 2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = _read_exact(buf, nbytes)
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
        tensors[name] = arr.reshape(shape)
    if buf.read(1):
        raise FormatError("trailing bytes after last tensor entry")
    return tensors
