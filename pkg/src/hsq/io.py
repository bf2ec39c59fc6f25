"""Binary and JSON-lines readers/writers.

All binary formats are little-endian, start with a 5-byte versioned magic and
carry float32 payloads. Readers check that the declared shape matches the
payload length exactly and report byte offsets on failure. Layouts are
documented in ``docs/formats.md``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC_EMBEDDINGS = b"HSQV1"
MAGIC_CHECKPOINT = b"HSQW1"
MAGIC_CODEBOOKS = b"HSQC1"
MAGIC_CODES = b"HSQB1"

_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class FileHeader:
    magic: bytes
    version: int
    shape: tuple
    payload_offset: int


def _parse_header(buf: bytes, path, magic: bytes, fields: str) -> FileHeader:
    if len(buf) < 5:
        raise FormatError(f"{path}: truncated header at offset {len(buf)} (need 5-byte magic)")
    got = buf[:5]
    if got[:4] != magic[:4]:
        raise FormatError(f"{path}: unknown magic {got!r} at offset 0, expected {magic!r}")
    if got != magic:
        raise FormatError(f"{path}: unsupported version {got[4:5]!r} at offset 4, expected {magic!r}")
    size = struct.calcsize("<" + fields)
    if len(buf) < 5 + size:
        raise FormatError(
            f"{path}: truncated header at offset {len(buf)} (header needs {5 + size} bytes)"
        )
    shape = struct.unpack_from("<" + fields, buf, 5)
    return FileHeader(magic=got, version=int(chr(got[4])), shape=shape, payload_offset=5 + size)


def _check_payload(buf: bytes, path, offset: int, expected: int, what: str = "payload"):
    have = len(buf) - offset
    if have < expected:
        raise FormatError(
            f"{path}: truncated {what} at offset {len(buf)}: expected {expected} bytes "
            f"starting at offset {offset}, found {have}"
        )
    if have > expected:
        raise FormatError(
            f"{path}: {have - expected} trailing bytes at offset {offset + expected}"
        )


def _floats(buf: bytes, offset: int, count: int) -> np.ndarray:
    return np.frombuffer(buf, dtype=_F32, count=count, offset=offset).astype(np.float32)


def _write(path, chunks):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for c in chunks:
            fh.write(c)


def _as_f32_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


# -- embeddings (HSQV1) ------------------------------------------------------


def names_path(path) -> Path:
    return Path(str(path) + ".names.jsonl")


def write_embeddings(path, X, names=None):
    """Write an (N, D) matrix; ``names`` (optional) goes to the sidecar file."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValidationError(f"embeddings must be 2-D, got shape {X.shape}")
    N, D = X.shape
    _write(path, [MAGIC_EMBEDDINGS, struct.pack("<II", N, D), _as_f32_bytes(X)])
    if names is not None:
        if len(names) != N:
            raise ValidationError(f"{len(names)} names for {N} embeddings")
        write_jsonl(names_path(path), ({"id": i, "name": str(s)} for i, s in enumerate(names)))


def read_embeddings(path):
    """Return ``(X, names)``; ``names`` is None when no sidecar exists."""
    buf = Path(path).read_bytes()
    hdr = _parse_header(buf, path, MAGIC_EMBEDDINGS, "II")
    N, D = hdr.shape
    expected = N * D * 4
    have = len(buf) - hdr.payload_offset
    if have < expected and D > 0:
        nvals = have // 4
        rec, got = divmod(nvals, D)
        raise FormatError(
            f"{path}: truncated payload at offset {len(buf)}: record {rec} has {got} of {D} "
            f"values (dimension mismatch; header declares N={N}, D={D})"
        )
    _check_payload(buf, path, hdr.payload_offset, expected)
    X = _floats(buf, hdr.payload_offset, N * D).reshape(N, D)
    names = None
    sidecar = names_path(path)
    if sidecar.exists():
        names = [None] * N
        for rec in read_jsonl(sidecar):
            i = int(rec["id"])
            if not 0 <= i < N:
                raise FormatError(f"{sidecar}: id {i} out of range [0, {N})")
            names[i] = str(rec["name"])
    return X, names


# -- checkpoint (HSQW1) ------------------------------------------------------


def write_checkpoint(path, W, m=None, v=None):
    """W_g plus Adam first/second moments, all (D, V) row-major."""
    W = np.asarray(W)
    D, V = W.shape
    m = np.zeros_like(W) if m is None else np.asarray(m)
    v = np.zeros_like(W) if v is None else np.asarray(v)
    if m.shape != W.shape or v.shape != W.shape:
        raise ValidationError("optimizer moments must match W_g shape")
    _write(path, [MAGIC_CHECKPOINT, struct.pack("<II", D, V),
                  _as_f32_bytes(W), _as_f32_bytes(m), _as_f32_bytes(v)])


def read_checkpoint(path):
    buf = Path(path).read_bytes()
    hdr = _parse_header(buf, path, MAGIC_CHECKPOINT, "II")
    D, V = hdr.shape
    block = D * V
    _check_payload(buf, path, hdr.payload_offset, 3 * block * 4)
    off = hdr.payload_offset
    W, m, v = (_floats(buf, off + i * block * 4, block).reshape(D, V) for i in range(3))
    return W, m, v


# -- codebooks (HSQC1) -------------------------------------------------------


def write_codebooks(path, C):
    C = np.asarray(C)
    if C.ndim != 3:
        raise ValidationError(f"codebooks must be (M, K, D), got shape {C.shape}")
    M, K, D = C.shape
    _write(path, [MAGIC_CODEBOOKS, struct.pack("<III", M, K, D), _as_f32_bytes(C)])


def read_codebooks(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    hdr = _parse_header(buf, path, MAGIC_CODEBOOKS, "III")
    M, K, D = hdr.shape
    _check_payload(buf, path, hdr.payload_offset, M * K * D * 4)
    return _floats(buf, hdr.payload_offset, M * K * D).reshape(M, K, D)


# -- codes (HSQB1) -----------------------------------------------------------


def code_bits(K: int) -> int:
    """Bits per subcode: ceil(log2 K), at least 1."""
    if K < 1:
        raise ValidationError(f"K must be positive, got {K}")
    return max(1, math.ceil(math.log2(K)))


def _pack(values: np.ndarray, bits: int) -> bytes:
    if bits == 8:
        return values.astype(np.uint8).tobytes()
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    planes = ((values.astype(np.uint32)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(planes.ravel()).tobytes()


def _unpack(raw: bytes, count: int, bits: int) -> np.ndarray:
    arr = np.frombuffer(raw, dtype=np.uint8)
    if bits == 8:
        return arr[:count].astype(np.int64)
    planes = np.unpackbits(arr)[: count * bits].reshape(count, bits).astype(np.int64)
    return planes @ (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))


def codes_nbytes(N: int, M: int, bits: int) -> int:
    return (N * M * bits + 7) // 8


def write_codes(path, codes, K: int):
    """Codes (N, M) with entries in [0, K); one byte each when log2K = 8."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValidationError(f"codes must be (N, M), got shape {codes.shape}")
    N, M = codes.shape
    _check_code_range(codes, K, "in-memory codes")
    bits = code_bits(K)
    if bits > 16:
        raise ValidationError(f"K={K} needs {bits} bits per subcode; at most 16 supported")
    _write(path, [MAGIC_CODES, struct.pack("<IIB", N, M, bits), _pack(codes.ravel(), bits)])


def read_codes(path, K: int | None = None):
    """Return ``(codes, bits)``. With ``K`` given, every entry is checked < K."""
    buf = Path(path).read_bytes()
    hdr = _parse_header(buf, path, MAGIC_CODES, "IIB")
    N, M, bits = hdr.shape
    if not 1 <= bits <= 16:
        raise FormatError(f"{path}: log2K={bits} at offset 13 outside [1, 16]")
    _check_payload(buf, path, hdr.payload_offset, codes_nbytes(N, M, bits))
    codes = _unpack(buf[hdr.payload_offset:], N * M, bits).reshape(N, M)
    if K is not None:
        if K > (1 << bits):
            raise FormatError(f"{path}: K={K} does not fit log2K={bits}")
        _check_code_range(codes, K, str(path))
    return codes, bits


def _check_code_range(codes, K, where):
    bad = np.argwhere((codes < 0) | (codes >= K))
    if bad.size:
        n, m = bad[0]
        raise ValidationError(
            f"{where}: row {n}, codebook {m} has code {codes[n, m]} outside [0, {K})"
        )


# -- JSON lines --------------------------------------------------------------


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _int_sets(path, key):
    out = {}
    for i, rec in enumerate(read_jsonl(path)):
        try:
            image = int(rec["image"])
            vals = [int(t) for t in rec[key]]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: record {i} needs integer 'image' and '{key}' list") from None
        if image in out:
            raise FormatError(f"{path}: duplicate image id {image} in record {i}")
        out[image] = vals
    return out


def read_assignments(path) -> dict[int, list[int]]:
    """``{"image": id, "tags": [...]}`` per line."""
    return _int_sets(path, "tags")


def write_assignments(path, assignments):
    write_jsonl(path, ({"image": int(k), "tags": [int(t) for t in v]}
                       for k, v in sorted(assignments.items())))


def read_labels(path) -> dict[int, set[int]]:
    """``{"image": id, "labels": [...]}`` per line."""
    return {k: set(v) for k, v in _int_sets(path, "labels").items()}


def write_labels(path, labels):
    write_jsonl(path, ({"image": int(k), "labels": sorted(int(t) for t in v)}
                       for k, v in sorted(labels.items())))


def write_results(path, results):
    """``results`` maps query id -> list of (id, score) in rank order."""
    write_jsonl(path, ({"query": int(q), "results": [[int(i), float(s)] for i, s in ranked]}
                       for q, ranked in results.items()))


def read_results(path) -> dict[int, list[tuple[int, float]]]:
    out = {}
    for i, rec in enumerate(read_jsonl(path)):
        try:
            out[int(rec["query"])] = [(int(a), float(b)) for a, b in rec["results"]]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: record {i} is not a {{query, results}} object") from None
    return out


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
