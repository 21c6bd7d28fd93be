"""Binary checkpoints and JSON-lines token corpora.

Checkpoint layout (all integers unsigned 64-bit little-endian)::

    b"FARTS001" | meta_len | meta JSON (utf-8) | tensor blocks...
    block = name_len | name | rank | dims[rank] | float32 LE payload

``metadata["content_hash"]`` is the SHA-256 of the concatenated tensor blocks.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, CorruptionError, FormatError, VocabError

MAGIC = b"FARTS001"
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(_pack_tensors(self.tensors)).hexdigest()


def _pack_tensors(tensors: dict) -> bytes:
    parts = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        key = name.encode("utf-8")
        parts.append(_U64.pack(len(key)) + key + _U64.pack(arr.ndim))
        parts.append(b"".join(_U64.pack(n) for n in arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_tensors(buf: bytes) -> dict:
    out = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptionError("truncated tensor block")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = _U64.unpack(take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = _U64.unpack(take(8))
        shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Serialize; returns the content hash written into the metadata."""
    body = _pack_tensors(ckpt.tensors)
    digest = hashlib.sha256(body).hexdigest()
    meta = dict(ckpt.metadata, content_hash=digest)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write(path, MAGIC + _U64.pack(len(meta_bytes)) + meta_bytes + body)
    ckpt.metadata = meta
    return digest


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    head = buf[:len(MAGIC)]
    if head != MAGIC:
        if len(head) < len(MAGIC) and MAGIC.startswith(head) and head:
            raise CorruptionError(f"{path}: truncated header")
        raise FormatError(f"{path}: not a checkpoint (bad magic {head!r})")
    if len(buf) < len(MAGIC) + 8:
        raise CorruptionError(f"{path}: truncated header")
    (mlen,) = _U64.unpack(buf[8:16])
    if 16 + mlen > len(buf):
        raise CorruptionError(f"{path}: truncated metadata")
    try:
        meta = json.loads(buf[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata") from exc
    body = buf[16 + mlen:]
    if hashlib.sha256(body).hexdigest() != meta.get("content_hash"):
        raise CorruptionError(f"{path}: content hash mismatch")
    return Checkpoint(metadata=meta, tensors=_unpack_tensors(body))


@dataclass
class TokenCorpus:
    sequences: list            # list of int arrays
    labels: list               # list of int | None
    source_vq_checksum: str
    codebook_size: int

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        for s in self.sequences:
            if s.size and (s.min() < 0 or s.max() >= self.codebook_size):
                raise VocabError("token outside the codebook")

    def __len__(self):
        return len(self.sequences)


def save_corpus(path, corpus: TokenCorpus) -> None:
    """JSON lines ``{"tokens": [...], "class": int|null}`` plus ``<path>.hash`` sidecar."""
    lines = [json.dumps({"tokens": s.tolist(), "class": None if c is None else int(c)},
                        separators=(",", ":")) for s, c in zip(corpus.sequences, corpus.labels)]
    body = ("\n".join(lines) + "\n").encode("utf-8")
    sidecar = {"source_vq_checksum": corpus.source_vq_checksum, "codebook_size": corpus.codebook_size,
               "corpus_sha256": hashlib.sha256(body).hexdigest()}
    atomic_write(path, body)
    atomic_write(str(path) + ".hash", json.dumps(sidecar, sort_keys=True).encode("utf-8"))


def load_corpus(path, expected_vq_checksum: str | None = None) -> TokenCorpus:
    body = Path(path).read_bytes()
    side_path = Path(str(path) + ".hash")
    if not side_path.exists():
        raise FormatError(f"{path}: missing sidecar hash file")
    side = json.loads(side_path.read_text())
    if hashlib.sha256(body).hexdigest() != side["corpus_sha256"]:
        raise CorruptionError(f"{path}: corpus content does not match its sidecar hash")
    if expected_vq_checksum is not None and side["source_vq_checksum"] != expected_vq_checksum:
        raise ChecksumError(f"{path}: corpus was built from a different Stage-I checkpoint")
    seqs, labels = [], []
    for line in body.decode("utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            seqs.append(rec["tokens"])
            labels.append(rec["class"])
    return TokenCorpus(seqs, labels, side["source_vq_checksum"], int(side["codebook_size"]))
