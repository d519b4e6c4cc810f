"""Framed wire format for split training, plus checkpoint files.

Every frame is magic ``BSL1`` (the big-endian bytes of 0x42534C31), one
type byte, a little-endian uint32 payload length, then the payload. Types
0..3 travel on the wire (sync, smashed data, gradient, close); type 4 is
used only inside checkpoint files and is rejected by the wire decoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binary import PackedBitTensor
from .errors import DecodeError

MAGIC = b"BSL1"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 30

TYPE_SYNC = 0
TYPE_SMASHED = 1
TYPE_GRAD = 2
TYPE_CLOSE = 3
TYPE_CHECKPOINT = 4  # file-only

_HEADER = struct.Struct("<4sBI")

_PAYLOAD_PACKED = 0
_PAYLOAD_REAL = 1


def encode_frame(ftype: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise DecodeError(f"payload of {len(payload)} bytes exceeds cap {MAX_PAYLOAD}")
    return _HEADER.pack(MAGIC, ftype, len(payload)) + payload


def decode_frame_header(buf: bytes) -> tuple[int, int]:
    """Parse (type, payload length) from a 9-byte header."""
    if len(buf) < _HEADER.size:
        raise DecodeError(f"frame header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, ftype, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if length > MAX_PAYLOAD:
        raise DecodeError(f"declared payload {length} exceeds cap {MAX_PAYLOAD}")
    return ftype, length


def _encode_real(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float32)
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f4").tobytes()


def _decode_real(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise DecodeError("real tensor truncated before rank")
    (rank,) = struct.unpack_from("<I", buf, 0)
    if rank == 0 or rank > 8:
        raise DecodeError(f"real tensor rank {rank} out of range")
    if len(buf) < 4 + 4 * rank:
        raise DecodeError("real tensor truncated in extents")
    dims = struct.unpack_from(f"<{rank}I", buf, 4)
    n = int(np.prod(dims))
    body = buf[4 + 4 * rank :]
    if len(body) != n * 4:
        raise DecodeError(f"real tensor for dims {dims} needs {n * 4} bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)


@dataclass
class SyncMessage:
    """Handshake: both ends must agree on every field before training."""

    batch_size: int
    learning_rate: float
    epochs: int
    split_shape: tuple[int, ...]
    protocol_version: int = PROTOCOL_VERSION

    def fields(self) -> dict:
        return {
            "protocol_version": self.protocol_version,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "split_shape": list(self.split_shape),
        }


@dataclass
class SmashedMessage:
    """Client -> server: split activations for one batch, labels riding along."""

    batch_id: int
    payload: PackedBitTensor | np.ndarray
    labels: np.ndarray  # uint8

    @property
    def is_packed(self) -> bool:
        return isinstance(self.payload, PackedBitTensor)


@dataclass
class GradMessage:
    """Server -> client: loss gradient w.r.t. the split activations."""

    batch_id: int
    grad: np.ndarray
    loss: float = 0.0


@dataclass
class CloseMessage:
    """Orderly teardown; the reason is empty on clean shutdown."""

    reason: str = ""


Message = SyncMessage | SmashedMessage | GradMessage | CloseMessage


def serialize(msg: Message) -> bytes:
    """Encode a message as one complete frame."""
    if isinstance(msg, SyncMessage):
        payload = json.dumps(msg.fields(), sort_keys=True).encode("utf-8")
        return encode_frame(TYPE_SYNC, payload)
    if isinstance(msg, SmashedMessage):
        labels = np.ascontiguousarray(msg.labels, dtype=np.uint8)
        if msg.is_packed:
            block = msg.payload.to_bytes()
            kind = _PAYLOAD_PACKED
        else:
            block = _encode_real(msg.payload)
            kind = _PAYLOAD_REAL
        payload = (
            struct.pack("<QBI", msg.batch_id, kind, len(block))
            + block
            + struct.pack("<I", labels.size)
            + labels.tobytes()
        )
        return encode_frame(TYPE_SMASHED, payload)
    if isinstance(msg, GradMessage):
        block = _encode_real(msg.grad)
        payload = (
            struct.pack("<QfI", msg.batch_id, msg.loss, len(block)) + block
        )
        return encode_frame(TYPE_GRAD, payload)
    if isinstance(msg, CloseMessage):
        return encode_frame(TYPE_CLOSE, msg.reason.encode("utf-8"))
    raise DecodeError(f"cannot serialize {type(msg).__name__}")


def decode_payload(ftype: int, payload: bytes) -> Message:
    """Decode one frame payload into its message."""
    if ftype == TYPE_SYNC:
        try:
            f = json.loads(payload.decode("utf-8"))
            return SyncMessage(
                batch_size=int(f["batch_size"]),
                learning_rate=float(f["learning_rate"]),
                epochs=int(f["epochs"]),
                split_shape=tuple(int(d) for d in f["split_shape"]),
                protocol_version=int(f["protocol_version"]),
            )
        except (ValueError, KeyError, TypeError) as e:
            raise DecodeError(f"malformed sync payload: {e}") from None
    if ftype == TYPE_SMASHED:
        if len(payload) < 13:
            raise DecodeError("smashed payload truncated in header")
        batch_id, kind, blen = struct.unpack_from("<QBI", payload, 0)
        off = 13
        if len(payload) < off + blen + 4:
            raise DecodeError("smashed payload truncated in tensor block")
        block = payload[off : off + blen]
        off += blen
        if kind == _PAYLOAD_PACKED:
            tensor: PackedBitTensor | np.ndarray = PackedBitTensor.from_bytes(block)
        elif kind == _PAYLOAD_REAL:
            tensor = _decode_real(block)
        else:
            raise DecodeError(f"unknown smashed payload kind {kind}")
        (n_labels,) = struct.unpack_from("<I", payload, off)
        off += 4
        if len(payload) != off + n_labels:
            raise DecodeError(f"expected {n_labels} label bytes, got {len(payload) - off}")
        labels = np.frombuffer(payload, dtype=np.uint8, count=n_labels, offset=off).copy()
        return SmashedMessage(batch_id=batch_id, payload=tensor, labels=labels)
    if ftype == TYPE_GRAD:
        if len(payload) < 16:
            raise DecodeError("grad payload truncated in header")
        batch_id, loss, blen = struct.unpack_from("<QfI", payload, 0)
        block = payload[16:]
        if len(block) != blen:
            raise DecodeError(f"grad block length {len(block)} != declared {blen}")
        return GradMessage(batch_id=batch_id, grad=_decode_real(block), loss=float(loss))
    if ftype == TYPE_CLOSE:
        return CloseMessage(reason=payload.decode("utf-8"))
    raise DecodeError(f"unknown frame type {ftype}")


def deserialize(buf: bytes) -> Message:
    """Decode exactly one whole frame; trailing bytes are an error."""
    ftype, length = decode_frame_header(buf)
    if len(buf) != _HEADER.size + length:
        raise DecodeError(
            f"frame declares {length} payload bytes but {len(buf) - _HEADER.size} present"
        )
    return decode_payload(ftype, buf[_HEADER.size :])


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays as a checkpoint framed like the wire format."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        block = _encode_real(arr)
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<I", len(block)) + block)
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, TYPE_CHECKPOINT, len(payload)))
        f.write(payload)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint."""
    buf = Path(path).read_bytes()
    ftype, length = decode_frame_header(buf)
    if ftype != TYPE_CHECKPOINT:
        raise DecodeError(f"not a checkpoint file: frame type {ftype}")
    payload = buf[_HEADER.size :]
    if len(payload) != length:
        raise DecodeError(f"checkpoint declares {length} bytes, file has {len(payload)}")
    (count,) = struct.unpack_from("<I", payload, 0)
    off = 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off : off + nlen].decode("utf-8")
        off += nlen
        (blen,) = struct.unpack_from("<I", payload, off)
        off += 4
        arrays[name] = _decode_real(payload[off : off + blen])
        off += blen
    if off != len(payload):
        raise DecodeError(f"checkpoint has {len(payload) - off} trailing bytes")
    return arrays
