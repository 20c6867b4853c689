"""Binary framing for robot <-> gateway traffic.

Every message is a fixed 42-byte header followed by ``payload_len`` payload
bytes. Multi-byte header and payload fields are big-endian.

    magic        4s   b"NAOI"
    version      B    1
    msg_type     B    MsgType
    robot_id     16s  UTF-8, NUL padded
    seq          Q
    timestamp_us Q
    payload_len  I

See docs/protocol.md for the payload layouts and hex dumps.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

MAGIC = b"NAOI"
VERSION = 1
HEADER = struct.Struct(">4sBB16sQQI")
HEADER_SIZE = HEADER.size  # 42
ROBOT_ID_SIZE = 16

_FRAME_HEAD = struct.Struct(">HHB")
_ANNOTATION_TAG = b"GT"
_ANNOTATION_HEAD = struct.Struct(">2sH")
_BOX = struct.Struct(">HHHHH")
_RESULT_HEAD = struct.Struct(">QH")
_DETECTION = struct.Struct(">HfHHHH")
_ACTION_HEAD = struct.Struct(">HH")
_MONITOR_HEAD = struct.Struct(">Q")

U16_MAX = 0xFFFF
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF


class MsgType(enum.IntEnum):
    FRAME = 1
    RESULT = 2
    ACTION = 3
    MONITOR = 4
    HELLO = 5
    BYE = 6


class PixelFormat(enum.IntEnum):
    RGB24 = 1


class HelloStatus(enum.IntEnum):
    """Single status byte carried by the gateway's HELLO acknowledgement."""

    OK = 0
    DUPLICATE_ID = 1
    MALFORMED = 2


class EncodingError(ValueError):
    """A message or payload cannot be represented on the wire."""


class ProtocolError(ValueError):
    """The byte stream is not a valid message."""


class IncompleteMessage(Exception):
    """More bytes are needed before a message can be decoded."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more byte(s)")
        self.needed = needed


@dataclass(frozen=True)
class MessageHeader:
    msg_type: MsgType
    robot_id: str
    seq: int
    timestamp_us: int
    payload_len: int
    version: int = VERSION
    magic: bytes = field(default=MAGIC, repr=False)


def _robot_id_bytes(robot_id: str) -> bytes:
    raw = robot_id.encode("utf-8")
    if len(raw) > ROBOT_ID_SIZE or b"\x00" in raw:
        raise EncodingError(f"robot_id {robot_id!r} does not fit the 16-byte field")
    return raw.ljust(ROBOT_ID_SIZE, b"\x00")


def _check_uint(name: str, value: int, limit: int, error=EncodingError) -> None:
    if not 0 <= value <= limit:
        raise error(f"{name}={value} out of range")


def encode_header(header: MessageHeader) -> bytes:
    if header.magic != MAGIC or header.version != VERSION:
        raise EncodingError("bad magic/version")
    try:
        msg_type = MsgType(header.msg_type)
    except ValueError:
        raise EncodingError(f"unknown msg_type {header.msg_type}") from None
    _check_uint("seq", header.seq, U64_MAX)
    _check_uint("timestamp_us", header.timestamp_us, U64_MAX)
    _check_uint("payload_len", header.payload_len, U32_MAX)
    return HEADER.pack(
        MAGIC,
        VERSION,
        msg_type,
        _robot_id_bytes(header.robot_id),
        header.seq,
        header.timestamp_us,
        header.payload_len,
    )


def encode_message(header: MessageHeader, payload: bytes) -> bytes:
    if header.payload_len != len(payload):
        raise EncodingError(
            f"header declares {header.payload_len} payload bytes, got {len(payload)}"
        )
    return encode_header(header) + bytes(payload)


def make_message(
    msg_type: MsgType, robot_id: str, seq: int, timestamp_us: int, payload: bytes = b""
) -> bytes:
    header = MessageHeader(msg_type, robot_id, seq, timestamp_us, len(payload))
    return encode_message(header, payload)


def decode_header(buf: bytes) -> MessageHeader:
    if len(buf) < HEADER_SIZE:
        # a bad magic is detectable before the full header arrives
        if buf[: len(MAGIC)] != MAGIC[: len(buf)]:
            raise ProtocolError("bad magic")
        raise IncompleteMessage(HEADER_SIZE - len(buf))
    magic, version, msg_type, rid, seq, ts, plen = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    name, _, pad = rid.partition(b"\x00")
    if pad.strip(b"\x00"):
        raise ProtocolError("robot_id padding is not zero")
    try:
        robot_id = name.decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("robot_id is not UTF-8") from None
    return MessageHeader(msg_type, robot_id, seq, ts, plen)


def decode_one(buf: bytes) -> tuple[MessageHeader, bytes, int]:
    """Decode the message at the start of ``buf``; also return bytes consumed."""
    header = decode_header(buf)
    end = HEADER_SIZE + header.payload_len
    if len(buf) < end:
        raise IncompleteMessage(end - len(buf))
    return header, bytes(buf[HEADER_SIZE:end]), end


def decode_message(buf: bytes) -> tuple[MessageHeader, bytes]:
    header, payload, _ = decode_one(buf)
    return header, payload


class MessageDecoder:
    """Incremental decoder for a TCP byte stream.

    After a ProtocolError the stream is unusable; callers should close it.
    """

    def __init__(self, max_payload: int = 64 * 1024 * 1024):
        self._buf = bytearray()
        self.max_payload = max_payload

    def feed(self, data: bytes) -> list[tuple[MessageHeader, bytes]]:
        self._buf += data
        out = []
        while True:
            try:
                header = decode_header(self._buf)
            except IncompleteMessage:
                break
            if header.payload_len > self.max_payload:
                raise ProtocolError(f"payload_len {header.payload_len} too large")
            end = HEADER_SIZE + header.payload_len
            if len(self._buf) < end:
                break
            out.append((header, bytes(self._buf[HEADER_SIZE:end])))
            del self._buf[:end]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


# --- payloads ---------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Labelled axis-aligned box; the bottom-right corner is exclusive."""

    label_id: int
    x0: int
    y0: int
    x1: int
    y1: int


@dataclass(frozen=True)
class FramePayload:
    width: int
    height: int
    pixels: bytes
    pixel_format: int = PixelFormat.RGB24
    # ground truth embedded by the simulator; consumed by the oracle detector
    annotation: tuple[Box, ...] | None = None


def encode_frame(frame: FramePayload) -> bytes:
    if frame.pixel_format != PixelFormat.RGB24:
        raise EncodingError(f"unsupported pixel format {frame.pixel_format}")
    if not (1 <= frame.width <= U16_MAX and 1 <= frame.height <= U16_MAX):
        raise EncodingError(f"bad geometry {frame.width}x{frame.height}")
    if len(frame.pixels) != frame.width * frame.height * 3:
        raise EncodingError("pixel buffer length != width*height*3")
    parts = [_FRAME_HEAD.pack(frame.width, frame.height, frame.pixel_format), frame.pixels]
    if frame.annotation is not None:
        boxes = frame.annotation
        if len(boxes) > U16_MAX:
            raise EncodingError("too many annotation boxes")
        parts.append(_ANNOTATION_HEAD.pack(_ANNOTATION_TAG, len(boxes)))
        for b in boxes:
            _check_box(b.x0, b.y0, b.x1, b.y1, frame.width, frame.height, EncodingError)
            _check_uint("label_id", b.label_id, U16_MAX)
            parts.append(_BOX.pack(b.label_id, b.x0, b.y0, b.x1, b.y1))
    return b"".join(parts)


def decode_frame(payload: bytes) -> FramePayload:
    if len(payload) < _FRAME_HEAD.size:
        raise ProtocolError("frame payload too short")
    width, height, fmt = _FRAME_HEAD.unpack_from(payload)
    if fmt != PixelFormat.RGB24:
        raise ProtocolError(f"unsupported pixel format {fmt}")
    if width < 1 or height < 1:
        raise ProtocolError(f"bad geometry {width}x{height}")
    end = _FRAME_HEAD.size + width * height * 3
    if len(payload) < end:
        raise ProtocolError("pixel buffer truncated")
    pixels = bytes(payload[_FRAME_HEAD.size : end])
    annotation = None
    rest = payload[end:]
    if rest:
        if len(rest) < _ANNOTATION_HEAD.size:
            raise ProtocolError("trailing bytes after pixels")
        tag, count = _ANNOTATION_HEAD.unpack_from(rest)
        if tag != _ANNOTATION_TAG or len(rest) != _ANNOTATION_HEAD.size + count * _BOX.size:
            raise ProtocolError("malformed annotation block")
        boxes = []
        for i in range(count):
            label, x0, y0, x1, y1 = _BOX.unpack_from(rest, _ANNOTATION_HEAD.size + i * _BOX.size)
            _check_box(x0, y0, x1, y1, width, height, ProtocolError)
            boxes.append(Box(label, x0, y0, x1, y1))
        annotation = tuple(boxes)
    return FramePayload(width, height, pixels, PixelFormat(fmt), annotation)


@dataclass(frozen=True)
class Detection:
    """Labelled box with a confidence; the bottom-right corner is exclusive."""

    label_id: int
    confidence: float
    x0: int
    y0: int
    x1: int
    y1: int


@dataclass(frozen=True)
class ResultPayload:
    frame_seq: int
    detections: tuple[Detection, ...] = ()


def _check_box(x0, y0, x1, y1, width=None, height=None, error=ProtocolError) -> None:
    if not (x0 < x1 and y0 < y1):
        raise error(f"degenerate box ({x0},{y0})-({x1},{y1})")
    if width is not None and (x1 > width or y1 > height):
        raise error(f"box ({x0},{y0})-({x1},{y1}) outside {width}x{height}")


def encode_result(result: ResultPayload) -> bytes:
    _check_uint("frame_seq", result.frame_seq, U64_MAX)
    if len(result.detections) > U16_MAX:
        raise EncodingError("too many detections")
    parts = [_RESULT_HEAD.pack(result.frame_seq, len(result.detections))]
    for d in result.detections:
        if not 0.0 <= d.confidence <= 1.0:
            raise EncodingError(f"confidence {d.confidence} outside [0, 1]")
        _check_uint("label_id", d.label_id, U16_MAX)
        for v in (d.x0, d.y0, d.x1, d.y1):
            _check_uint("coordinate", v, U16_MAX)
        _check_box(d.x0, d.y0, d.x1, d.y1, error=EncodingError)
        parts.append(_DETECTION.pack(d.label_id, d.confidence, d.x0, d.y0, d.x1, d.y1))
    return b"".join(parts)


def decode_result(payload: bytes) -> ResultPayload:
    if len(payload) < _RESULT_HEAD.size:
        raise ProtocolError("result payload too short")
    frame_seq, count = _RESULT_HEAD.unpack_from(payload)
    if len(payload) != _RESULT_HEAD.size + count * _DETECTION.size:
        raise ProtocolError("result payload length does not match detection count")
    dets = []
    for i in range(count):
        label, conf, x0, y0, x1, y1 = _DETECTION.unpack_from(
            payload, _RESULT_HEAD.size + i * _DETECTION.size
        )
        if not 0.0 <= conf <= 1.0:  # also rejects NaN
            raise ProtocolError(f"confidence {conf} outside [0, 1]")
        _check_box(x0, y0, x1, y1)
        dets.append(Detection(label, conf, x0, y0, x1, y1))
    return ResultPayload(frame_seq, tuple(dets))


@dataclass(frozen=True)
class ActionPayload:
    action_id: int
    args: str = ""


def encode_action(action: ActionPayload) -> bytes:
    _check_uint("action_id", action.action_id, U16_MAX)
    raw = action.args.encode("utf-8")
    if len(raw) > U16_MAX:
        raise EncodingError("action args too long")
    return _ACTION_HEAD.pack(action.action_id, len(raw)) + raw


def decode_action(payload: bytes) -> ActionPayload:
    if len(payload) < _ACTION_HEAD.size:
        raise ProtocolError("action payload too short")
    action_id, n = _ACTION_HEAD.unpack_from(payload)
    if len(payload) != _ACTION_HEAD.size + n:
        raise ProtocolError("action args length mismatch")
    try:
        args = payload[_ACTION_HEAD.size :].decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("action args are not UTF-8") from None
    return ActionPayload(action_id, args)


def encode_monitor(frame_seq: int, frame: FramePayload) -> bytes:
    """MONITOR payload: the echoed frame seq, then an overlaid frame payload."""
    _check_uint("frame_seq", frame_seq, U64_MAX)
    return _MONITOR_HEAD.pack(frame_seq) + encode_frame(frame)


def decode_monitor(payload: bytes) -> tuple[int, FramePayload]:
    if len(payload) < _MONITOR_HEAD.size:
        raise ProtocolError("monitor payload too short")
    (frame_seq,) = _MONITOR_HEAD.unpack_from(payload)
    return frame_seq, decode_frame(payload[_MONITOR_HEAD.size :])


def encode_hello_ack(status: HelloStatus) -> bytes:
    return bytes([status])


def decode_hello_ack(payload: bytes) -> HelloStatus:
    if len(payload) != 1:
        raise ProtocolError("hello ack must carry exactly one status byte")
    try:
        return HelloStatus(payload[0])
    except ValueError:
        raise ProtocolError(f"unknown hello status {payload[0]}") from None


PAYLOAD_DECODERS = {
    MsgType.FRAME: decode_frame,
    MsgType.RESULT: decode_result,
    MsgType.ACTION: decode_action,
    MsgType.MONITOR: decode_monitor,
}
