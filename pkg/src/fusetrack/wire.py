"""Framed binary messaging between the pipeline and recognizer services.

The codec is a canonical MessagePack subset so every value has exactly one
byte representation (required for deterministic session stores and event
hashing):

* integers use the shortest encoding (fixint, then uint8/16/32/64 for
  values >= 0, int8/16/32/64 for negatives);
* floats always encode as float64 (0xcb);
* strings are UTF-8 (fixstr/str8/str16/str32), byte blobs use bin8/16/32;
* map keys must be strings and encode sorted by UTF-8 byte order;
* no ext types, no float32.

Transport framing on TCP: little-endian u32 payload length followed by the
MessagePack bytes. Endpoints are "tcp://host:port" URIs. Requests carry no
broker-level ids; replies correlate by echoing (ts_us, person_id, part).
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable

_U32 = struct.Struct("<I")


class WireError(Exception):
    pass


class SchemaViolationError(WireError):
    pass


class TruncatedPayloadError(WireError):
    pass


class TransportError(WireError):
    pass


class RequestTimeoutError(TransportError):
    pass


class BindFailureError(TransportError):
    pass


# ---------------------------------------------------------------------------
# canonical codec
# ---------------------------------------------------------------------------

def encode(obj) -> bytes:
    out = bytearray()
    _encode_into(obj, out)
    return bytes(out)


def _encode_into(obj, out: bytearray) -> None:
    if obj is None:
        out.append(0xC0)
    elif obj is True:
        out.append(0xC3)
    elif obj is False:
        out.append(0xC2)
    elif isinstance(obj, int):
        _encode_int(obj, out)
    elif isinstance(obj, float):
        out.append(0xCB)
        out += struct.pack(">d", obj)
    elif isinstance(obj, str):
        data = obj.encode("utf-8")
        n = len(data)
        if n <= 31:
            out.append(0xA0 | n)
        elif n <= 0xFF:
            out += struct.pack(">BB", 0xD9, n)
        elif n <= 0xFFFF:
            out += struct.pack(">BH", 0xDA, n)
        else:
            out += struct.pack(">BI", 0xDB, n)
        out += data
    elif isinstance(obj, (bytes, bytearray, memoryview)):
        data = bytes(obj)
        n = len(data)
        if n <= 0xFF:
            out += struct.pack(">BB", 0xC4, n)
        elif n <= 0xFFFF:
            out += struct.pack(">BH", 0xC5, n)
        else:
            out += struct.pack(">BI", 0xC6, n)
        out += data
    elif isinstance(obj, (list, tuple)):
        n = len(obj)
        if n <= 15:
            out.append(0x90 | n)
        elif n <= 0xFFFF:
            out += struct.pack(">BH", 0xDC, n)
        else:
            out += struct.pack(">BI", 0xDD, n)
        for item in obj:
            _encode_into(item, out)
    elif isinstance(obj, dict):
        n = len(obj)
        if n <= 15:
            out.append(0x80 | n)
        elif n <= 0xFFFF:
            out += struct.pack(">BH", 0xDE, n)
        else:
            out += struct.pack(">BI", 0xDF, n)
        for key in obj:
            if not isinstance(key, str):
                raise SchemaViolationError(f"map keys must be strings, got {type(key)}")
        for key in sorted(obj, key=lambda k: k.encode("utf-8")):
            _encode_into(key, out)
            _encode_into(obj[key], out)
    else:
        raise SchemaViolationError(f"cannot encode {type(obj)}")


def _encode_int(value: int, out: bytearray) -> None:
    if 0 <= value <= 0x7F:
        out.append(value)
    elif -32 <= value < 0:
        out.append(value & 0xFF)
    elif value >= 0:
        if value <= 0xFF:
            out += struct.pack(">BB", 0xCC, value)
        elif value <= 0xFFFF:
            out += struct.pack(">BH", 0xCD, value)
        elif value <= 0xFFFFFFFF:
            out += struct.pack(">BI", 0xCE, value)
        elif value <= 0xFFFFFFFFFFFFFFFF:
            out += struct.pack(">BQ", 0xCF, value)
        else:
            raise SchemaViolationError("integer too large for 64-bit encoding")
    else:
        if value >= -0x80:
            out += struct.pack(">Bb", 0xD0, value)
        elif value >= -0x8000:
            out += struct.pack(">Bh", 0xD1, value)
        elif value >= -0x80000000:
            out += struct.pack(">Bi", 0xD2, value)
        elif value >= -0x8000000000000000:
            out += struct.pack(">Bq", 0xD3, value)
        else:
            raise SchemaViolationError("integer too small for 64-bit encoding")


def decode(data: bytes):
    """Decode one value; trailing bytes are a schema violation."""
    view = memoryview(data)
    value, used = _decode_at(view, 0)
    if used != len(view):
        raise SchemaViolationError(f"{len(view) - used} trailing bytes after value")
    return value


def _need(view: memoryview, offset: int, n: int) -> None:
    if offset + n > len(view):
        raise TruncatedPayloadError(f"need {n} bytes at offset {offset}, have {len(view) - offset}")


def _decode_at(view: memoryview, offset: int):
    _need(view, offset, 1)
    tag = view[offset]
    offset += 1
    if tag <= 0x7F:
        return tag, offset
    if tag >= 0xE0:
        return tag - 0x100, offset
    if 0x80 <= tag <= 0x8F:
        return _decode_map(view, offset, tag & 0x0F)
    if 0x90 <= tag <= 0x9F:
        return _decode_array(view, offset, tag & 0x0F)
    if 0xA0 <= tag <= 0xBF:
        return _decode_str(view, offset, tag & 0x1F)
    if tag == 0xC0:
        return None, offset
    if tag == 0xC2:
        return False, offset
    if tag == 0xC3:
        return True, offset
    if tag in (0xC4, 0xC5, 0xC6):
        size = {0xC4: 1, 0xC5: 2, 0xC6: 4}[tag]
        _need(view, offset, size)
        n = int.from_bytes(view[offset:offset + size], "big")
        offset += size
        _need(view, offset, n)
        return bytes(view[offset:offset + n]), offset + n
    if tag == 0xCB:
        _need(view, offset, 8)
        return struct.unpack_from(">d", view, offset)[0], offset + 8
    if tag in (0xCC, 0xCD, 0xCE, 0xCF):
        size = 1 << (tag - 0xCC)
        _need(view, offset, size)
        return int.from_bytes(view[offset:offset + size], "big"), offset + size
    if tag in (0xD0, 0xD1, 0xD2, 0xD3):
        size = 1 << (tag - 0xD0)
        _need(view, offset, size)
        return int.from_bytes(view[offset:offset + size], "big", signed=True), offset + size
    if tag in (0xD9, 0xDA, 0xDB):
        size = {0xD9: 1, 0xDA: 2, 0xDB: 4}[tag]
        _need(view, offset, size)
        n = int.from_bytes(view[offset:offset + size], "big")
        return _decode_str(view, offset + size, n)
    if tag in (0xDC, 0xDD):
        size = 2 if tag == 0xDC else 4
        _need(view, offset, size)
        n = int.from_bytes(view[offset:offset + size], "big")
        return _decode_array(view, offset + size, n)
    if tag in (0xDE, 0xDF):
        size = 2 if tag == 0xDE else 4
        _need(view, offset, size)
        n = int.from_bytes(view[offset:offset + size], "big")
        return _decode_map(view, offset + size, n)
    raise SchemaViolationError(f"unsupported type byte 0x{tag:02x}")


def _decode_str(view: memoryview, offset: int, n: int):
    _need(view, offset, n)
    try:
        return str(view[offset:offset + n], "utf-8"), offset + n
    except UnicodeDecodeError as exc:
        raise SchemaViolationError(f"invalid UTF-8 string: {exc}") from None


def _decode_array(view: memoryview, offset: int, n: int):
    items = []
    for _ in range(n):
        value, offset = _decode_at(view, offset)
        items.append(value)
    return items, offset


def _decode_map(view: memoryview, offset: int, n: int):
    out = {}
    for _ in range(n):
        key, offset = _decode_at(view, offset)
        if not isinstance(key, str):
            raise SchemaViolationError("map keys must be strings")
        value, offset = _decode_at(view, offset)
        out[key] = value
    return out, offset


# ---------------------------------------------------------------------------
# message schemas
# ---------------------------------------------------------------------------

PARTS = ("left_hand", "right_hand", "face")
CROP_FORMATS = ("bgra8", "jpeg")


def _require(msg: dict, key: str, types) -> object:
    if key not in msg:
        raise SchemaViolationError(f"missing required key {key!r}")
    value = msg[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise SchemaViolationError(f"key {key!r} has type {type(value).__name__}")
    return value


def validate_crop(msg: dict) -> dict:
    """Schema check for a crop message; unknown keys are ignored."""
    if _require(msg, "type", str) != "crop":
        raise SchemaViolationError("type must be 'crop'")
    _require(msg, "ts_us", int)
    _require(msg, "person_id", str)
    part = _require(msg, "part", str)
    if part not in PARTS:
        raise SchemaViolationError(f"part must be one of {PARTS}")
    width = _require(msg, "width", int)
    height = _require(msg, "height", int)
    fmt = _require(msg, "format", str)
    if fmt not in CROP_FORMATS:
        raise SchemaViolationError(f"format must be one of {CROP_FORMATS}")
    pixels = _require(msg, "pixels", bytes)
    if fmt == "bgra8" and len(pixels) != width * height * 4:
        raise SchemaViolationError(
            f"bgra8 pixels length {len(pixels)} != {width}x{height}x4")
    return msg


def validate_result(msg: dict) -> dict:
    if _require(msg, "type", str) != "result":
        raise SchemaViolationError("type must be 'result'")
    _require(msg, "ts_us", int)
    _require(msg, "person_id", str)
    part = _require(msg, "part", str)
    if part not in PARTS:
        raise SchemaViolationError(f"part must be one of {PARTS}")
    _require(msg, "label", str)
    confidence = _require(msg, "confidence", (int, float))
    if not 0.0 <= float(confidence) <= 1.0:
        raise SchemaViolationError(f"confidence {confidence} outside [0, 1]")
    return msg


def crop_message(ts_us: int, person_id: str, part: str, width: int, height: int,
                 pixels: bytes, fmt: str = "bgra8") -> dict:
    return validate_crop({
        "type": "crop", "ts_us": ts_us, "person_id": person_id, "part": part,
        "width": width, "height": height, "format": fmt, "pixels": pixels,
    })


def result_message(ts_us: int, person_id: str, part: str, label: str,
                   confidence: float) -> dict:
    return validate_result({
        "type": "result", "ts_us": ts_us, "person_id": person_id, "part": part,
        "label": label, "confidence": float(confidence),
    })


def correlation_key(msg: dict) -> tuple:
    return (msg.get("ts_us"), msg.get("person_id"), msg.get("part"))


# ---------------------------------------------------------------------------
# framing and transport
# ---------------------------------------------------------------------------

def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_U32.pack(len(payload)) + payload)


def read_frame(sock: socket.socket) -> bytes | None:
    """One length-prefixed frame; None on orderly EOF before the header."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (n,) = _U32.unpack(header)
    body = _read_exact(sock, n)
    if body is None:
        raise TruncatedPayloadError(f"connection closed inside a {n}-byte frame")
    return body


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise TruncatedPayloadError(
                    f"connection closed after {len(buf)} of {n} bytes")
            return None
        buf += chunk
    return bytes(buf)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    if not endpoint.startswith("tcp://"):
        raise TransportError(f"unsupported endpoint {endpoint!r} (want tcp://host:port)")
    host, _, port = endpoint[len("tcp://"):].rpartition(":")
    if not host or not port.isdigit():
        raise TransportError(f"malformed endpoint {endpoint!r}")
    return host, int(port)


class RecognizerClient:
    """Request/reply client with at-most-once semantics.

    Requests are pipelined over one connection; replies correlate by
    (ts_us, person_id, part). A request that sees no reply within the
    timeout surfaces as RequestTimeoutError and is never retried (crops are
    perishable).
    """

    def __init__(self, endpoint: str, timeout_s: float = 0.3):
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=5.0)
        except ConnectionRefusedError:
            raise
        except OSError as exc:
            raise TransportError(f"cannot connect to {endpoint}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._replies: dict[tuple, dict] = {}
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                frame = read_frame(self._sock)
                if frame is None:
                    break
                try:
                    msg = decode(frame)
                except WireError:
                    continue
                if isinstance(msg, dict):
                    with self._cond:
                        self._replies[correlation_key(msg)] = msg
                        self._cond.notify_all()
        except OSError:
            pass
        finally:
            with self._cond:
                self._closed = True
                self._cond.notify_all()

    def request(self, msg: dict) -> tuple:
        """Send a message; returns the correlation key to settle on later."""
        key = correlation_key(msg)
        payload = encode(msg)
        try:
            with self._lock:
                write_frame(self._sock, payload)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        return key

    def settle(self, key: tuple, timeout_s: float | None = None) -> dict:
        """Wait for the reply matching `key`; RequestTimeoutError when absent."""
        deadline = timeout_s if timeout_s is not None else self.timeout_s
        with self._cond:
            ok = self._cond.wait_for(
                lambda: key in self._replies or self._closed, timeout=deadline)
            if key in self._replies:
                return self._replies.pop(key)
            if not ok or self._closed:
                raise RequestTimeoutError(f"no reply for {key} within {deadline}s")
            raise RequestTimeoutError(f"no reply for {key} within {deadline}s")

    def close(self) -> None:
        with self._lock:
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class InProcessClient:
    """Drop-in recognizer client that calls the handler synchronously.

    Used for the in-process recognizer placement; behaviour must be
    indistinguishable from the socket client when latency is below the
    timeout.
    """

    def __init__(self, handler: Callable[[dict], dict]):
        self._handler = handler
        self._replies: dict[tuple, dict] = {}

    def request(self, msg: dict) -> tuple:
        # encode/decode round trip keeps the wire contract honest
        key = correlation_key(msg)
        try:
            reply = self._handler(decode(encode(msg)))
        except Exception as exc:  # mirror the socket server's error frames
            reply = {"type": "error", "message": str(exc),
                     "ts_us": msg.get("ts_us"), "person_id": msg.get("person_id"),
                     "part": msg.get("part")}
        self._replies[key] = decode(encode(reply))
        return key

    def settle(self, key: tuple, timeout_s: float | None = None) -> dict:
        try:
            return self._replies.pop(key)
        except KeyError:
            raise RequestTimeoutError(f"no reply recorded for {key}") from None

    def close(self) -> None:
        self._replies.clear()


class MessageServer:
    """Stateless request/reply server: one thread per connection, handler
    called per message, reply written back on the same socket."""

    def __init__(self, endpoint: str, handler: Callable[[dict], dict]):
        self.endpoint = endpoint
        self._handler = handler
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_server((host, port))
        except OSError as exc:
            raise BindFailureError(f"cannot bind {endpoint}: {exc}") from exc
        self._port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    @property
    def port(self) -> int:
        return self._port

    def start(self) -> "MessageServer":
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        write_lock = threading.Lock()
        try:
            while not self._stop.is_set():
                frame = read_frame(conn)
                if frame is None:
                    break
                threading.Thread(
                    target=self._handle_one, args=(conn, frame, write_lock),
                    daemon=True).start()
        except (OSError, WireError):
            pass
        finally:
            conn.close()

    def _handle_one(self, conn, frame: bytes, write_lock) -> None:
        msg = None
        try:
            msg = decode(frame)
            reply = self._handler(msg)
        except Exception as exc:  # malformed input answered, connection kept
            reply = {"type": "error", "message": str(exc)}
            if isinstance(msg, dict):
                reply.update({k: msg[k] for k in ("ts_us", "person_id", "part")
                              if k in msg})
        try:
            with write_lock:
                write_frame(conn, encode(reply))
        except OSError:
            pass

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
