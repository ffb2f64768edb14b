"""Deterministic stand-in for the external recognizer services.

This module is deliberately self-contained: it carries its own MessagePack
reader/writer (an iterative, struct-driven implementation, written
independently of fusetrack.wire) and its own socket loop, so that tests can
cross-check the pipeline's codec against a second implementation of the
documented wire format.

Recognition itself is a protocol exercise, not computer vision: synthetic
crops carry a machine-readable pixel strip encoding the ground-truth label
(see docs/protocol.md, "crop tag strip"). The stub scans for the strip and
echoes the label at confidence 1.0; crops without a readable strip answer
("unknown", 0.0).
"""

from __future__ import annotations

import argparse
import socket
import struct
import threading
import time

TAG_MAGIC = (0xB7, 0x1D, 0xC4, 0xFF)  # B, G, R, A of the strip's first pixel
MAX_LABEL_BYTES = 60


class StubDecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# independent MessagePack implementation (subset used by the wire protocol)
# ---------------------------------------------------------------------------

def unpack(data: bytes):
    value, pos = _read_value(data, 0)
    if pos != len(data):
        raise StubDecodeError("trailing bytes")
    return value


def _read_value(data: bytes, pos: int):
    if pos >= len(data):
        raise StubDecodeError("unexpected end of input")
    tag = data[pos]
    pos += 1
    if tag < 0x80:
        return tag, pos
    if tag >= 0xE0:
        return tag - 256, pos
    if 0xA0 <= tag < 0xC0:
        n = tag - 0xA0
        return _take_str(data, pos, n)
    if 0x90 <= tag < 0xA0:
        return _take_array(data, pos, tag - 0x90)
    if 0x80 <= tag < 0x90:
        return _take_map(data, pos, tag - 0x80)
    handlers = {
        0xC0: lambda d, p: (None, p),
        0xC2: lambda d, p: (False, p),
        0xC3: lambda d, p: (True, p),
    }
    if tag in handlers:
        return handlers[tag](data, pos)
    if tag == 0xCB:
        _check(data, pos, 8)
        return struct.unpack_from(">d", data, pos)[0], pos + 8
    if tag in (0xCC, 0xCD, 0xCE, 0xCF):
        width = 2 ** (tag - 0xCC)
        _check(data, pos, width)
        return int.from_bytes(data[pos:pos + width], "big"), pos + width
    if tag in (0xD0, 0xD1, 0xD2, 0xD3):
        width = 2 ** (tag - 0xD0)
        _check(data, pos, width)
        return int.from_bytes(data[pos:pos + width], "big", signed=True), pos + width
    if tag in (0xD9, 0xDA, 0xDB):
        width = (1, 2, 4)[tag - 0xD9]
        _check(data, pos, width)
        n = int.from_bytes(data[pos:pos + width], "big")
        return _take_str(data, pos + width, n)
    if tag in (0xC4, 0xC5, 0xC6):
        width = (1, 2, 4)[tag - 0xC4]
        _check(data, pos, width)
        n = int.from_bytes(data[pos:pos + width], "big")
        _check(data, pos + width, n)
        start = pos + width
        return bytes(data[start:start + n]), start + n
    if tag in (0xDC, 0xDD):
        width = 2 if tag == 0xDC else 4
        _check(data, pos, width)
        n = int.from_bytes(data[pos:pos + width], "big")
        return _take_array(data, pos + width, n)
    if tag in (0xDE, 0xDF):
        width = 2 if tag == 0xDE else 4
        _check(data, pos, width)
        n = int.from_bytes(data[pos:pos + width], "big")
        return _take_map(data, pos + width, n)
    raise StubDecodeError(f"unsupported tag 0x{tag:02x}")


def _check(data: bytes, pos: int, n: int) -> None:
    if pos + n > len(data):
        raise StubDecodeError("unexpected end of input")


def _take_str(data: bytes, pos: int, n: int):
    _check(data, pos, n)
    return data[pos:pos + n].decode("utf-8"), pos + n


def _take_array(data: bytes, pos: int, n: int):
    out = []
    for _ in range(n):
        value, pos = _read_value(data, pos)
        out.append(value)
    return out, pos


def _take_map(data: bytes, pos: int, n: int):
    out = {}
    for _ in range(n):
        key, pos = _read_value(data, pos)
        value, pos = _read_value(data, pos)
        out[key] = value
    return out, pos


def pack(value) -> bytes:
    chunks: list[bytes] = []
    _write_value(value, chunks)
    return b"".join(chunks)


def _write_value(value, chunks: list[bytes]) -> None:
    if value is None:
        chunks.append(b"\xc0")
    elif value is True:
        chunks.append(b"\xc3")
    elif value is False:
        chunks.append(b"\xc2")
    elif isinstance(value, int):
        chunks.append(_pack_int(value))
    elif isinstance(value, float):
        chunks.append(b"\xcb" + struct.pack(">d", value))
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        if len(raw) < 32:
            chunks.append(bytes([0xA0 | len(raw)]) + raw)
        elif len(raw) < 256:
            chunks.append(b"\xd9" + bytes([len(raw)]) + raw)
        elif len(raw) < 65536:
            chunks.append(b"\xda" + struct.pack(">H", len(raw)) + raw)
        else:
            chunks.append(b"\xdb" + struct.pack(">I", len(raw)) + raw)
    elif isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
        if len(raw) < 256:
            chunks.append(b"\xc4" + bytes([len(raw)]) + raw)
        elif len(raw) < 65536:
            chunks.append(b"\xc5" + struct.pack(">H", len(raw)) + raw)
        else:
            chunks.append(b"\xc6" + struct.pack(">I", len(raw)) + raw)
    elif isinstance(value, (list, tuple)):
        n = len(value)
        if n < 16:
            chunks.append(bytes([0x90 | n]))
        elif n < 65536:
            chunks.append(b"\xdc" + struct.pack(">H", n))
        else:
            chunks.append(b"\xdd" + struct.pack(">I", n))
        for item in value:
            _write_value(item, chunks)
    elif isinstance(value, dict):
        n = len(value)
        if n < 16:
            chunks.append(bytes([0x80 | n]))
        elif n < 65536:
            chunks.append(b"\xde" + struct.pack(">H", n))
        else:
            chunks.append(b"\xdf" + struct.pack(">I", n))
        for key in sorted(value, key=lambda k: str(k).encode("utf-8")):
            _write_value(key, chunks)
            _write_value(value[key], chunks)
    else:
        raise StubDecodeError(f"cannot pack {type(value)}")


def _pack_int(value: int) -> bytes:
    if 0 <= value < 128:
        return bytes([value])
    if -32 <= value < 0:
        return struct.pack("b", value)
    for fmt, tag, lo, hi in (
        (">B", 0xCC, 0, 2**8), (">H", 0xCD, 0, 2**16),
        (">I", 0xCE, 0, 2**32), (">Q", 0xCF, 0, 2**64),
    ):
        if lo <= value < hi:
            return bytes([tag]) + struct.pack(fmt, value)
    for fmt, tag, lo in ((">b", 0xD0, -2**7), (">h", 0xD1, -2**15),
                         (">i", 0xD2, -2**31), (">q", 0xD3, -2**63)):
        if value >= lo:
            return bytes([tag]) + struct.pack(fmt, value)
    raise StubDecodeError("integer out of 64-bit range")


# ---------------------------------------------------------------------------
# crop tag strip decoding
# ---------------------------------------------------------------------------

def decode_tag(pixels: bytes, width: int, height: int) -> str | None:
    """Scan a BGRA crop for the tag strip; the embedded label or None."""
    if len(pixels) != width * height * 4:
        return None
    for y in range(height):
        row = y * width * 4
        for x in range(width - 1):
            o = row + x * 4
            if (pixels[o], pixels[o + 1], pixels[o + 2], pixels[o + 3]) == TAG_MAGIC:
                label = _read_strip(pixels, width, x, y)
                if label is not None:
                    return label
    return None


def _read_strip(pixels: bytes, width: int, x: int, y: int) -> str | None:
    header = (y * width + x + 1) * 4
    n = pixels[header]
    checksum = pixels[header + 1]
    if n == 0 or n > MAX_LABEL_BYTES:
        return None
    n_pixels = (n + 3) // 4
    if x + 2 + n_pixels > width:
        return None
    start = header + 4
    raw = pixels[start:start + n_pixels * 4][:n]
    if len(raw) != n:
        return None
    xor = 0
    for b in raw:
        xor ^= b
    if xor != checksum:
        return None
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return None


# ---------------------------------------------------------------------------
# recognizer behaviour
# ---------------------------------------------------------------------------

def recognize(msg: dict, latency_s: float = 0.0) -> dict:
    """Handle one crop message; echoes the embedded label.

    Malformed messages raise StubDecodeError (the server answers an error
    frame and keeps the connection).
    """
    if not isinstance(msg, dict) or msg.get("type") != "crop":
        raise StubDecodeError("expected a crop message")
    for key in ("ts_us", "person_id", "part", "width", "height", "format", "pixels"):
        if key not in msg:
            raise StubDecodeError(f"crop message missing {key!r}")
    if msg["format"] != "bgra8":
        raise StubDecodeError(f"stub only decodes bgra8, got {msg['format']!r}")
    if latency_s > 0:
        time.sleep(latency_s)
    label = decode_tag(msg["pixels"], msg["width"], msg["height"])
    return {
        "type": "result",
        "ts_us": msg["ts_us"],
        "person_id": msg["person_id"],
        "part": msg["part"],
        "label": label if label is not None else "unknown",
        "confidence": 1.0 if label is not None else 0.0,
    }


def make_handler(latency_s: float = 0.0):
    def handler(msg: dict) -> dict:
        return recognize(msg, latency_s=latency_s)
    return handler


class StubServer:
    """Threaded socket server speaking the framed wire protocol."""

    def __init__(self, host: str, port: int, latency_s: float = 0.0):
        self.latency_s = latency_s
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> "StubServer":
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        send_lock = threading.Lock()
        try:
            while not self._stop.is_set():
                head = b""
                while len(head) < 4:
                    chunk = conn.recv(4 - len(head))
                    if not chunk:
                        return
                    head += chunk
                (length,) = struct.unpack("<I", head)
                body = b""
                while len(body) < length:
                    chunk = conn.recv(length - len(body))
                    if not chunk:
                        return
                    body += chunk
                threading.Thread(target=self._answer, args=(conn, body, send_lock),
                                 daemon=True).start()
        except OSError:
            pass
        finally:
            conn.close()

    def _answer(self, conn, body: bytes, send_lock) -> None:
        msg = None
        try:
            msg = unpack(body)
            reply = recognize(msg, latency_s=self.latency_s)
        except Exception as exc:
            reply = {"type": "error", "message": str(exc)}
            if isinstance(msg, dict):
                for key in ("ts_us", "person_id", "part"):
                    if key in msg:
                        reply[key] = msg[key]
        payload = pack(reply)
        try:
            with send_lock:
                conn.sendall(struct.pack("<I", len(payload)) + payload)
        except OSError:
            pass

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="stub recognizer service")
    parser.add_argument("--endpoint", default="tcp://127.0.0.1:7601")
    parser.add_argument("--latency-ms", type=float, default=0.0)
    args = parser.parse_args(argv)
    if not args.endpoint.startswith("tcp://"):
        parser.error("endpoint must be tcp://host:port")
    host, _, port = args.endpoint[len("tcp://"):].rpartition(":")
    server = StubServer(host, int(port), latency_s=args.latency_ms / 1000.0).start()
    print(f"stub recognizer listening on tcp://{host}:{server.port}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
