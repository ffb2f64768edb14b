import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusetrack import stub_recognizer, wire
from fusetrack.wire import (
    InProcessClient,
    MessageServer,
    RecognizerClient,
    RequestTimeoutError,
    SchemaViolationError,
    TruncatedPayloadError,
    crop_message,
    decode,
    encode,
    result_message,
    validate_crop,
    validate_result,
)

# golden bytes: canonical encodings frozen by hand from the format notes
GOLDEN = [
    (None, b"\xc0"),
    (True, b"\xc3"),
    (False, b"\xc2"),
    (0, b"\x00"),
    (127, b"\x7f"),
    (128, b"\xcc\x80"),
    (-1, b"\xff"),
    (-32, b"\xe0"),
    (-33, b"\xd0\xdf"),
    (65535, b"\xcd\xff\xff"),
    (65536, b"\xce\x00\x01\x00\x00"),
    (1.5, b"\xcb?\xf8\x00\x00\x00\x00\x00\x00"),
    ("", b"\xa0"),
    ("abc", b"\xa3abc"),
    (b"\x01\x02", b"\xc4\x02\x01\x02"),
    ([1, "a"], b"\x92\x01\xa1a"),
    ({"b": 1, "a": 2}, b"\x82\xa1a\x02\xa1b\x01"),  # keys sorted
]


@pytest.mark.parametrize("value,blob", GOLDEN)
def test_golden_encodings(value, blob):
    assert encode(value) == blob
    assert decode(blob) == value


wire_values = st.recursive(
    st.none() | st.booleans()
    | st.integers(min_value=-(2**63), max_value=2**64 - 1)
    | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=40)
    | st.binary(max_size=80),
    lambda children: st.lists(children, max_size=6)
    | st.dictionaries(st.text(max_size=12), children, max_size=6),
    max_leaves=25,
)


@given(wire_values)
@settings(max_examples=300, deadline=None)
def test_round_trip_identity(value):
    blob = encode(value)
    back = decode(blob)
    assert back == _listify(value)
    # canonical: re-encoding the decoded value gives identical bytes
    assert encode(back) == blob


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    if isinstance(value, list):
        return [_listify(v) for v in value]
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    return value


@given(wire_values)
@settings(max_examples=200, deadline=None)
def test_cross_implementation_agreement(value):
    # pipeline encoder -> stub decoder, stub encoder -> pipeline decoder
    assert stub_recognizer.unpack(encode(value)) == _listify(value)
    assert decode(stub_recognizer.pack(value)) == _listify(value)
    assert stub_recognizer.pack(value) == encode(value)


def test_truncated_payload():
    blob = encode({"a": [1, 2, 3], "b": "hello"})
    for cut in range(1, len(blob)):
        with pytest.raises((TruncatedPayloadError, SchemaViolationError)):
            decode(blob[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(SchemaViolationError):
        decode(encode(1) + b"\x00")


def test_non_string_map_keys_rejected():
    with pytest.raises(SchemaViolationError):
        encode({1: "x"})


class TestSchemas:
    def test_result_round_trip(self):
        msg = result_message(123456, "7", "face", "alice", 0.93)
        assert decode(encode(msg)) == msg

    def test_crop_round_trip_and_cross_decode(self, rng):
        for _ in range(50):
            w = int(rng.integers(1, 24))
            h = int(rng.integers(1, 24))
            msg = crop_message(int(rng.integers(0, 2**48)), str(rng.integers(0, 99)),
                               ("left_hand", "right_hand", "face")[int(rng.integers(0, 3))],
                               w, h, bytes(rng.integers(0, 256, w * h * 4, dtype=np.uint8)))
            blob = encode(msg)
            assert decode(blob) == msg
            assert stub_recognizer.unpack(blob) == msg

    def test_pixel_length_mismatch_rejected(self):
        with pytest.raises(SchemaViolationError):
            crop_message(1, "0", "face", 4, 4, b"\x00" * 10)

    def test_missing_required_key_rejected(self):
        msg = result_message(1, "0", "face", "x", 1.0)
        del msg["label"]
        with pytest.raises(SchemaViolationError):
            validate_result(msg)

    def test_unknown_keys_ignored(self):
        msg = result_message(1, "0", "face", "x", 1.0)
        msg["extra_field"] = [1, 2, 3]
        assert validate_result(msg) is msg

    def test_bad_part_rejected(self):
        with pytest.raises(SchemaViolationError):
            result_message(1, "0", "torso", "x", 1.0)

    def test_confidence_range(self):
        with pytest.raises(SchemaViolationError):
            result_message(1, "0", "face", "x", 1.5)


class TestTransport:
    def test_echo_round_trip(self):
        server = MessageServer("tcp://127.0.0.1:0", lambda m: dict(m, label="seen")).start()
        try:
            client = RecognizerClient(f"tcp://127.0.0.1:{server.port}")
            msg = result_message(10, "3", "face", "x", 0.5)
            key = client.request(msg)
            reply = client.settle(key, timeout_s=2.0)
            assert reply["label"] == "seen" and reply["ts_us"] == 10
            client.close()
        finally:
            server.stop()

    def test_timeout_when_server_never_replies(self):
        # handler blocks longer than the client timeout
        server = MessageServer("tcp://127.0.0.1:0",
                               lambda m: (threading.Event().wait(1.0), m)[1]).start()
        try:
            client = RecognizerClient(f"tcp://127.0.0.1:{server.port}", timeout_s=0.15)
            key = client.request(result_message(1, "0", "face", "x", 1.0))
            with pytest.raises(RequestTimeoutError):
                client.settle(key)
            client.close()
        finally:
            server.stop()

    def test_connection_refused(self):
        with pytest.raises((ConnectionRefusedError, wire.TransportError)):
            RecognizerClient("tcp://127.0.0.1:1")  # port 1 never listens

    def test_concurrent_in_flight_correlation(self):
        server = MessageServer(
            "tcp://127.0.0.1:0",
            lambda m: result_message(m["ts_us"], m["person_id"], m["part"],
                                     f"echo-{m['ts_us']}", 1.0)).start()
        try:
            client = RecognizerClient(f"tcp://127.0.0.1:{server.port}", timeout_s=3.0)
            keys = []
            for i in range(100):
                msg = crop_message(i, str(i % 7), ("left_hand", "right_hand", "face")[i % 3],
                                   4, 4, bytes(64))
                keys.append((i, client.request(msg)))
            for i, key in keys:
                reply = client.settle(key, timeout_s=3.0)
                assert reply["label"] == f"echo-{i}"
                assert reply["ts_us"] == i
            client.close()
        finally:
            server.stop()

    def test_malformed_message_answered_with_error_frame(self):
        server = MessageServer("tcp://127.0.0.1:0",
                               stub_recognizer.make_handler()).start()
        try:
            client = RecognizerClient(f"tcp://127.0.0.1:{server.port}")
            bad = {"type": "crop", "ts_us": 5, "person_id": "1", "part": "face"}
            key = client.request(bad)
            reply = client.settle(key, timeout_s=2.0)
            assert reply["type"] == "error"
        finally:
            client.close()
            server.stop()

    def test_in_process_client_equivalence(self):
        handler = stub_recognizer.make_handler()
        client = InProcessClient(handler)
        msg = crop_message(9, "2", "face", 4, 4, bytes(64))
        reply = client.settle(client.request(msg))
        assert reply == handler(msg)
