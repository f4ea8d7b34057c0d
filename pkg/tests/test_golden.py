import pytest

from zephyr.errors import MalformedSerialization, WrongRound
from zephyr.net import Op, decode_response, encode_error, encode_ok, encode_request
from zephyr.wire import Reader, Writer

from golden_vectors import build, golden_path

VECTORS = build()
DECODABLE = sorted(name for name, (_, _, dec) in VECTORS.items() if dec is not None)


@pytest.mark.parametrize("name", sorted(VECTORS))
def test_encoder_matches_golden_file(name):
    value, enc, _ = VECTORS[name]
    assert enc(value).hex() == golden_path(name).read_text().strip()


@pytest.mark.parametrize("name", DECODABLE)
def test_golden_file_round_trips_bit_exactly(name):
    value, enc, dec = VECTORS[name]
    data = bytes.fromhex(golden_path(name).read_text().strip())
    decoded = dec(data)
    assert enc(decoded) == data
    assert decoded == value


@pytest.mark.parametrize("name", DECODABLE)
def test_truncation_never_yields_a_value(name):
    _, _, dec = VECTORS[name]
    data = bytes.fromhex(golden_path(name).read_text().strip())
    for cut in range(len(data)):
        with pytest.raises(MalformedSerialization):
            dec(data[:cut])


@pytest.mark.parametrize("name", DECODABLE)
def test_trailing_bytes_rejected(name):
    _, _, dec = VECTORS[name]
    data = bytes.fromhex(golden_path(name).read_text().strip())
    with pytest.raises(MalformedSerialization):
        dec(data + b"\x00")


def test_unknown_version_rejected():
    data = bytearray(bytes.fromhex(golden_path("address_mailbox").read_text().strip()))
    data[0] = 2
    _, _, dec = VECTORS["address_mailbox"]
    with pytest.raises(MalformedSerialization):
        dec(bytes(data))


def test_submit_frame_truncation():
    # onion packets are framed by the request that carries them
    onion = bytes.fromhex(golden_path("onion_packet").read_text().strip())
    frame = encode_request(Op.SUBMIT, Writer().u64(7).u32(1).blob(onion).getvalue())

    def parse(buf):
        r = Reader(buf)
        r.version()
        r.u8("op")
        r.u64("round")
        packets = [r.blob("packet") for _ in range(r.u32("count"))]
        r.done()
        return packets

    assert parse(frame) == [onion]
    for cut in range(len(frame)):
        with pytest.raises(MalformedSerialization):
            parse(frame[:cut])


def test_error_frame_truncation():
    # ok bodies run to the end of the transport frame; error frames are self-delimiting
    assert decode_response(encode_ok(b"payload")) == b"payload"
    frame = encode_error(WrongRound("stale", 9))
    with pytest.raises(WrongRound) as info:
        decode_response(frame)
    assert info.value.current_round == 9
    for cut in range(2, len(frame)):
        with pytest.raises(MalformedSerialization):
            decode_response(frame[:cut])


def test_malformed_error_reports_offset():
    data = bytes.fromhex(golden_path("round_report").read_text().strip())
    with pytest.raises(MalformedSerialization) as info:
        VECTORS["round_report"][2](data[:10])
    assert info.value.offset <= 10
