import random

import pytest

from meshgate import netmodel as nm


def random_frame(rng: random.Random) -> nm.LinkFrame:
    return nm.LinkFrame(
        dst_short=rng.randrange(0, 0x10000),
        src_short=rng.randrange(0, 0x10000),
        seq=rng.randrange(0, 256),
        frame_type=rng.choice(list(nm.FrameType)),
        payload=bytes(rng.randrange(256) for _ in range(rng.randrange(0, 122))),
    )


class TestLinkFrame:
    def test_header_only_is_six_bytes(self):
        frame = nm.LinkFrame(0x0002, 0x0001, 0, nm.FrameType.DATA, b"")
        encoded = nm.encode_link_frame(frame)
        assert len(encoded) == 6
        assert encoded == bytes([0x00, 0x02, 0x00, 0x01, 0x00, 0x01])

    def test_full_payload_hits_mtu(self):
        frame = nm.LinkFrame(1, 2, 3, nm.FrameType.DATA, bytes(121))
        assert len(nm.encode_link_frame(frame)) == 127

    def test_payload_one_past_boundary(self):
        frame = nm.LinkFrame(1, 2, 3, nm.FrameType.DATA, bytes(122))
        with pytest.raises(nm.OversizedPayload):
            nm.encode_link_frame(frame)

    def test_roundtrip_random(self):
        rng = random.Random(1)
        for _ in range(1000):
            frame = random_frame(rng)
            assert nm.decode_link_frame(nm.encode_link_frame(frame)) == frame

    def test_truncated(self):
        with pytest.raises(nm.Truncated):
            nm.decode_link_frame(bytes(5))

    def test_oversized(self):
        with pytest.raises(nm.Oversized):
            nm.decode_link_frame(bytes(128))


def random_ipv6(rng: random.Random, max_payload=1240) -> nm.Ipv6Packet:
    return nm.Ipv6Packet(
        src=bytes(rng.randrange(256) for _ in range(16)),
        dst=bytes(rng.randrange(256) for _ in range(16)),
        next_header=rng.randrange(256),
        hop_limit=rng.randrange(256),
        payload=bytes(rng.randrange(256) for _ in range(rng.randrange(0, max_payload + 1))),
    )


class TestIpv6:
    def test_empty_payload_is_forty_bytes(self):
        packet = nm.Ipv6Packet(bytes(16), bytes(16), 6, 64, b"")
        assert len(nm.encode_ipv6(packet)) == 40

    def test_roundtrip_random(self):
        rng = random.Random(2)
        for _ in range(500):
            packet = random_ipv6(rng)
            assert nm.decode_ipv6(nm.encode_ipv6(packet)) == packet

    def test_mtu_ceiling(self):
        packet = nm.Ipv6Packet(bytes(16), bytes(16), 6, 64, bytes(1241))
        with pytest.raises(nm.OversizedPayload):
            nm.encode_ipv6(packet)
        with pytest.raises(nm.Oversized):
            nm.decode_ipv6(bytes(1281))

    def test_truncated(self):
        with pytest.raises(nm.Truncated):
            nm.decode_ipv6(bytes(39))


def oracle_ones_complement_checksum(header: bytes) -> int:
    """Independent hand implementation: sum 16-bit words with end-around
    carry, then complement."""
    total = 0
    for i in range(0, len(header), 2):
        total += (header[i] << 8) | header[i + 1]
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def random_ipv4(rng: random.Random) -> nm.Ipv4Packet:
    return nm.Ipv4Packet(
        src=bytes(rng.randrange(256) for _ in range(4)),
        dst=bytes(rng.randrange(256) for _ in range(4)),
        protocol=rng.randrange(256),
        ttl=rng.randrange(256),
        payload=bytes(rng.randrange(256) for _ in range(rng.randrange(0, 200))),
    )


class TestIpv4:
    def test_checksum_of_version_word_only(self):
        # All-zero header except the version/IHL word: the checksum is the
        # ones-complement of that single word.
        header = bytearray(20)
        header[0] = 0x45
        assert nm.ipv4_header_checksum(bytes(header)) == (~0x4500 & 0xFFFF)
        assert nm.ipv4_header_checksum(bytes(header)) == oracle_ones_complement_checksum(header)

    def test_encoder_checksum_matches_oracle(self):
        rng = random.Random(3)
        for _ in range(200):
            packet = random_ipv4(rng)
            encoded = nm.encode_ipv4(packet)
            header = bytearray(encoded[:20])
            header[10:12] = b"\x00\x00"
            expected = oracle_ones_complement_checksum(bytes(header))
            assert encoded[10:12] == expected.to_bytes(2, "big")

    def test_roundtrip_random(self):
        rng = random.Random(4)
        for _ in range(500):
            packet = random_ipv4(rng)
            assert nm.decode_ipv4(nm.encode_ipv4(packet)) == packet

    def test_every_single_bit_flip_detected(self):
        packet = nm.Ipv4Packet(b"\xc0\x00\x02\x01", b"\x0a\x4d\x00\x03", 6, 64, b"hi")
        encoded = bytearray(nm.encode_ipv4(packet))
        for byte_index in range(20):
            for bit in range(8):
                corrupted = bytearray(encoded)
                corrupted[byte_index] ^= 1 << bit
                with pytest.raises((nm.ChecksumMismatch, nm.BadFormat, nm.Truncated)):
                    nm.decode_ipv4(bytes(corrupted))

    def test_truncated(self):
        with pytest.raises(nm.Truncated):
            nm.decode_ipv4(bytes(19))


class TestSerialFrame:
    def test_roundtrip_random(self):
        rng = random.Random(5)
        for _ in range(500):
            payload = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 300)))
            assert nm.decode_serial_frame(nm.encode_serial_frame(payload)) == payload

    def test_stuffing_of_flag_and_escape_bytes(self):
        payload = bytes([nm.SERIAL_FLAG, nm.SERIAL_ESC, 0x00, nm.SERIAL_FLAG])
        encoded = nm.encode_serial_frame(payload)
        assert encoded.count(nm.SERIAL_FLAG) == 2  # only the delimiters
        assert nm.decode_serial_frame(encoded) == payload

    def test_single_bit_flips_detected(self):
        payload = b"ipv6 packet bytes"
        encoded = nm.encode_serial_frame(payload)
        for byte_index in range(len(encoded)):
            for bit in range(8):
                corrupted = bytearray(encoded)
                corrupted[byte_index] ^= 1 << bit
                with pytest.raises(nm.CodecError):
                    nm.decode_serial_frame(bytes(corrupted))

    def test_streaming_decoder_reassembles_frames(self):
        rng = random.Random(6)
        payloads = [bytes(rng.randrange(256) for _ in range(40)) for _ in range(10)]
        stream = b"".join(nm.encode_serial_frame(p) for p in payloads)
        decoder = nm.SerialDecoder()
        out = []
        for i in range(0, len(stream), 7):  # drip-feed in odd chunks
            out.extend(decoder.feed(stream[i : i + 7]))
        assert out == payloads
        assert decoder.errors == 0

    def test_streaming_decoder_counts_crc_errors_and_resyncs(self):
        good = nm.encode_serial_frame(b"aaaa")
        bad = bytearray(nm.encode_serial_frame(b"bbbb"))
        bad[2] ^= 0x01
        decoder = nm.SerialDecoder()
        out = decoder.feed(bytes(bad) + good)
        assert out == [b"aaaa"]
        assert decoder.errors == 1
