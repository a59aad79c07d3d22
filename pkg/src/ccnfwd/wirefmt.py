"""Wire encoding: an 8-byte fixed header followed by a TLV body.

The fixed header carries enough to frame a packet (packet_length) before the
body arrives. Bodies hold a Name TLV of name-segment TLVs and an optional
payload TLV; control packets carry a JSON document in the payload TLV. All
TLV type and length fields are u16 big-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional

VERSION = 1

PT_INTEREST = 0x00
PT_CONTENT_OBJECT = 0x01
PT_CONTROL = 0xA4
PACKET_TYPES = (PT_INTEREST, PT_CONTENT_OBJECT, PT_CONTROL)

FIXED_HEADER_SIZE = 8
MAX_PACKET_SIZE = 0xFFFF

TLV_NAME = 0x0000
TLV_NAME_SEGMENT = 0x0001
TLV_PAYLOAD = 0x0100

# version, packet_type, packet_length, hop_limit, reserved, header_length
_HEADER = struct.Struct(">BBHBHB")
_TL = struct.Struct(">HH")


class WireError(Exception):
    """Base class for packet encode/decode failures."""


class BadVersion(WireError):
    pass


class BadPacketType(WireError):
    pass


class BadLength(WireError):
    pass


class TruncatedTlv(WireError):
    pass


class MissingName(WireError):
    pass


class TooLarge(WireError):
    pass


class Name:
    """An ordered list of opaque byte segments.

    Names key the PIT, FIB, and content store. Equality is element-wise;
    A is a prefix of B iff B starts with all of A's segments.
    """

    __slots__ = ("_segments",)

    def __init__(self, segments: Iterable[bytes] = ()):
        self._segments = tuple(bytes(s) for s in segments)

    @property
    def segments(self) -> tuple[bytes, ...]:
        return self._segments

    def __len__(self) -> int:
        return len(self._segments)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Name(self._segments[index])
        return self._segments[index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Name):
            return NotImplemented
        return self._segments == other._segments

    def __hash__(self) -> int:
        return hash(self._segments)

    def __repr__(self) -> str:
        return f"Name({self.to_uri()!r})"

    def is_prefix_of(self, other: "Name") -> bool:
        if len(self._segments) > len(other._segments):
            return False
        return other._segments[: len(self._segments)] == self._segments

    @classmethod
    def from_uri(cls, text: str) -> "Name":
        """Parse "lci:/seg1/seg2"; "lci:/" is the empty (root) name."""
        if not text.startswith("lci:"):
            raise ValueError(f"name must start with 'lci:': {text!r}")
        rest = text[len("lci:"):]
        if rest in ("", "/"):
            return cls()
        if not rest.startswith("/"):
            raise ValueError(f"expected '/' after 'lci:': {text!r}")
        parts = rest[1:].split("/")
        return cls(p.encode("utf-8", "surrogateescape") for p in parts)

    def to_uri(self) -> str:
        if not self._segments:
            return "lci:/"
        body = "/".join(s.decode("utf-8", "surrogateescape") for s in self._segments)
        return "lci:/" + body


def name_is_prefix(prefix: Name, name: Name) -> bool:
    return prefix.is_prefix_of(name)


@dataclass(frozen=True)
class FixedHeader:
    version: int
    packet_type: int
    packet_length: int
    hop_limit: int
    header_length: int

    def encode(self) -> bytes:
        return _HEADER.pack(
            self.version,
            self.packet_type,
            self.packet_length,
            self.hop_limit,
            0,
            self.header_length,
        )


def parse_fixed_header(data: bytes) -> FixedHeader:
    if len(data) != FIXED_HEADER_SIZE:
        raise BadLength(f"fixed header needs exactly {FIXED_HEADER_SIZE} bytes, got {len(data)}")
    version, packet_type, packet_length, hop_limit, _reserved, header_length = _HEADER.unpack(data)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if packet_type not in PACKET_TYPES:
        raise BadPacketType(f"unknown packet type 0x{packet_type:02x}")
    if header_length < FIXED_HEADER_SIZE or packet_length < header_length:
        raise BadLength(
            f"bad lengths: packet_length={packet_length} header_length={header_length}"
        )
    return FixedHeader(version, packet_type, packet_length, hop_limit, header_length)


@dataclass(frozen=True)
class Message:
    """An immutable received packet: raw bytes plus an extent map.

    Extents are (offset, length) into ``raw``. Interests and content
    objects always have a name; control packets expose the embedded JSON
    document through ``payload``.
    """

    raw: bytes
    header: FixedHeader
    name_extent: Optional[tuple[int, int]]
    payload_extent: Optional[tuple[int, int]]
    ingress_id: int
    recv_time: int
    name: Optional[Name]

    @property
    def packet_type(self) -> int:
        return self.header.packet_type

    @property
    def hop_limit(self) -> int:
        return self.header.hop_limit

    @property
    def is_interest(self) -> bool:
        return self.header.packet_type == PT_INTEREST

    @property
    def is_content_object(self) -> bool:
        return self.header.packet_type == PT_CONTENT_OBJECT

    @property
    def is_control(self) -> bool:
        return self.header.packet_type == PT_CONTROL

    @property
    def payload(self) -> bytes:
        if self.payload_extent is None:
            return b""
        off, length = self.payload_extent
        return self.raw[off : off + length]


def _walk_tlvs(raw: bytes, start: int, end: int) -> Iterator[tuple[int, int, int]]:
    """Yield (type, value_offset, value_length) for each TLV in raw[start:end]."""
    off = start
    while off < end:
        if end - off < _TL.size:
            raise TruncatedTlv(f"dangling {end - off} bytes at offset {off}")
        tlv_type, tlv_len = _TL.unpack_from(raw, off)
        off += _TL.size
        if off + tlv_len > end:
            raise TruncatedTlv(
                f"TLV type 0x{tlv_type:04x} claims {tlv_len} bytes past buffer end"
            )
        yield tlv_type, off, tlv_len
        off += tlv_len


def parse_message(raw: bytes, ingress_id: int, recv_time: int) -> Message:
    """Parse a complete packet buffer into a Message.

    The caller must supply exactly the packet's bytes: len(raw) has to match
    the packet_length claimed by the first 8 bytes.
    """
    raw = bytes(raw)
    if len(raw) < FIXED_HEADER_SIZE:
        raise BadLength(f"packet shorter than fixed header: {len(raw)} bytes")
    header = parse_fixed_header(raw[:FIXED_HEADER_SIZE])
    if header.packet_length != len(raw):
        raise BadLength(
            f"buffer is {len(raw)} bytes but header claims {header.packet_length}"
        )

    name_extent: Optional[tuple[int, int]] = None
    payload_extent: Optional[tuple[int, int]] = None
    name: Optional[Name] = None
    for tlv_type, off, length in _walk_tlvs(raw, header.header_length, len(raw)):
        if tlv_type == TLV_NAME and name_extent is None:
            name_extent = (off, length)
            segments = [
                raw[seg_off : seg_off + seg_len]
                for seg_type, seg_off, seg_len in _walk_tlvs(raw, off, off + length)
                if seg_type == TLV_NAME_SEGMENT
            ]
            name = Name(segments)
        elif tlv_type == TLV_PAYLOAD and payload_extent is None:
            payload_extent = (off, length)

    if header.packet_type in (PT_INTEREST, PT_CONTENT_OBJECT) and name_extent is None:
        raise MissingName("interest/content object without a name TLV")
    if header.packet_type == PT_CONTROL and payload_extent is None:
        payload_extent = (len(raw), 0)

    return Message(
        raw=raw,
        header=header,
        name_extent=name_extent,
        payload_extent=payload_extent,
        ingress_id=ingress_id,
        recv_time=recv_time,
        name=name,
    )


def _name_tlv(name: Name) -> bytes:
    parts = []
    for segment in name.segments:
        if len(segment) > 0xFFFF:
            raise TooLarge(f"name segment of {len(segment)} bytes exceeds TLV limit")
        parts.append(_TL.pack(TLV_NAME_SEGMENT, len(segment)) + segment)
    inner = b"".join(parts)
    if len(inner) > 0xFFFF:
        raise TooLarge(f"name of {len(inner)} bytes exceeds TLV limit")
    return _TL.pack(TLV_NAME, len(inner)) + inner


def _payload_tlv(payload: bytes) -> bytes:
    if len(payload) > 0xFFFF:
        raise TooLarge(f"payload of {len(payload)} bytes exceeds TLV limit")
    return _TL.pack(TLV_PAYLOAD, len(payload)) + payload


def _packet(packet_type: int, hop_limit: int, body: bytes) -> bytes:
    total = FIXED_HEADER_SIZE + len(body)
    if total > MAX_PACKET_SIZE:
        raise TooLarge(f"packet of {total} bytes exceeds {MAX_PACKET_SIZE}")
    header = FixedHeader(VERSION, packet_type, total, hop_limit, FIXED_HEADER_SIZE)
    return header.encode() + body


def encode_interest(name: Name, hop_limit: int) -> bytes:
    if not 0 <= hop_limit <= 0xFF:
        raise ValueError(f"hop limit {hop_limit} out of range")
    return _packet(PT_INTEREST, hop_limit, _name_tlv(name))


def encode_content_object(name: Name, payload: bytes) -> bytes:
    return _packet(PT_CONTENT_OBJECT, 0, _name_tlv(name) + _payload_tlv(payload))


def encode_control(json_text: bytes) -> bytes:
    return _packet(PT_CONTROL, 0, _payload_tlv(json_text))


def with_hop_limit(msg: Message, hop_limit: int) -> Message:
    """Copy a message with a rewritten hop limit (byte 4 of the header)."""
    if not 0 <= hop_limit <= 0xFF:
        raise ValueError(f"hop limit {hop_limit} out of range")
    raw = bytearray(msg.raw)
    raw[4] = hop_limit
    return replace(msg, raw=bytes(raw), header=replace(msg.header, hop_limit=hop_limit))
