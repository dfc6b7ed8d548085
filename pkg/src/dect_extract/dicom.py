"""Minimal DICOM Part-10 reader/writer (explicit VR little endian only).

Enough to pull 16-bit pixel payloads out of both the standard PixelData
element and odd-group private elements, and to write files that round-trip.
Sequences are kept as opaque byte blobs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from dect_extract.imaging import ImageGrid

PREAMBLE = b"\x00" * 128
MAGIC = b"DICM"
EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"

LONG_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "UC", "UN", "UR", "UT", "SV", "UV"})
SHORT_VRS = frozenset({
    "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FL", "FD", "IS", "LO", "LT",
    "PN", "SH", "SL", "SS", "ST", "TM", "UI", "UL", "US",
})
TEXT_VRS = frozenset({"AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO", "LT", "PN", "SH", "ST", "TM", "UC", "UR", "UT"})
UNDEFINED_LENGTH = 0xFFFFFFFF


class DicomError(ValueError):
    pass


class DicomParseError(DicomError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedTransferSyntaxError(DicomError):
    pass


class TagNotFoundError(DicomError, KeyError):
    def __str__(self):
        return self.args[0]


class DescriptorError(DicomError):
    pass


class DicomTag(NamedTuple):
    group: int
    element: int

    @property
    def is_private(self) -> bool:
        return self.group % 2 == 1

    def __str__(self):
        return f"({self.group:04X},{self.element:04X})"

    @classmethod
    def parse(cls, text: str) -> "DicomTag":
        g, e = text.strip().strip("()").split(",")
        return cls(int(g, 16), int(e, 16))


ITEM = DicomTag(0xFFFE, 0xE000)
ITEM_DELIMITER = DicomTag(0xFFFE, 0xE00D)
SEQUENCE_DELIMITER = DicomTag(0xFFFE, 0xE0DD)

TRANSFER_SYNTAX_UID = DicomTag(0x0002, 0x0010)
IMAGE_COMMENTS = DicomTag(0x0020, 0x4000)
ROWS = DicomTag(0x0028, 0x0010)
COLUMNS = DicomTag(0x0028, 0x0011)
PIXEL_SPACING = DicomTag(0x0028, 0x0030)
BITS_ALLOCATED = DicomTag(0x0028, 0x0100)
BITS_STORED = DicomTag(0x0028, 0x0101)
HIGH_BIT = DicomTag(0x0028, 0x0102)
PIXEL_REPRESENTATION = DicomTag(0x0028, 0x0103)
RESCALE_INTERCEPT = DicomTag(0x0028, 0x1052)
RESCALE_SLOPE = DicomTag(0x0028, 0x1053)
PIXEL_DATA = DicomTag(0x7FE0, 0x0010)

# private layout written by this package's study exporter
PRIVATE_CREATOR = DicomTag(0x0029, 0x0010)
PRIVATE_CREATOR_NAME = "DECT_EXTRACT SYNTH"
PRIVATE_PAYLOAD_GROUP = 0x7FE1
DEFAULT_PRIVATE_PAYLOAD = DicomTag(PRIVATE_PAYLOAD_GROUP, 0x0010)


def private_payload_tag(k: int) -> DicomTag:
    return DicomTag(PRIVATE_PAYLOAD_GROUP, 0x0010 + k)


def private_rescale_tags(k: int) -> tuple[DicomTag, DicomTag, DicomTag]:
    """(slope, intercept, label) elements describing private payload ``k``."""
    return DicomTag(0x0029, 0x1000 + 2 * k), DicomTag(0x0029, 0x1001 + 2 * k), DicomTag(0x0029, 0x1080 + k)


@dataclass(frozen=True)
class DicomElement:
    tag: DicomTag
    vr: str
    value: bytes = b""
    undefined_length: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tag", DicomTag(*self.tag))
        if len(self.vr) != 2:
            raise DicomError(f"VR must be two characters, got {self.vr!r}")
        object.__setattr__(self, "value", bytes(self.value))
        if not _uses_long_length(self.vr) and len(self.value) > 0xFFFE:
            raise DicomError(f"{self.tag} {self.vr}: {len(self.value)} bytes exceed the 16-bit length field")
        if self.undefined_length and self.vr not in ("SQ", "UN"):
            raise DicomError(f"{self.tag}: undefined length is only supported for SQ/UN")

    @property
    def length(self) -> int:
        return len(self.value)

    # value helpers ---------------------------------------------------------
    def text(self) -> str:
        return self.value.decode("latin-1").rstrip("\x00 ")

    def as_int(self) -> int:
        if self.vr == "US":
            return struct.unpack_from("<H", self.value)[0]
        if self.vr == "SS":
            return struct.unpack_from("<h", self.value)[0]
        if self.vr == "UL":
            return struct.unpack_from("<I", self.value)[0]
        if self.vr == "SL":
            return struct.unpack_from("<i", self.value)[0]
        return int(self.text().split("\\")[0])

    def as_float(self) -> float:
        if self.vr == "FD":
            return struct.unpack_from("<d", self.value)[0]
        if self.vr == "FL":
            return struct.unpack_from("<f", self.value)[0]
        if self.vr in ("US", "SS", "UL", "SL"):
            return float(self.as_int())
        return float(self.text().split("\\")[0])

    def as_floats(self) -> list[float]:
        return [float(v) for v in self.text().split("\\")]


def _uses_long_length(vr: str) -> bool:
    return vr in LONG_VRS or vr not in SHORT_VRS


def us(tag, value: int) -> DicomElement:
    return DicomElement(DicomTag(*tag), "US", struct.pack("<H", value))


def format_ds(value: float) -> str:
    """Shortest decimal string (<= 16 chars) for a DS element."""
    for digits in range(16, 0, -1):
        s = f"{value:.{digits}g}"
        if len(s) <= 16:
            return s
    raise DicomError(f"cannot encode {value!r} as DS")


def ds(tag, *values: float) -> DicomElement:
    return text_element(tag, "DS", "\\".join(format_ds(v) for v in values))


def text_element(tag, vr: str, text: str) -> DicomElement:
    return DicomElement(DicomTag(*tag), vr, text.encode("latin-1"))


@dataclass(frozen=True)
class DicomDataset:
    """Elements sorted by tag, no duplicates."""

    elements: tuple = ()
    transfer_syntax: str = EXPLICIT_VR_LITTLE_ENDIAN

    def __post_init__(self):
        elems = tuple(sorted(self.elements, key=lambda e: e.tag))
        for a, b in zip(elems, elems[1:]):
            if a.tag == b.tag:
                raise DicomError(f"duplicate tag {a.tag}")
        object.__setattr__(self, "elements", elems)
        if self.transfer_syntax != EXPLICIT_VR_LITTLE_ENDIAN:
            raise UnsupportedTransferSyntaxError(
                f"transfer syntax {self.transfer_syntax} unsupported; only explicit VR little endian"
            )

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __contains__(self, tag):
        return self.get(tag) is not None

    def get(self, tag):
        tag = DicomTag(*tag)
        for e in self.elements:
            if e.tag == tag:
                return e
        return None

    def __getitem__(self, tag) -> DicomElement:
        e = self.get(tag)
        if e is None:
            raise TagNotFoundError(f"tag {DicomTag(*tag)} not found in dataset")
        return e

    def tags(self):
        return [e.tag for e in self.elements]

    def replace(self, *new: DicomElement) -> "DicomDataset":
        keep = {e.tag: e for e in self.elements}
        for e in new:
            keep[e.tag] = e
        return DicomDataset(tuple(keep.values()))


# -- parsing ------------------------------------------------------------------


def _read_header(buf, pos, end):
    if end - pos < 8:
        raise DicomParseError(f"truncated element header: {end - pos} bytes left, need 8", pos)
    group, elem = struct.unpack_from("<HH", buf, pos)
    return DicomTag(group, elem)


def _skip_items(buf, pos, end):
    """Walk items of an undefined-length sequence starting at ``pos``.

    Returns ``(content_end, after_delimiter)``.
    """
    while True:
        tag = _read_header(buf, pos, end)
        (length,) = struct.unpack_from("<I", buf, pos + 4)
        if tag == SEQUENCE_DELIMITER:
            return pos, pos + 8
        if tag != ITEM:
            raise DicomParseError(f"expected item or sequence delimiter inside sequence, found {tag}", pos)
        pos += 8
        if length != UNDEFINED_LENGTH:
            if pos + length > end:
                raise DicomParseError(f"item length {length} exceeds remaining {end - pos} bytes", pos)
            pos += length
            continue
        # undefined-length item: nested elements up to the item delimiter
        while True:
            if _read_header(buf, pos, end) == ITEM_DELIMITER:
                pos += 8
                break
            _, pos = _read_element(buf, pos, end)


def _read_element(buf, pos, end):
    start = pos
    tag = _read_header(buf, pos, end)
    raw_vr = bytes(buf[pos + 4 : pos + 6])
    vr = raw_vr.decode("latin-1")
    if _uses_long_length(vr):
        if end - pos < 12:
            raise DicomParseError(f"truncated header of {tag}", start)
        (length,) = struct.unpack_from("<I", buf, pos + 8)
        pos += 12
    else:
        (length,) = struct.unpack_from("<H", buf, pos + 6)
        pos += 8
    if length == UNDEFINED_LENGTH:
        if vr not in ("SQ", "UN"):
            raise UnsupportedTransferSyntaxError(
                f"{tag} {vr} has undefined length (encapsulated/compressed data is not supported)"
            )
        content_end, after = _skip_items(buf, pos, end)
        return DicomElement(tag, vr, bytes(buf[pos:content_end]), undefined_length=True), after
    if pos + length > end:
        raise DicomParseError(
            f"element {tag} {vr} declares {length} bytes but only {end - pos} remain", start
        )
    return DicomElement(tag, vr, bytes(buf[pos : pos + length])), pos + length


def parse_dataset(data: bytes) -> DicomDataset:
    """Parse a Part-10 file (with preamble + ``DICM``) or a bare element stream."""
    buf = memoryview(bytes(data))
    end = len(buf)
    pos = 0
    if end >= 132 and bytes(buf[128:132]) == MAGIC:
        pos = 132
    elements = []
    while pos < end:
        elem, pos = _read_element(buf, pos, end)
        elements.append(elem)
    ds_ = DicomDataset(tuple(elements))
    ts = ds_.get(TRANSFER_SYNTAX_UID)
    if ts is not None and ts.text() != EXPLICIT_VR_LITTLE_ENDIAN:
        raise UnsupportedTransferSyntaxError(
            f"transfer syntax {ts.text()} unsupported; only {EXPLICIT_VR_LITTLE_ENDIAN} (explicit VR little endian)"
        )
    return ds_


def read_file(path) -> DicomDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# -- writing ------------------------------------------------------------------


def _padded(elem: DicomElement) -> bytes:
    v = elem.value
    if len(v) % 2:
        v += b" " if elem.vr in TEXT_VRS else b"\x00"
    return v


def write_dataset(ds_: DicomDataset, preamble: bool = True) -> bytes:
    out = bytearray()
    if preamble:
        out += PREAMBLE + MAGIC
    for elem in ds_.elements:
        value = elem.value if elem.undefined_length else _padded(elem)
        out += struct.pack("<HH", elem.tag.group, elem.tag.element)
        out += elem.vr.encode("latin-1")
        if elem.undefined_length:
            out += b"\x00\x00" + struct.pack("<I", UNDEFINED_LENGTH)
            out += value
            out += struct.pack("<HHI", SEQUENCE_DELIMITER.group, SEQUENCE_DELIMITER.element, 0)
        elif _uses_long_length(elem.vr):
            out += b"\x00\x00" + struct.pack("<I", len(value)) + value
        else:
            out += struct.pack("<H", len(value)) + value
    return bytes(out)


def write_file(path, ds_: DicomDataset):
    with open(path, "wb") as fh:
        fh.write(write_dataset(ds_))


# -- pixel payloads ------------------------------------------------------------


@dataclass(frozen=True)
class PixelDescriptor:
    rows: int
    columns: int
    bits_allocated: int = 16
    pixel_representation: int = 0
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0

    def __post_init__(self):
        if self.bits_allocated != 16:
            raise DescriptorError(f"only 16-bit payloads are supported, got {self.bits_allocated}")
        if self.pixel_representation not in (0, 1):
            raise DescriptorError("pixel_representation must be 0 (unsigned) or 1 (signed)")
        if self.rows < 1 or self.columns < 1:
            raise DescriptorError("rows and columns must be >= 1")

    @property
    def nbytes(self) -> int:
        return self.rows * self.columns * 2

    @property
    def dtype(self):
        return np.dtype("<i2") if self.pixel_representation else np.dtype("<u2")

    @classmethod
    def from_dataset(cls, ds_: DicomDataset) -> "PixelDescriptor":
        def opt(tag, default, conv):
            e = ds_.get(tag)
            return default if e is None else conv(e)

        return cls(
            rows=ds_[ROWS].as_int(),
            columns=ds_[COLUMNS].as_int(),
            bits_allocated=opt(BITS_ALLOCATED, 16, DicomElement.as_int),
            pixel_representation=opt(PIXEL_REPRESENTATION, 0, DicomElement.as_int),
            rescale_slope=opt(RESCALE_SLOPE, 1.0, DicomElement.as_float),
            rescale_intercept=opt(RESCALE_INTERCEPT, 0.0, DicomElement.as_float),
        )


def extract_pixel_image(ds_: DicomDataset, payload_tag, desc: PixelDescriptor | None = None) -> ImageGrid:
    """Decode a 16-bit payload as ``slope * stored + intercept``."""
    payload_tag = DicomTag(*payload_tag)
    elem = ds_.get(payload_tag)
    if elem is None:
        raise TagNotFoundError(f"payload tag {payload_tag} not found in dataset")
    if desc is None:
        desc = descriptor_for(ds_, payload_tag)
    if elem.length != desc.nbytes:
        raise DescriptorError(
            f"payload {payload_tag} holds {elem.length} bytes but {desc.rows}x{desc.columns}x2 = {desc.nbytes} expected"
        )
    stored = np.frombuffer(elem.value, dtype=desc.dtype).reshape(desc.rows, desc.columns)
    pixels = desc.rescale_slope * stored.astype(np.float64) + desc.rescale_intercept
    sx = sy = 1.0
    sp = ds_.get(PIXEL_SPACING)
    if sp is not None:
        sy, sx = sp.as_floats()[:2]
    return ImageGrid(pixels, sx, sy)


PAYLOAD_VRS = frozenset({"OB", "OW", "UN"})


def list_private_payloads(ds_: DicomDataset, min_bytes: int = 65536) -> list[DicomTag]:
    """Private binary elements of at least ``min_bytes``: candidate pixel payloads."""
    return [e.tag for e in ds_.elements
            if e.tag.is_private and e.vr in PAYLOAD_VRS and not e.undefined_length and e.length >= min_bytes]


def descriptor_for(ds_: DicomDataset, payload_tag) -> PixelDescriptor:
    """Descriptor of a payload: standard rescale elements for PixelData, the
    exporter's private rescale elements for ``(7FE1,00xx)`` payloads."""
    base = PixelDescriptor.from_dataset(ds_)
    payload_tag = DicomTag(*payload_tag)
    if payload_tag == PIXEL_DATA or payload_tag.group != PRIVATE_PAYLOAD_GROUP:
        return base
    slope_tag, icpt_tag, _ = private_rescale_tags(payload_tag.element - 0x0010)
    slope, icpt = ds_.get(slope_tag), ds_.get(icpt_tag)
    return PixelDescriptor(
        base.rows,
        base.columns,
        base.bits_allocated,
        0,
        slope.as_float() if slope is not None else 1.0,
        icpt.as_float() if icpt is not None else 0.0,
    )


def payload_label(ds_: DicomDataset, payload_tag) -> str:
    payload_tag = DicomTag(*payload_tag)
    if payload_tag == PIXEL_DATA:
        return "pixel-data"
    if payload_tag.group == PRIVATE_PAYLOAD_GROUP:
        e = ds_.get(private_rescale_tags(payload_tag.element - 0x0010)[2])
        if e is not None:
            return e.text()
    return str(payload_tag)


def quantize_16bit(pixels):
    """Unsigned 16-bit encoding spanning ``[min, max]`` in 65535 steps.

    Returns ``(stored, slope, intercept)``; slope and intercept are the values
    as they read back from their DS strings, so decoding reproduces the input
    within one step.
    """
    x = np.asarray(pixels, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    intercept = float(format_ds(lo))
    span = hi - intercept
    slope = float(format_ds(span / 65535.0 * (1 + 1e-9))) if span > 0 else 1.0
    if span > 0 and slope * 65535.0 < span:
        slope = float(format_ds(slope * (1 + 1e-7)))
    stored = np.clip(np.rint((x - intercept) / slope), 0, 65535).astype("<u2")
    return stored, slope, intercept


def pixel_payload(tag, stored: np.ndarray) -> DicomElement:
    return DicomElement(DicomTag(*tag), "OW", np.ascontiguousarray(stored, dtype="<u2").tobytes())
