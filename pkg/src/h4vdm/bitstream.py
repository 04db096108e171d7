"""H.264 Annex-B syntax extraction.

Covers the subset of the bitstream needed to recover frame types, slice QPs
and GOP boundaries: NAL framing, emulation prevention, Exp-Golomb codes,
SPS, PPS and slice headers up to ``slice_qp_delta``. No entropy decoding of
macroblock data is attempted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import (
    BitstreamExhausted,
    MalformedPps,
    MalformedSliceHeader,
    MalformedSps,
    NoIFrame,
    NoStartCode,
    UnsupportedSliceType,
)

NAL_SLICE = 1
NAL_IDR = 5
NAL_SPS = 7
NAL_PPS = 8

# profiles whose SPS carries chroma_format_idc and friends
_HIGH_PROFILES = {100, 110, 122, 244, 44, 83, 86, 118, 128, 138, 139, 134, 135}

_SLICE_TYPES = {0: "P", 1: "B", 2: "I"}


@dataclass(frozen=True)
class NalUnit:
    offset: int
    nal_ref_idc: int
    nal_unit_type: int
    rbsp: bytes


@dataclass(frozen=True)
class SpsInfo:
    profile_idc: int
    level_idc: int
    sps_id: int
    log2_max_frame_num: int
    pic_width_mbs: int
    pic_height_map_units: int
    frame_mbs_only: bool
    chroma_format_idc: int = 1
    separate_colour_plane: bool = False
    pic_order_cnt_type: int = 0
    log2_max_poc_lsb: int = 0
    delta_pic_order_always_zero: bool = False
    max_num_ref_frames: int = 0
    crop: tuple[int, int, int, int] = (0, 0, 0, 0)
    vui_present: bool = False

    @property
    def width(self) -> int:
        return 16 * self.pic_width_mbs

    @property
    def height(self) -> int:
        return 16 * self.pic_height_map_units * (2 - int(self.frame_mbs_only))

    @property
    def chroma_array_type(self) -> int:
        return 0 if self.separate_colour_plane else self.chroma_format_idc

    @property
    def cropped_size(self) -> tuple[int, int]:
        """Display (width, height) after applying the frame cropping window."""
        cfi = self.chroma_array_type
        sub_w = 2 if cfi in (1, 2) else 1
        sub_h = 2 if cfi == 1 else 1
        crop_unit_x = 1 if cfi == 0 else sub_w
        crop_unit_y = (1 if cfi == 0 else sub_h) * (2 - int(self.frame_mbs_only))
        left, right, top, bottom = self.crop
        return (self.width - crop_unit_x * (left + right),
                self.height - crop_unit_y * (top + bottom))


@dataclass(frozen=True)
class PpsInfo:
    pps_id: int
    sps_id: int
    pic_init_qp: int
    entropy_mode: str
    bottom_field_pic_order_in_frame_present: bool = False
    num_ref_idx_l0_default: int = 1
    num_ref_idx_l1_default: int = 1
    weighted_pred: bool = False
    weighted_bipred_idc: int = 0
    redundant_pic_cnt_present: bool = False


@dataclass(frozen=True)
class SliceHeaderInfo:
    first_mb_in_slice: int
    frame_type: str
    frame_num: int
    slice_qp: int
    pps_id: int
    is_idr: bool
    slice_type: int = 0


@dataclass(frozen=True)
class GopBoundary:
    start_frame_index: int
    length: int
    frame_types: tuple[str, ...]


@dataclass
class ParsedStream:
    nal_units: list[NalUnit]
    sps: dict[int, SpsInfo] = field(default_factory=dict)
    pps: dict[int, PpsInfo] = field(default_factory=dict)
    frames: list[SliceHeaderInfo] = field(default_factory=list)
    gops: list[GopBoundary] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "nal_units": [
                {"offset": n.offset, "nal_ref_idc": n.nal_ref_idc,
                 "nal_unit_type": n.nal_unit_type, "rbsp_size": len(n.rbsp)}
                for n in self.nal_units
            ],
            "sps": [dict(asdict(s), width=s.width, height=s.height,
                         crop=list(s.crop), cropped_size=list(s.cropped_size))
                    for s in self.sps.values()],
            "pps": [asdict(p) for p in self.pps.values()],
            "frames": [
                {"index": i, "frame_type": f.frame_type, "slice_qp": f.slice_qp,
                 "is_idr": f.is_idr, "frame_num": f.frame_num}
                for i, f in enumerate(self.frames)
            ],
            "gops": [
                {"gop_index": i, "start_frame_index": g.start_frame_index,
                 "length": g.length, "frame_types": list(g.frame_types)}
                for i, g in enumerate(self.gops)
            ],
        }


class BitReader:
    """MSB-first bit reader over an RBSP."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0  # in bits

    @property
    def bits_left(self) -> int:
        return 8 * len(self.data) - self.pos

    def read_bit(self) -> int:
        if self.pos >= 8 * len(self.data):
            raise BitstreamExhausted(f"read past end of {len(self.data)}-byte payload")
        byte = self.data[self.pos >> 3]
        bit = (byte >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit

    def read_bits(self, n: int) -> int:
        if n > self.bits_left:
            raise BitstreamExhausted(
                f"need {n} bits at bit {self.pos}, only {self.bits_left} left")
        val = 0
        for _ in range(n):
            val = (val << 1) | self.read_bit()
        return val

    def read_flag(self) -> bool:
        return bool(self.read_bit())

    def read_ue(self) -> int:
        return read_ue(self)

    def read_se(self) -> int:
        return read_se(self)

    def check_trailing_bits(self) -> bool:
        """True when the remaining bits are exactly ``1`` followed by zero padding."""
        if self.bits_left <= 0 or self.read_bit() != 1:
            return False
        while self.pos & 7:
            if self.read_bit():
                return False
        return all(b == 0 for b in self.data[self.pos >> 3:])


class BitWriter:
    """MSB-first bit writer, the inverse of :class:`BitReader`."""

    def __init__(self) -> None:
        self._bits: list[int] = []

    def write_bits(self, value: int, n: int) -> None:
        for i in range(n - 1, -1, -1):
            self._bits.append((value >> i) & 1)

    def write_flag(self, flag: bool) -> None:
        self._bits.append(int(bool(flag)))

    def write_ue(self, value: int) -> None:
        if value < 0:
            raise ValueError("ue(v) needs a non-negative value")
        code = value + 1
        n = code.bit_length() - 1
        self.write_bits(0, n)
        self.write_bits(code, n + 1)

    def write_se(self, value: int) -> None:
        self.write_ue(2 * value - 1 if value > 0 else -2 * value)

    def trailing_bits(self) -> None:
        self._bits.append(1)
        while len(self._bits) % 8:
            self._bits.append(0)

    def to_bytes(self) -> bytes:
        bits = self._bits + [0] * (-len(self._bits) % 8)
        out = bytearray()
        for i in range(0, len(bits), 8):
            byte = 0
            for b in bits[i:i + 8]:
                byte = (byte << 1) | b
            out.append(byte)
        return bytes(out)


def read_ue(bits: BitReader) -> int:
    """Read an unsigned Exp-Golomb code ue(v)."""
    zeros = 0
    while bits.read_bit() == 0:
        zeros += 1
        if zeros > 32:
            raise BitstreamExhausted("ue(v) prefix longer than 32 bits")
    return (1 << zeros) - 1 + bits.read_bits(zeros)


def read_se(bits: BitReader) -> int:
    """Read a signed Exp-Golomb code se(v): codeNum k -> (-1)^(k+1) * ceil(k/2)."""
    k = read_ue(bits)
    mag = (k + 1) // 2
    return mag if k % 2 else -mag


def unescape_rbsp(ebsp: bytes) -> bytes:
    """Strip emulation-prevention bytes (``00 00 03 0x`` with ``x <= 3``)."""
    out = bytearray()
    zeros = 0
    n = len(ebsp)
    i = 0
    while i < n:
        b = ebsp[i]
        if zeros >= 2 and b == 3 and i + 1 < n and ebsp[i + 1] <= 3:
            zeros = 0
            i += 1
            continue
        out.append(b)
        zeros = zeros + 1 if b == 0 else 0
        i += 1
    return bytes(out)


def escape_rbsp(rbsp: bytes) -> bytes:
    """Insert emulation-prevention bytes so the payload has no start-code prefix."""
    out = bytearray()
    zeros = 0
    for b in rbsp:
        if zeros >= 2 and b <= 3:
            out.append(3)
            zeros = 0
        out.append(b)
        zeros = zeros + 1 if b == 0 else 0
    return bytes(out)


def find_nal_units(stream: bytes) -> list[NalUnit]:
    """Split an Annex-B byte stream into NAL units.

    ``offset`` is the byte index of the NAL header inside ``stream``.
    """
    data = bytes(stream)
    starts = []
    pos = data.find(b"\x00\x00\x01")
    while pos >= 0:
        starts.append(pos + 3)
        pos = data.find(b"\x00\x00\x01", pos + 3)
    if not starts:
        raise NoStartCode(f"no Annex-B start code in {len(data)} bytes scanned from offset 0")
    units = []
    for k, begin in enumerate(starts):
        end = starts[k + 1] - 3 if k + 1 < len(starts) else len(data)
        # drop trailing_zero_8bits and the leading zero of a 4-byte start code
        while end > begin and data[end - 1] == 0:
            end -= 1
        if end <= begin:
            continue
        header = data[begin]
        if header & 0x80:
            raise NoStartCode(f"forbidden_zero_bit set in NAL header at offset {begin}")
        units.append(NalUnit(offset=begin, nal_ref_idc=(header >> 5) & 3,
                             nal_unit_type=header & 0x1F,
                             rbsp=unescape_rbsp(data[begin + 1:end])))
    return units


def write_nal(nal_ref_idc: int, nal_unit_type: int, rbsp: bytes, long_start: bool = True) -> bytes:
    """Serialise one NAL unit with start code and emulation prevention."""
    prefix = b"\x00\x00\x00\x01" if long_start else b"\x00\x00\x01"
    return prefix + bytes([(nal_ref_idc << 5) | nal_unit_type]) + escape_rbsp(rbsp)


# -- parameter sets --------------------------------------------------------------

def _skip_scaling_list(r: BitReader, size: int) -> None:
    last, nxt = 8, 8
    for _ in range(size):
        if nxt != 0:
            delta = r.read_se()
            if not -128 <= delta <= 127:
                raise MalformedSps(f"delta_scale {delta} out of range")
            nxt = (last + delta + 256) % 256
        last = nxt if nxt != 0 else last


def _skip_hrd(r: BitReader) -> None:
    cpb_cnt = r.read_ue() + 1
    if cpb_cnt > 32:
        raise MalformedSps(f"cpb_cnt_minus1 {cpb_cnt - 1} > 31")
    r.read_bits(8)  # bit_rate_scale, cpb_size_scale
    for _ in range(cpb_cnt):
        r.read_ue()
        r.read_ue()
        r.read_bit()
    r.read_bits(20)  # four 5-bit length fields


def _skip_vui(r: BitReader) -> None:
    if r.read_flag():  # aspect_ratio_info_present
        if r.read_bits(8) == 255:
            r.read_bits(32)
    if r.read_flag():  # overscan_info_present
        r.read_bit()
    if r.read_flag():  # video_signal_type_present
        r.read_bits(4)
        if r.read_flag():
            r.read_bits(24)
    if r.read_flag():  # chroma_loc_info_present
        r.read_ue()
        r.read_ue()
    if r.read_flag():  # timing_info_present
        r.read_bits(32)
        r.read_bits(32)
        r.read_bit()
    nal_hrd = r.read_flag()
    if nal_hrd:
        _skip_hrd(r)
    vcl_hrd = r.read_flag()
    if vcl_hrd:
        _skip_hrd(r)
    if nal_hrd or vcl_hrd:
        r.read_bit()  # low_delay_hrd_flag
    r.read_bit()  # pic_struct_present_flag
    if r.read_flag():  # bitstream_restriction_flag
        r.read_bit()
        for _ in range(6):
            r.read_ue()


def parse_sps(nal: NalUnit) -> SpsInfo:
    if nal.nal_unit_type != NAL_SPS:
        raise MalformedSps(f"NAL at offset {nal.offset} has type {nal.nal_unit_type}, not SPS")
    r = BitReader(nal.rbsp)
    try:
        profile_idc = r.read_bits(8)
        r.read_bits(8)  # constraint_set flags + reserved_zero_2bits
        level_idc = r.read_bits(8)
        sps_id = r.read_ue()
        if sps_id > 31:
            raise MalformedSps(f"seq_parameter_set_id {sps_id} > 31")
        chroma_format_idc, separate = 1, False
        if profile_idc in _HIGH_PROFILES:
            chroma_format_idc = r.read_ue()
            if chroma_format_idc > 3:
                raise MalformedSps(f"chroma_format_idc {chroma_format_idc} > 3")
            if chroma_format_idc == 3:
                separate = r.read_flag()
            r.read_ue()  # bit_depth_luma_minus8
            r.read_ue()  # bit_depth_chroma_minus8
            r.read_bit()  # qpprime_y_zero_transform_bypass_flag
            if r.read_flag():  # seq_scaling_matrix_present_flag
                for i in range(8 if chroma_format_idc != 3 else 12):
                    if r.read_flag():
                        _skip_scaling_list(r, 16 if i < 6 else 64)
        log2_max_frame_num = r.read_ue() + 4
        if log2_max_frame_num > 16:
            raise MalformedSps(f"log2_max_frame_num {log2_max_frame_num} > 16")
        poc_type = r.read_ue()
        log2_max_poc_lsb, always_zero = 0, False
        if poc_type == 0:
            log2_max_poc_lsb = r.read_ue() + 4
            if log2_max_poc_lsb > 16:
                raise MalformedSps(f"log2_max_pic_order_cnt_lsb {log2_max_poc_lsb} > 16")
        elif poc_type == 1:
            always_zero = r.read_flag()
            r.read_se()
            r.read_se()
            cycle = r.read_ue()
            if cycle > 255:
                raise MalformedSps(f"num_ref_frames_in_pic_order_cnt_cycle {cycle} > 255")
            for _ in range(cycle):
                r.read_se()
        elif poc_type != 2:
            raise MalformedSps(f"pic_order_cnt_type {poc_type} > 2")
        max_refs = r.read_ue()
        r.read_bit()  # gaps_in_frame_num_value_allowed_flag
        width_mbs = r.read_ue() + 1
        height_units = r.read_ue() + 1
        frame_mbs_only = r.read_flag()
        if not frame_mbs_only:
            r.read_bit()  # mb_adaptive_frame_field_flag
        r.read_bit()  # direct_8x8_inference_flag
        crop = (0, 0, 0, 0)
        if r.read_flag():
            crop = (r.read_ue(), r.read_ue(), r.read_ue(), r.read_ue())
        vui = r.read_flag()
        if vui:
            _skip_vui(r)
    except BitstreamExhausted as exc:
        raise MalformedSps(f"SPS at offset {nal.offset} truncated: {exc}") from exc
    if not r.check_trailing_bits():
        raise MalformedSps(f"SPS at offset {nal.offset}: bits left unaccounted before rbsp trailing bits")
    return SpsInfo(profile_idc=profile_idc, level_idc=level_idc, sps_id=sps_id,
                   log2_max_frame_num=log2_max_frame_num, pic_width_mbs=width_mbs,
                   pic_height_map_units=height_units, frame_mbs_only=frame_mbs_only,
                   chroma_format_idc=chroma_format_idc, separate_colour_plane=separate,
                   pic_order_cnt_type=poc_type, log2_max_poc_lsb=log2_max_poc_lsb,
                   delta_pic_order_always_zero=always_zero, max_num_ref_frames=max_refs,
                   crop=crop, vui_present=vui)


def parse_pps(nal: NalUnit) -> PpsInfo:
    if nal.nal_unit_type != NAL_PPS:
        raise MalformedPps(f"NAL at offset {nal.offset} has type {nal.nal_unit_type}, not PPS")
    r = BitReader(nal.rbsp)
    try:
        pps_id = r.read_ue()
        sps_id = r.read_ue()
        if pps_id > 255 or sps_id > 31:
            raise MalformedPps(f"PPS at offset {nal.offset}: id out of range")
        cabac = r.read_flag()
        bottom_field_poc = r.read_flag()
        num_groups = r.read_ue() + 1
        if num_groups > 8:
            raise MalformedPps(f"num_slice_groups {num_groups} > 8")
        if num_groups > 1:
            map_type = r.read_ue()
            if map_type == 0:
                for _ in range(num_groups):
                    r.read_ue()
            elif map_type == 2:
                for _ in range(num_groups - 1):
                    r.read_ue()
                    r.read_ue()
            elif map_type in (3, 4, 5):
                r.read_bit()
                r.read_ue()
            elif map_type == 6:
                units = r.read_ue() + 1
                width = (num_groups - 1).bit_length()
                for _ in range(units):
                    r.read_bits(width)
            elif map_type > 6:
                raise MalformedPps(f"slice_group_map_type {map_type} > 6")
        l0 = r.read_ue() + 1
        l1 = r.read_ue() + 1
        weighted_pred = r.read_flag()
        weighted_bipred = r.read_bits(2)
        pic_init_qp = 26 + r.read_se()
        r.read_se()  # pic_init_qs_minus26
        r.read_se()  # chroma_qp_index_offset
        r.read_bit()  # deblocking_filter_control_present_flag
        r.read_bit()  # constrained_intra_pred_flag
        redundant = r.read_flag()
    except BitstreamExhausted as exc:
        raise MalformedPps(f"PPS at offset {nal.offset} truncated: {exc}") from exc
    if not 0 <= pic_init_qp <= 51:
        raise MalformedPps(f"PPS at offset {nal.offset}: pic_init_qp {pic_init_qp} outside 0..51")
    return PpsInfo(pps_id=pps_id, sps_id=sps_id, pic_init_qp=pic_init_qp,
                   entropy_mode="CABAC" if cabac else "CAVLC",
                   bottom_field_pic_order_in_frame_present=bottom_field_poc,
                   num_ref_idx_l0_default=l0, num_ref_idx_l1_default=l1,
                   weighted_pred=weighted_pred, weighted_bipred_idc=weighted_bipred,
                   redundant_pic_cnt_present=redundant)


# -- slice header ----------------------------------------------------------------

def _skip_ref_pic_list_modification(r: BitReader) -> None:
    if r.read_flag():
        while True:
            idc = r.read_ue()
            if idc == 3:
                break
            if idc > 5:
                raise MalformedSliceHeader(f"modification_of_pic_nums_idc {idc}")
            r.read_ue()


def _skip_pred_weight_table(r: BitReader, sps: SpsInfo, n_l0: int, n_l1: int, is_b: bool) -> None:
    r.read_ue()  # luma_log2_weight_denom
    chroma = sps.chroma_array_type != 0
    if chroma:
        r.read_ue()
    for count in (n_l0, n_l1) if is_b else (n_l0,):
        for _ in range(count):
            if r.read_flag():
                r.read_se()
                r.read_se()
            if chroma and r.read_flag():
                for _ in range(4):
                    r.read_se()


def _skip_dec_ref_pic_marking(r: BitReader, idr: bool) -> None:
    if idr:
        r.read_bits(2)
        return
    if r.read_flag():
        while True:
            op = r.read_ue()
            if op == 0:
                break
            if op > 6:
                raise MalformedSliceHeader(f"memory_management_control_operation {op}")
            if op in (1, 3):
                r.read_ue()
            if op == 2:
                r.read_ue()
            if op in (3, 6):
                r.read_ue()
            if op == 4:
                r.read_ue()


def parse_slice_header(nal: NalUnit, sps: SpsInfo, pps: PpsInfo) -> SliceHeaderInfo:
    """Parse a slice header up to ``slice_qp_delta``."""
    if nal.nal_unit_type not in (NAL_SLICE, NAL_IDR):
        raise MalformedSliceHeader(
            f"NAL at offset {nal.offset} has type {nal.nal_unit_type}, not a slice")
    idr = nal.nal_unit_type == NAL_IDR
    r = BitReader(nal.rbsp)
    try:
        first_mb = r.read_ue()
        slice_type = r.read_ue()
        if slice_type > 9:
            raise MalformedSliceHeader(f"slice_type {slice_type} > 9 at offset {nal.offset}")
        kind = slice_type % 5
        if kind in (3, 4):
            raise UnsupportedSliceType(
                f"{'SP' if kind == 3 else 'SI'} slice at offset {nal.offset} is not supported")
        pps_id = r.read_ue()
        if pps_id != pps.pps_id:
            raise MalformedSliceHeader(
                f"slice at offset {nal.offset} refers to PPS {pps_id}, got PPS {pps.pps_id}")
        if sps.separate_colour_plane:
            r.read_bits(2)
        frame_num = r.read_bits(sps.log2_max_frame_num)
        field_pic = False
        if not sps.frame_mbs_only:
            field_pic = r.read_flag()
            if field_pic:
                r.read_bit()
        if idr:
            r.read_ue()  # idr_pic_id
        if sps.pic_order_cnt_type == 0:
            r.read_bits(sps.log2_max_poc_lsb)
            if pps.bottom_field_pic_order_in_frame_present and not field_pic:
                r.read_se()
        if sps.pic_order_cnt_type == 1 and not sps.delta_pic_order_always_zero:
            r.read_se()
            if pps.bottom_field_pic_order_in_frame_present and not field_pic:
                r.read_se()
        if pps.redundant_pic_cnt_present:
            r.read_ue()
        is_b = kind == 1
        if is_b:
            r.read_bit()  # direct_spatial_mv_pred_flag
        n_l0, n_l1 = pps.num_ref_idx_l0_default, pps.num_ref_idx_l1_default
        if kind in (0, 1):
            if r.read_flag():  # num_ref_idx_active_override_flag
                n_l0 = r.read_ue() + 1
                if is_b:
                    n_l1 = r.read_ue() + 1
            _skip_ref_pic_list_modification(r)
            if is_b:
                _skip_ref_pic_list_modification(r)
        if (pps.weighted_pred and kind == 0) or (pps.weighted_bipred_idc == 1 and is_b):
            _skip_pred_weight_table(r, sps, n_l0, n_l1, is_b)
        if nal.nal_ref_idc != 0:
            _skip_dec_ref_pic_marking(r, idr)
        if pps.entropy_mode == "CABAC" and kind != 2:
            if r.read_ue() > 2:
                raise MalformedSliceHeader(f"cabac_init_idc > 2 at offset {nal.offset}")
        qp_delta = r.read_se()
    except BitstreamExhausted as exc:
        raise MalformedSliceHeader(f"slice header at offset {nal.offset} truncated: {exc}") from exc
    slice_qp = pps.pic_init_qp + qp_delta
    if not 0 <= slice_qp <= 51:
        raise MalformedSliceHeader(f"slice_qp {slice_qp} outside 0..51 at offset {nal.offset}")
    return SliceHeaderInfo(first_mb_in_slice=first_mb, frame_type=_SLICE_TYPES[kind],
                           frame_num=frame_num, slice_qp=slice_qp, pps_id=pps_id,
                           is_idr=idr, slice_type=slice_type)


# -- frames and GOPs -----------------------------------------------------------------

def merge_slices(slices: Iterable[SliceHeaderInfo]) -> list[SliceHeaderInfo]:
    """Collapse multi-slice pictures into one header per frame.

    A slice with ``first_mb_in_slice == 0`` opens a new frame; later slices of
    the same ``frame_num`` are folded into it.
    """
    frames: list[SliceHeaderInfo] = []
    for s in slices:
        if frames and s.first_mb_in_slice > 0 and s.frame_num == frames[-1].frame_num:
            continue
        frames.append(s)
    return frames


def segment_gops(headers: Sequence[SliceHeaderInfo], open_gop: bool = False) -> list[GopBoundary]:
    """Split per-frame headers into GOPs.

    By default a GOP opens at every IDR frame; with ``open_gop`` any I frame
    opens one. The first frame must be an I frame.
    """
    if not any(h.frame_type == "I" for h in headers):
        raise NoIFrame("stream contains no I frame")
    if headers[0].frame_type != "I":
        raise NoIFrame(f"stream starts with a {headers[0].frame_type} frame, not an I frame")
    starts = [0] + [i for i, h in enumerate(headers) if i > 0 and h.frame_type == "I"
                    and (open_gop or h.is_idr)]
    bounds = starts + [len(headers)]
    return [GopBoundary(start_frame_index=a, length=b - a,
                        frame_types=tuple(h.frame_type for h in headers[a:b]))
            for a, b in zip(bounds[:-1], bounds[1:])]


def parse_stream(stream: bytes, open_gop: bool = False) -> ParsedStream:
    """Parse a full Annex-B stream into parameter sets, frames and GOPs."""
    nals = find_nal_units(stream)
    out = ParsedStream(nal_units=nals)
    slices = []
    for nal in nals:
        if nal.nal_unit_type == NAL_SPS:
            sps = parse_sps(nal)
            out.sps[sps.sps_id] = sps
        elif nal.nal_unit_type == NAL_PPS:
            pps = parse_pps(nal)
            out.pps[pps.pps_id] = pps
        elif nal.nal_unit_type in (NAL_SLICE, NAL_IDR):
            r = BitReader(nal.rbsp)
            try:
                r.read_ue()
                r.read_ue()
                pps_id = r.read_ue()
            except BitstreamExhausted as exc:
                raise MalformedSliceHeader(f"slice header at offset {nal.offset} truncated") from exc
            pps = out.pps.get(pps_id)
            if pps is None or pps.sps_id not in out.sps:
                raise MalformedSliceHeader(
                    f"slice at offset {nal.offset} references missing parameter set (pps {pps_id})")
            slices.append(parse_slice_header(nal, out.sps[pps.sps_id], pps))
    out.frames = merge_slices(slices)
    if out.frames:
        out.gops = segment_gops(out.frames, open_gop=open_gop)
    return out
