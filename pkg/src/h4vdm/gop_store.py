"""GOP record interchange format and model-input assembly.

A record is one directory per GOP::

    manifest.json   format_version, ids, frame_count, height, width,
                    frame_types, checksums (CRC-32 hex per binary file)
    frames.u8       frame_count * H_f * W_f * 3, frame-major, RGB interleaved
    mb_types.u8     frame_count * ceil(H_f/16) * ceil(W_f/16)
    luma_qp.u8      same layout as mb_types.u8, values 0..51

Stores lay records out as ``<root>/<device>/<video>/gop_<index>``.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .bitstream import ParsedStream
from .errors import ChecksumMismatch, DimensionMismatch, FormatError, ShortGop, SmallFrame

FORMAT_VERSION = 1
MB = 16
FRAME_TYPE_IDS = {"I": 0, "P": 1, "B": 2}
BINARIES = ("frames.u8", "mb_types.u8", "luma_qp.u8")

# Scaling conventions baked into trained weights; stored in checkpoints.
SCALING = {
    "i_frame": "x / 127.5 - 1",
    "frame_diffs": "(frame[k] - frame[0]) / 255",
    "luma_qp": "q / 25.5 - 1",
    "mb_types": "raw 0..255 ids",
}


def mb_grid_shape(height: int, width: int) -> tuple[int, int]:
    return -(-height // MB), -(-width // MB)


@dataclass
class GopRecord:
    device_id: str
    video_id: str
    gop_index: int
    frame_types: list[str]
    frames: np.ndarray          # (F, H_f, W_f, 3) uint8
    mb_type_grids: np.ndarray   # (F, ceil(H_f/16), ceil(W_f/16)) uint8
    luma_qp_grids: np.ndarray   # same shape, 0..51
    meta: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return len(self.frame_types)

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.device_id, self.video_id, self.gop_index)

    def validate(self) -> None:
        """Check the structural invariants; raises FormatError/DimensionMismatch."""
        n = self.frame_count
        if n < 1:
            raise FormatError("record has no frames")
        if any(t not in FRAME_TYPE_IDS for t in self.frame_types):
            raise FormatError(f"unknown frame type in {self.frame_types}")
        if self.frame_types[0] != "I":
            raise FormatError(f"first frame of {self.key} is {self.frame_types[0]}, not I")
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise FormatError(f"frames must be uint8 (F, H, W, 3), got {self.frames.dtype} {self.frames.shape}")
        grid = (n,) + mb_grid_shape(self.height, self.width)
        for name, arr in (("frames", self.frames), ("mb_type_grids", self.mb_type_grids),
                          ("luma_qp_grids", self.luma_qp_grids)):
            if len(arr) != n:
                raise DimensionMismatch(f"{name} has {len(arr)} frames, frame_types has {n}")
        for name, arr in (("mb_type_grids", self.mb_type_grids), ("luma_qp_grids", self.luma_qp_grids)):
            if arr.shape != grid:
                raise DimensionMismatch(f"{name} shape {arr.shape} != {grid}")
        if self.luma_qp_grids.max(initial=0) > 51:
            raise FormatError(f"luma QP above 51 in {self.key}")


@dataclass
class ModelInput:
    i_frame: np.ndarray         # (H, W, 3) in [-1, 1]
    frame_diffs: np.ndarray     # (L, H, W, 3) in [-1, 1]
    frame_type_ids: np.ndarray  # (L,) in {0, 1, 2}
    mb_type_maps: np.ndarray    # (L, H, W, 1) ints 0..255
    luma_qp_maps: np.ndarray    # (L, H, W, 1) in [-1, 1]

    @property
    def L(self) -> int:
        return len(self.frame_type_ids)


# -- record I/O ---------------------------------------------------------------------

def _crc(data: bytes) -> str:
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


def _manifest(record: GopRecord, blobs: dict[str, bytes]) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "device_id": record.device_id,
        "video_id": record.video_id,
        "gop_index": int(record.gop_index),
        "frame_count": record.frame_count,
        "height": record.height,
        "width": record.width,
        "frame_types": list(record.frame_types),
        "checksums": {name: _crc(blob) for name, blob in blobs.items()},
    }
    if record.meta:
        doc["meta"] = record.meta
    return doc


def write_record(record: GopRecord, directory: str | Path) -> Path:
    """Write one record. Existing records are never modified.

    Re-writing byte-identical content is a no-op; differing content raises.
    """
    record.validate()
    directory = Path(directory)
    blobs = {
        "frames.u8": np.ascontiguousarray(record.frames, dtype=np.uint8).tobytes(),
        "mb_types.u8": np.ascontiguousarray(record.mb_type_grids, dtype=np.uint8).tobytes(),
        "luma_qp.u8": np.ascontiguousarray(record.luma_qp_grids, dtype=np.uint8).tobytes(),
    }
    text = json.dumps(_manifest(record, blobs), indent=1, sort_keys=True) + "\n"
    manifest = directory / "manifest.json"
    if manifest.exists():
        if manifest.read_text() == text:
            return directory
        raise FileExistsError(f"record {directory} exists with different content")
    directory.mkdir(parents=True, exist_ok=True)
    for name, blob in blobs.items():
        (directory / name).write_bytes(blob)
    manifest.write_text(text)
    return directory


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not JSON ({exc})") from exc
    required = {"format_version": int, "device_id": str, "video_id": str, "gop_index": int,
                "frame_count": int, "height": int, "width": int, "frame_types": list,
                "checksums": dict}
    for key, kind in required.items():
        if not isinstance(doc.get(key), kind):
            raise FormatError(f"{path}: manifest field {key!r} missing or not {kind.__name__}")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {doc['format_version']}")
    if len(doc["frame_types"]) != doc["frame_count"]:
        raise FormatError(f"{path}: frame_types length != frame_count")
    if doc["height"] < 1 or doc["width"] < 1:
        raise FormatError(f"{path}: non-positive frame size")
    return doc


def load_record(path: str | Path, L: int | None = None, H: int | None = None,
                W: int | None = None) -> GopRecord:
    """Load and fully validate a record directory.

    ``L``, ``H`` and ``W`` add the usability checks (ShortGop, SmallFrame).
    """
    path = Path(path)
    doc = read_manifest(path)
    n, h, w = doc["frame_count"], doc["height"], doc["width"]
    gh, gw = mb_grid_shape(h, w)
    expect = {"frames.u8": n * h * w * 3, "mb_types.u8": n * gh * gw, "luma_qp.u8": n * gh * gw}
    blobs = {}
    for name in BINARIES:
        try:
            blob = (path / name).read_bytes()
        except FileNotFoundError as exc:
            raise FormatError(f"{path}: missing {name}") from exc
        if len(blob) != expect[name]:
            raise FormatError(f"{path}/{name}: {len(blob)} bytes, expected {expect[name]}")
        if doc["checksums"].get(name) != _crc(blob):
            raise ChecksumMismatch(f"{path}/{name}: CRC-32 {_crc(blob)} != {doc['checksums'].get(name)}")
        blobs[name] = blob
    record = GopRecord(
        device_id=doc["device_id"], video_id=doc["video_id"], gop_index=doc["gop_index"],
        frame_types=list(doc["frame_types"]),
        frames=np.frombuffer(blobs["frames.u8"], np.uint8).reshape(n, h, w, 3),
        mb_type_grids=np.frombuffer(blobs["mb_types.u8"], np.uint8).reshape(n, gh, gw),
        luma_qp_grids=np.frombuffer(blobs["luma_qp.u8"], np.uint8).reshape(n, gh, gw),
        meta=doc.get("meta", {}),
    )
    record.validate()
    check_usable(record, L, H, W)
    return record


def check_usable(record: GopRecord, L: int | None, H: int | None, W: int | None) -> None:
    if L is not None and record.frame_count < L:
        raise ShortGop(f"{record.key}: {record.frame_count} frames < L={L}")
    if (H is not None and record.height < H) or (W is not None and record.width < W):
        raise SmallFrame(f"{record.key}: frame {record.height}x{record.width} smaller than {H}x{W}")


def record_dir(root: str | Path, device_id: str, video_id: str, gop_index: int) -> Path:
    return Path(root) / device_id / video_id / f"gop_{gop_index:05d}"


class GopStore:
    """Directory of records, indexed by (device_id, video_id, gop_index)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._index: dict[tuple[str, str, int], dict] | None = None

    def write(self, record: GopRecord) -> Path:
        self._index = None
        return write_record(record, record_dir(self.root, *record.key))

    @property
    def index(self) -> dict[tuple[str, str, int], dict]:
        if self._index is None:
            self._index = {}
            for manifest in sorted(self.root.glob("*/*/gop_*/manifest.json")):
                doc = read_manifest(manifest.parent)
                key = (doc["device_id"], doc["video_id"], doc["gop_index"])
                self._index[key] = dict(doc, path=str(manifest.parent))
        return self._index

    def keys(self) -> list[tuple[str, str, int]]:
        return sorted(self.index)

    def devices(self) -> list[str]:
        return sorted({k[0] for k in self.index})

    def gops_by_device(self, L: int | None = None, H: int | None = None,
                       W: int | None = None) -> dict[str, list[tuple[str, str, int]]]:
        """Usable GOP keys per device, using manifests only."""
        out: dict[str, list] = {}
        for key, doc in sorted(self.index.items()):
            if L is not None and doc["frame_count"] < L:
                continue
            if (H is not None and doc["height"] < H) or (W is not None and doc["width"] < W):
                continue
            out.setdefault(key[0], []).append(key)
        return out

    def load(self, key: tuple[str, str, int], **usable) -> GopRecord:
        try:
            path = self.index[tuple(key)]["path"]
        except KeyError:
            path = record_dir(self.root, *key)
        return load_record(path, **usable)

    def __iter__(self) -> Iterator[GopRecord]:
        for key in self.keys():
            yield self.load(key)

    def __len__(self) -> int:
        return len(self.index)


# -- stream assembly ----------------------------------------------------------------

def crop_center(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Central ``target`` window of the two leading axes of ``image``."""
    h, w = target
    hf, wf = image.shape[0], image.shape[1]
    if hf < h or wf < w:
        raise SmallFrame(f"cannot crop {hf}x{wf} to {h}x{w}")
    top, left = (hf - h) // 2, (wf - w) // 2
    return image[top:top + h, left:left + w]


def unpack_mb_grid(grid: np.ndarray, frame_dims: tuple[int, int]) -> np.ndarray:
    """Give every pixel the value of its macroblock: (m, n) -> (H_f, W_f, 1)."""
    grid = np.asarray(grid)
    hf, wf = frame_dims
    if grid.ndim != 2 or grid.shape != mb_grid_shape(hf, wf):
        raise DimensionMismatch(f"grid {grid.shape} does not tile a {hf}x{wf} frame")
    full = np.repeat(np.repeat(grid, MB, axis=0), MB, axis=1)
    return full[:hf, :wf, None]


def assemble_model_input(record: GopRecord, L: int, H: int, W: int,
                         dtype=np.float32) -> ModelInput:
    """Build the five model streams from the first ``L`` frames of a record."""
    check_usable(record, L, H, W)
    frames = np.stack([crop_center(f, (H, W)) for f in record.frames[:L]]).astype(np.int16)
    i_frame = frames[0].astype(dtype) / dtype(127.5) - dtype(1.0)
    diffs = (frames - frames[:1]).astype(dtype) / dtype(255.0)
    dims = (record.height, record.width)
    mb = np.stack([crop_center(unpack_mb_grid(g, dims), (H, W)) for g in record.mb_type_grids[:L]])
    qp = np.stack([crop_center(unpack_mb_grid(g, dims), (H, W)) for g in record.luma_qp_grids[:L]])
    return ModelInput(
        i_frame=i_frame,
        frame_diffs=diffs,
        frame_type_ids=np.array([FRAME_TYPE_IDS[t] for t in record.frame_types[:L]], dtype=np.int64),
        mb_type_maps=mb.astype(np.int64),
        luma_qp_maps=qp.astype(dtype) / dtype(25.5) - dtype(1.0),
    )


def sample_gops(records: Sequence, k: int, rng_seed: int, L: int | None = None) -> list:
    """Uniformly pick ``min(k, eligible)`` records with at least ``L`` frames.

    Accepts GopRecords or manifest dicts (anything with a frame count).
    """
    def count(r):
        return r.frame_count if hasattr(r, "frame_count") else r["frame_count"]

    eligible = [r for r in records if L is None or count(r) >= L]
    if not eligible:
        return []
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(eligible), size=min(k, len(eligible)), replace=False)
    return [eligible[i] for i in sorted(picks)]


def cross_validate(records: Iterable[GopRecord], parsed: ParsedStream) -> None:
    """Require each record's frame types to match the parsed GOP of the same index."""
    for rec in records:
        if rec.gop_index >= len(parsed.gops):
            raise FormatError(f"{rec.key}: stream has only {len(parsed.gops)} GOPs")
        stream_types = list(parsed.gops[rec.gop_index].frame_types)
        if stream_types != list(rec.frame_types):
            raise FormatError(
                f"{rec.key}: record frame types {''.join(rec.frame_types)} != "
                f"bitstream {''.join(stream_types)}")
