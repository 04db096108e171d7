import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from h4vdm.bitstream import parse_stream
from h4vdm.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    FormatError,
    ShortGop,
    SmallFrame,
)
from h4vdm.gop_store import (
    GopStore,
    assemble_model_input,
    crop_center,
    cross_validate,
    load_record,
    sample_gops,
    unpack_mb_grid,
    write_record,
)


def test_roundtrip_1280x720(tmp_path, record_factory):
    rec = record_factory(frame_count=10, height=720, width=1280)
    write_record(rec, tmp_path / "r")
    back = load_record(tmp_path / "r", L=8, H=224, W=224)
    assert back.frame_count == 10
    assert back.mb_type_grids.shape == (10, 45, 80)
    np.testing.assert_array_equal(back.frames, rec.frames)
    np.testing.assert_array_equal(back.luma_qp_grids, rec.luma_qp_grids)


def test_short_gop(tmp_path, record_factory):
    write_record(record_factory(frame_count=6, height=224, width=224), tmp_path / "r")
    with pytest.raises(ShortGop):
        load_record(tmp_path / "r", L=8, H=224, W=224)


def test_small_frame(tmp_path, record_factory):
    write_record(record_factory(frame_count=8, height=160, width=160), tmp_path / "r")
    with pytest.raises(SmallFrame):
        load_record(tmp_path / "r", L=8, H=224, W=224)


def test_checksum_mismatch(tmp_path, record_factory):
    path = write_record(record_factory(), tmp_path / "r")
    blob = bytearray((path / "luma_qp.u8").read_bytes())
    blob[0] ^= 1
    (path / "luma_qp.u8").write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load_record(path)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("device_id"),
    lambda d: d.update(format_version=2),
    lambda d: d.update(frame_types=["I"]),
    lambda d: d.update(frame_count="10"),
])
def test_schema_violations(tmp_path, record_factory, mutate):
    path = write_record(record_factory(), tmp_path / "r")
    doc = json.loads((path / "manifest.json").read_text())
    mutate(doc)
    (path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_record(path)


def test_first_frame_must_be_i(tmp_path, record_factory):
    rec = record_factory(types=["P"] + ["P"] * 9)
    with pytest.raises(FormatError):
        write_record(rec, tmp_path / "r")


def test_wrong_binary_size(tmp_path, record_factory):
    path = write_record(record_factory(), tmp_path / "r")
    (path / "frames.u8").write_bytes(b"\x00" * 10)
    with pytest.raises(FormatError):
        load_record(path)


def test_store_is_append_only(tmp_path, record_factory):
    store = GopStore(tmp_path)
    store.write(record_factory(seed=1))
    store.write(record_factory(seed=1))  # identical rewrite is a no-op
    with pytest.raises(FileExistsError):
        store.write(record_factory(seed=2))
    assert len(store) == 1


# -- crop / unpack ----------------------------------------------------------------------

def test_crop_identity():
    img = np.arange(224 * 224 * 3).reshape(224, 224, 3)
    assert crop_center(img, (224, 224)) is not None
    np.testing.assert_array_equal(crop_center(img, (224, 224)), img)


def test_crop_offset_one():
    img = np.arange(226 * 226).reshape(226, 226)
    np.testing.assert_array_equal(crop_center(img, (224, 224)), img[1:225, 1:225])


def test_crop_central_block():
    grid = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(crop_center(grid, (2, 2)), [[5, 6], [9, 10]])


def test_crop_too_small():
    with pytest.raises(SmallFrame):
        crop_center(np.zeros((10, 10)), (11, 4))


def test_unpack_single_block():
    out = unpack_mb_grid(np.array([[7]]), (16, 16))
    assert out.shape == (16, 16, 1) and (out == 7).all()


def test_unpack_quadrants():
    out = unpack_mb_grid(np.array([[1, 2], [3, 4]]), (32, 32))[..., 0]
    assert (out[:16, :16] == 1).all() and (out[:16, 16:] == 2).all()
    assert (out[16:, :16] == 3).all() and (out[16:, 16:] == 4).all()


def test_unpack_partial_block():
    out = unpack_mb_grid(np.array([[5], [9]]), (20, 16))[..., 0]
    assert out.shape == (20, 16)
    assert (out[:16] == 5).all() and (out[16:] == 9).all()


def test_unpack_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        unpack_mb_grid(np.zeros((2, 2)), (48, 32))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 15), st.integers(0, 15), st.data())
def test_unpack_then_block_mode_recovers_grid(m, n, dh, dw, data):
    hf, wf = 16 * (m - 1) + dh + 1, 16 * (n - 1) + dw + 1
    grid = np.array(data.draw(st.lists(st.integers(0, 255), min_size=m * n, max_size=m * n))).reshape(m, n)
    full = unpack_mb_grid(grid, (hf, wf))[..., 0]
    rec = np.zeros_like(grid)
    for i in range(m):
        for j in range(n):
            vals, counts = np.unique(full[16 * i:16 * i + 16, 16 * j:16 * j + 16], return_counts=True)
            assert len(vals) == 1
            rec[i, j] = vals[np.argmax(counts)]
    np.testing.assert_array_equal(rec, grid)


# -- assembly ---------------------------------------------------------------------------

def test_assemble_shapes_and_zero_first_diff(record_factory):
    rec = record_factory(frame_count=10, height=240, width=256)
    mi = assemble_model_input(rec, L=8, H=224, W=224)
    assert mi.i_frame.shape == (224, 224, 3)
    assert mi.frame_diffs.shape == (8, 224, 224, 3)
    assert mi.mb_type_maps.shape == (8, 224, 224, 1)
    assert mi.luma_qp_maps.shape == (8, 224, 224, 1)
    assert not mi.frame_diffs[0].any()
    for arr in (mi.i_frame, mi.frame_diffs, mi.luma_qp_maps):
        assert arr.min() >= -1 and arr.max() <= 1
    assert 0 <= mi.mb_type_maps.min() and mi.mb_type_maps.max() <= 255


def test_assemble_constant_qp(record_factory):
    mi = assemble_model_input(record_factory(qp=26), L=4, H=32, W=32)
    np.testing.assert_allclose(mi.luma_qp_maps, 26 / 25.5 - 1, rtol=1e-5)  # float32
    assert abs(float(mi.luma_qp_maps[0, 0, 0, 0]) - 0.0196) < 1e-4


def test_assemble_frame_type_ids(record_factory):
    types = ["I", "P", "P", "P", "B", "B", "P", "P", "P", "B"]
    mi = assemble_model_input(record_factory(types=types), L=8, H=32, W=32)
    assert mi.frame_type_ids.tolist() == [0, 1, 1, 1, 2, 2, 1, 1]


def test_assemble_diff_and_scaling_values(record_factory):
    rec = record_factory(frame_count=3, height=32, width=32)
    mi = assemble_model_input(rec, L=3, H=32, W=32, dtype=np.float64)
    f = rec.frames.astype(np.float64)
    np.testing.assert_allclose(mi.i_frame, f[0] / 127.5 - 1)
    np.testing.assert_allclose(mi.frame_diffs[2], (f[2] - f[0]) / 255)


def test_mb_maps_constant_on_aligned_blocks(record_factory):
    rec = record_factory(frame_count=2, height=64, width=64)
    mi = assemble_model_input(rec, L=2, H=32, W=32)
    # 64 -> 32 crop starts at 16: blocks stay aligned
    for i in range(2):
        for j in range(2):
            block = mi.mb_type_maps[0, 16 * i:16 * i + 16, 16 * j:16 * j + 16, 0]
            assert (block == rec.mb_type_grids[0, 1 + i, 1 + j]).all()


# -- sampling ---------------------------------------------------------------------------

def test_sample_15_of_20(record_factory):
    recs = [record_factory(frame_count=8, height=16, width=16, gop_index=i) for i in range(20)]
    picked = sample_gops(recs, 15, rng_seed=3, L=8)
    assert len(picked) == 15
    assert len({r.gop_index for r in picked}) == 15


def test_sample_clamps_and_filters(record_factory):
    recs = [record_factory(frame_count=n, height=16, width=16, gop_index=i)
            for i, n in enumerate([8, 9, 4, 12, 2])]
    picked = sample_gops(recs, 15, rng_seed=0, L=8)
    assert sorted(r.gop_index for r in picked) == [0, 1, 3]
    assert sample_gops(recs, 5, rng_seed=0, L=100) == []


def test_sample_deterministic(record_factory):
    recs = [record_factory(frame_count=8, height=16, width=16, gop_index=i) for i in range(30)]
    a = [r.gop_index for r in sample_gops(recs, 15, rng_seed=11)]
    b = [r.gop_index for r in sample_gops(recs, 15, rng_seed=11)]
    assert a == b


# -- bitstream cross-check -----------------------------------------------------------------

def test_cross_validate_against_stream(fixture_dir, record_factory):
    parsed = parse_stream((fixture_dir / "closed_224.h264").read_bytes())
    good = [record_factory(frame_count=4, height=224, width=224, gop_index=i,
                           types=list(parsed.gops[i].frame_types)) for i in range(3)]
    cross_validate(good, parsed)
    bad = record_factory(frame_count=4, height=224, width=224, gop_index=1, types=list("IPPP"))
    with pytest.raises(FormatError):
        cross_validate([bad], parsed)
