import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h4vdm.errors import FormatError, InsufficientPairs, UnknownDevice
from h4vdm.gop_store import GopStore, load_record
from h4vdm.pairs import (
    VISION_DEVICES,
    PairSample,
    SyntheticDeviceProfile,
    build_pairs,
    carve_validation,
    default_profiles,
    label_counts,
    load_split,
    make_split,
    preset_names,
    read_pair_manifest,
    subsample,
    synth_generate,
    write_pair_manifest,
)


def catalogue(d, videos=2, gops=15):
    return {str(i): [(str(i), f"v{v}", k) for v in range(videos) for k in range(gops)]
            for i in range(1, d + 1)}


def make_pairs(d, n0=15, n1=120, seed=0, **kw):
    g = catalogue(d, **kw)
    return build_pairs(g.keys(), g, n0, n1, seed)


# -- build_pairs ------------------------------------------------------------

@pytest.mark.parametrize("d,expected", [(18, (4590, 2160)), (23, (7590, 2760)), (24, (8280, 2880)),
                                        (1, (0, 120))])
def test_training_counts(d, expected):
    assert label_counts(make_pairs(d)) == expected


def test_pairs_unique_and_labelled():
    pairs = make_pairs(6)
    keys = [p.key for p in pairs]
    assert len(set(keys)) == len(keys)
    for p in pairs:
        assert p.label == int(p.a[0] == p.b[0])
        assert p.a != p.b


def test_deterministic_given_seed():
    assert make_pairs(4, seed=3) == make_pairs(4, seed=3)
    assert make_pairs(4, seed=3) != make_pairs(4, seed=4)


def brute_counts(d, n0, n1):
    label0 = sum(n0 for i, j in itertools.product(range(d), repeat=2) if i != j)
    label1 = sum(n1 for i, j in itertools.product(range(d), repeat=2) if i == j)
    return label0, label1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 4), st.integers(0, 6))
def test_count_formulas(d, n0, n1):
    pairs = make_pairs(d, n0=n0, n1=n1, videos=1, gops=6)
    assert label_counts(pairs) == (d * (d - 1) * n0, d * n1) == brute_counts(d, n0, n1)


def test_insufficient_pairs():
    g = catalogue(2, videos=1, gops=4)  # C(4, 2) = 6 same-device pairs
    with pytest.raises(InsufficientPairs):
        build_pairs(g.keys(), g, 1, 7, 0)
    # 16 cross pairs per device pair cover both ordered quotas of 8, not 9
    assert label_counts(build_pairs(g.keys(), g, 8, 6, 0)) == (16, 12)
    with pytest.raises(InsufficientPairs):
        build_pairs(g.keys(), g, 9, 1, 0)
    with pytest.raises(InsufficientPairs):
        build_pairs(["x"], {"x": [("x", "v", 0)]}, 1, 1, 0)
    with pytest.raises(UnknownDevice):
        build_pairs(["y"], g, 1, 1, 0)


def test_large_pools_use_rejection_sampling():
    g = catalogue(3, videos=20, gops=15)  # 300 GOPs per device
    pairs = build_pairs(g.keys(), g, 15, 120, 1)
    assert label_counts(pairs) == (90, 360)
    assert len({p.key for p in pairs}) == len(pairs)


# -- subsample / carve ------------------------------------------------------

def test_subsample_counts():
    test17 = make_pairs(17)
    assert label_counts(test17) == (4080, 2040)
    assert label_counts(subsample(test17, 0.4, 0)) == (1632, 816)
    assert label_counts(subsample(make_pairs(12), 0.4, 0)) == (792, 576)
    assert label_counts(subsample(make_pairs(11), 0.4, 0)) == (660, 528)
    assert subsample(test17, 1.0, 5) == test17


def test_subsample_rounds_half_up():
    pairs = [PairSample(("a", "v", 0), ("b", "v", i), 0) for i in range(5)]
    assert len(subsample(pairs, 0.5, 0)) == 3
    assert len(subsample(pairs, 0.1, 0)) == 1  # 0.5 rounds up
    assert len(subsample(pairs, 0.0, 0)) == 0


def test_carve_validation():
    pairs = subsample(make_pairs(17), 0.4, 0)
    assert len(pairs) == 2448
    val, rest = carve_validation(pairs, 1 / 8, 0)
    assert (len(val), len(rest)) == (306, 2142)
    assert set(val).isdisjoint(rest) and set(val) | set(rest) == set(pairs)
    val2, rest2 = carve_validation(rest, 1 / 8, 0)
    assert len(val2) == round(2142 / 8)
    assert carve_validation(pairs, 1 / 8, 0) == (val, rest)


# -- splits -----------------------------------------------------------------

def test_presets_ship_verbatim():
    assert preset_names() == [f"D{i}" for i in range(1, 8)]
    d1 = load_split("D1")
    assert d1.s2 == tuple(map(str, (1, 2, 4, 5, 6, 14, 17, 18, 19, 21, 22, 23, 27, 28, 30, 32, 35)))
    assert len(d1.s1) == 18
    assert len(load_split("D7").s1) == 24
    for name in preset_names():
        s = load_split(name)
        assert set(s.s1) | set(s.s2) == set(VISION_DEVICES) and not set(s.s1) & set(s.s2)
    # D5..D7 partition the device list
    parts = [set(load_split(f"D{i}").s2) for i in (5, 6, 7)]
    assert set().union(*parts) == set(VISION_DEVICES) and sum(map(len, parts)) == 35


def test_make_split():
    assert make_split(VISION_DEVICES, VISION_DEVICES).s1 == ()
    with pytest.raises(UnknownDevice):
        make_split(["1", "2"], ["3"])
    with pytest.raises(UnknownDevice):
        load_split("D9")


def test_split_dataset_arithmetic():
    for name, train, test in (("D1", (4590, 2160), (1632, 816)), ("D5", (7590, 2760), (792, 576)),
                              ("D7", (8280, 2880), (660, 528))):
        s = load_split(name)
        g = catalogue(35, videos=2)
        g = {k: v for k, v in g.items()}
        tr = build_pairs(s.s1, g, 15, 120, 0)
        te = subsample(build_pairs(s.s2, g, 15, 120, 1), 0.4, 2)
        assert label_counts(tr) == train and label_counts(te) == test
        assert not {x for p in tr for x in (p.a, p.b)} & {x for p in te for x in (p.a, p.b)}


# -- manifests --------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    pairs = make_pairs(3, n0=2, n1=3)
    path = write_pair_manifest(tmp_path / "p.jsonl", pairs, {"seed": 0, "n0": 2, "n1": 3})
    header, back = read_pair_manifest(path)
    assert back == pairs
    assert header["count_0"] == 12 and header["count_1"] == 9 and header["seed"] == 0
    bad = tmp_path / "bad.jsonl"
    bad.write_text(path.read_text().replace('"label": 1', '"label": 0', 1))
    with pytest.raises(FormatError):
        read_pair_manifest(bad)


# -- synthetic devices ----------------------------------------------------------

def test_synth_counts_and_determinism(tmp_path):
    profiles = default_profiles(2, seed=0)
    recs = synth_generate(profiles, 2, 5, GopStore(tmp_path / "a"))
    assert len(recs) == 20
    synth_generate(profiles, 2, 5, GopStore(tmp_path / "b"))
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 80
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    for d in (tmp_path / "a").glob("*/*/gop_*"):
        load_record(d)


def test_synth_follows_profile():
    prof = SyntheticDeviceProfile("x", 5, base_qp=30, qp_jitter=2, gop_pattern="IPBP",
                                  mb_types=(7, 9), mb_probs=(0.5, 0.5), height=48, width=64)
    rec = synth_generate([prof], 1, 3)[0]
    assert rec.frame_types == list("IPBP")
    assert rec.frames.shape == (4, 48, 64, 3)
    # per frame: base QP, plus 1 for P and 2 for B, plus or minus the jitter
    for qp, step in zip(rec.luma_qp_grids, (0, 1, 2, 1)):
        assert 28 + step <= qp.min() and qp.max() <= 32 + step
    assert set(np.unique(rec.mb_type_grids)) <= {7, 9}


def test_disjoint_qp_profiles_are_separable():
    lo = SyntheticDeviceProfile("lo", 1, base_qp=20, qp_jitter=2)
    hi = SyntheticDeviceProfile("hi", 2, base_qp=30, qp_jitter=2)
    recs = synth_generate([lo, hi], 2, 5)
    means = {r.key: r.luma_qp_grids.mean() for r in recs}
    assert all((means[r.key] > 25) == (r.device_id == "hi") for r in recs)


def test_profile_validation():
    with pytest.raises(ValueError):
        SyntheticDeviceProfile("x", 0, gop_pattern="PIPP")
    with pytest.raises(ValueError):
        SyntheticDeviceProfile("x", 0, base_qp=50, qp_jitter=3)
    with pytest.raises(ValueError):
        synth_generate([SyntheticDeviceProfile("x", 0), SyntheticDeviceProfile("y", 0)], 1, 1)
