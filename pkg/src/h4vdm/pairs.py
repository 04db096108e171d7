"""Labelled GOP-pair datasets, device splits and synthetic devices."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, InsufficientPairs, UnknownDevice
from .gop_store import GopRecord, GopStore, mb_grid_shape

GopRef = tuple  # (device_id, video_id, gop_index)

# candidate sets at most this large are enumerated rather than rejection-sampled
_ENUMERATE_LIMIT = 20000


@dataclass(frozen=True)
class PairSample:
    a: GopRef
    b: GopRef
    label: int

    @property
    def key(self) -> tuple:
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)

    def to_json(self) -> dict:
        def ref(r):
            return {"device": r[0], "video": r[1], "gop": int(r[2])}
        return {"a": ref(self.a), "b": ref(self.b), "label": int(self.label)}

    @classmethod
    def from_json(cls, doc: dict) -> "PairSample":
        def ref(d):
            return (str(d["device"]), str(d["video"]), int(d["gop"]))
        a, b, label = ref(doc["a"]), ref(doc["b"]), int(doc["label"])
        if label not in (0, 1) or label != int(a[0] == b[0]):
            raise FormatError(f"pair label {label} inconsistent with devices {a[0]!r}, {b[0]!r}")
        return cls(a, b, label)


@dataclass(frozen=True)
class DeviceSplit:
    s1: tuple[str, ...]
    s2: tuple[str, ...]
    name: str = ""

    def __post_init__(self):
        overlap = set(self.s1) & set(self.s2)
        if overlap:
            raise UnknownDevice(f"devices in both splits: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {"dataset_name": self.name, "s1": list(self.s1), "s2": list(self.s2)}


def _ref(g) -> GopRef:
    return tuple(g.key) if hasattr(g, "key") else tuple(g)


def _device_order(devices: Iterable[str]) -> list[str]:
    # numeric ids sort numerically, everything else lexicographically
    return sorted(devices, key=lambda d: (0, int(d), "") if str(d).isdigit() else (1, 0, str(d)))


def _draw(rng, pool_a, pool_b, quota, used, same):
    """Draw ``quota`` unordered pairs from ``pool_a x pool_b`` absent from ``used``."""
    na, nb = len(pool_a), len(pool_b)
    total = na * (na - 1) // 2 if same else na * nb
    picked: list[tuple] = []
    if total <= _ENUMERATE_LIMIT or quota * 4 > total:
        if same:
            cand = [(i, j) for i in range(na) for j in range(i + 1, na)]
        else:
            cand = [(i, j) for i in range(na) for j in range(nb)]
        for idx in rng.permutation(len(cand)):
            i, j = cand[idx]
            a, b = pool_a[i], pool_b[j]
            key = (a, b) if a <= b else (b, a)
            if key not in used:
                used.add(key)
                picked.append((a, b))
                if len(picked) == quota:
                    break
        return picked
    attempts = 0
    while len(picked) < quota:
        attempts += 1
        if attempts > 100 * quota:
            break
        i, j = int(rng.integers(na)), int(rng.integers(nb))
        if same and i == j:
            continue
        a, b = pool_a[i], pool_b[j]
        key = (a, b) if a <= b else (b, a)
        if key not in used:
            used.add(key)
            picked.append((a, b))
    return picked


def build_pairs(devices: Iterable[str], gops_by_device: Mapping[str, Sequence], n0: int, n1: int,
                rng_seed: int) -> list[PairSample]:
    """Sample labelled pairs over every ordered device pair of ``devices``.

    Each ordered ``(i, j)`` with ``i != j`` contributes ``n0`` label-0 pairs and
    each ``i`` contributes ``n1`` label-1 pairs between distinct GOPs. Pairs are
    unique as unordered pairs across the whole dataset.
    """
    devs = _device_order(set(devices))
    missing = [d for d in devs if d not in gops_by_device]
    if missing:
        raise UnknownDevice(f"no GOPs listed for devices {missing}")
    pools = {d: sorted({_ref(g) for g in gops_by_device[d]}) for d in devs}
    for d in devs:
        if len(pools[d]) < 2:
            raise InsufficientPairs(f"device {d!r} has {len(pools[d])} GOP(s); at least 2 needed")
    rng = np.random.default_rng(rng_seed)
    used: set = set()
    out: list[PairSample] = []
    for i in devs:
        for j in devs:
            same = i == j
            quota = n1 if same else n0
            if quota == 0:
                continue
            drawn = _draw(rng, pools[i], pools[j], quota, used, same)
            if len(drawn) < quota:
                raise InsufficientPairs(
                    f"devices ({i!r}, {j!r}): only {len(drawn)} of {quota} unique pairs available")
            out.extend(PairSample(a, b, int(same)) for a, b in drawn)
    return out


def _round_half_up(n: int, fraction) -> int:
    return math.floor(n * Fraction(fraction).limit_denominator(10 ** 9) + Fraction(1, 2))


def _split_indices(pairs, fraction, rng_seed, stratified):
    rng = np.random.default_rng(rng_seed)
    groups = ([[i for i, p in enumerate(pairs) if p.label == lab] for lab in (0, 1)]
              if stratified else [list(range(len(pairs)))])
    chosen: list[int] = []
    for idx in groups:
        k = _round_half_up(len(idx), fraction)
        if k:
            chosen.extend(np.asarray(idx)[rng.permutation(len(idx))[:k]].tolist())
    return sorted(chosen)


def subsample(pairs: Sequence[PairSample], fraction: float = 0.4, rng_seed: int = 0,
              stratified: bool = True) -> list[PairSample]:
    """Uniform sample without replacement; per label when ``stratified``. Order is kept."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    return [pairs[i] for i in _split_indices(pairs, fraction, rng_seed, stratified)]


def carve_validation(pairs: Sequence[PairSample], fraction: float = 1 / 8, rng_seed: int = 0,
                     stratified: bool = True) -> tuple[list[PairSample], list[PairSample]]:
    """Split off ``fraction`` of ``pairs``; returns ``(validation, remainder)``."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    chosen = set(_split_indices(pairs, fraction, rng_seed, stratified))
    val = [p for i, p in enumerate(pairs) if i in chosen]
    rest = [p for i, p in enumerate(pairs) if i not in chosen]
    return val, rest


def label_counts(pairs: Iterable[PairSample]) -> tuple[int, int]:
    n = [0, 0]
    for p in pairs:
        n[p.label] += 1
    return n[0], n[1]


# -- device splits ---------------------------------------------------------------

VISION_DEVICES = tuple(str(i) for i in range(1, 36))


def make_split(all_devices: Iterable[str], s2: Iterable[str], name: str = "") -> DeviceSplit:
    all_set = {str(d) for d in all_devices}
    s2_set = {str(d) for d in s2}
    unknown = s2_set - all_set
    if unknown:
        raise UnknownDevice(f"test devices not in the device list: {_device_order(unknown)}")
    return DeviceSplit(tuple(_device_order(all_set - s2_set)), tuple(_device_order(s2_set)), name)


def preset_names() -> list[str]:
    folder = resources.files("h4vdm") / "splits"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_split(name_or_path: str | Path) -> DeviceSplit:
    """Load a split file, or one of the shipped presets ``D1`` .. ``D7`` by name."""
    path = Path(name_or_path)
    if path.suffix != ".json":
        res = resources.files("h4vdm") / "splits" / f"{name_or_path}.json"
        if not res.is_file():
            raise UnknownDevice(f"no split preset {name_or_path!r}; available: {preset_names()}")
        doc = json.loads(res.read_text())
    else:
        doc = json.loads(path.read_text())
    for key in ("dataset_name", "s1", "s2"):
        if key not in doc:
            raise FormatError(f"split file lacks {key!r}")
    return DeviceSplit(tuple(map(str, doc["s1"])), tuple(map(str, doc["s2"])), doc["dataset_name"])


def write_split(split: DeviceSplit, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(split.to_json(), indent=1) + "\n")
    return path


# -- pair manifests --------------------------------------------------------------

def write_pair_manifest(path: str | Path, pairs: Sequence[PairSample], header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n0, n1 = label_counts(pairs)
    head = {"kind": "h4vdm-pairs", "format_version": 1, **header, "count_0": n0, "count_1": n1}
    with path.open("w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")
    return path


def read_pair_manifest(path: str | Path) -> tuple[dict, list[PairSample]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty pair manifest")
    header = json.loads(lines[0])
    if header.get("kind") != "h4vdm-pairs":
        raise FormatError(f"{path}: missing pair-manifest header")
    pairs = [PairSample.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
    return header, pairs


# -- synthetic devices -------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDeviceProfile:
    """Coding habits of a made-up camera, used for desk-scale experiments.

    ``base_qp``, ``gop_pattern`` and the macroblock-type distribution carry the
    device signal. Picture content is drawn per GOP around ``spatial_freq`` and
    ``noise_level``; ``content_jitter`` scales how much it varies between GOPs.
    """

    device_id: str
    seed: int
    base_qp: int = 28
    qp_jitter: int = 2
    gop_pattern: str = "IPPBPPBP"
    mb_types: tuple[int, ...] = (0, 1, 2, 3)
    mb_probs: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    spatial_freq: float = 0.1   # cycles per pixel of the base texture
    noise_level: float = 8.0    # std of per-frame pixel noise
    content_jitter: float = 1.0
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if not self.gop_pattern or self.gop_pattern[0] != "I" or set(self.gop_pattern) - set("IPB"):
            raise ValueError(f"gop_pattern must start with I and use I/P/B: {self.gop_pattern!r}")
        if len(self.mb_types) != len(self.mb_probs) or not self.mb_types:
            raise ValueError("mb_types and mb_probs must have equal, non-zero length")
        if not (0 <= self.base_qp - self.qp_jitter and self.base_qp + self.qp_jitter + 2 <= 51):
            raise ValueError("base_qp - qp_jitter must be >= 0 and base_qp + qp_jitter + 2 <= 51")
        if any(not 0 <= t <= 255 for t in self.mb_types):
            raise ValueError("mb types must lie in 0..255")

    def to_json(self) -> dict:
        return asdict(self)


# QP offset added to P and B frames relative to I frames
_QP_STEP = {"I": 0, "P": 1, "B": 2}


def _texture(rng, h, w, freq):
    cell = max(2, int(round(1.0 / max(freq, 1e-3))))
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.normal(size=(gh, gw, 3))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def synth_record(profile: SyntheticDeviceProfile, video: int, gop: int) -> GopRecord:
    """Render one GOP; deterministic in ``(profile.seed, video, gop)``."""
    rng = np.random.default_rng([profile.seed, video, gop])
    h, w = profile.height, profile.width
    n = len(profile.gop_pattern)
    gh, gw = mb_grid_shape(h, w)
    cj = profile.content_jitter
    freq = profile.spatial_freq * float(np.exp(cj * rng.uniform(-0.7, 0.7)))
    level = 128 + cj * rng.uniform(-50, 50)
    contrast = 40 * float(np.exp(cj * rng.uniform(-0.7, 0.7)))
    tex = _texture(rng, h + 4 * n, w + 4 * n, freq)
    dy, dx = rng.integers(-2, 3, size=2)
    frames = np.empty((n, h, w, 3), np.uint8)
    for k in range(n):
        oy, ox = 2 * n + dy * k, 2 * n + dx * k
        img = level + contrast * tex[oy:oy + h, ox:ox + w] + profile.noise_level * rng.normal(size=(h, w, 3))
        frames[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    step = np.array([_QP_STEP[t] for t in profile.gop_pattern])[:, None, None]
    qp = profile.base_qp + step + rng.integers(-profile.qp_jitter, profile.qp_jitter + 1, size=(n, gh, gw))
    probs = np.asarray(profile.mb_probs, float)
    mb = rng.choice(np.asarray(profile.mb_types), size=(n, gh, gw), p=probs / probs.sum())
    rec = GopRecord(
        device_id=profile.device_id, video_id=f"v{video:03d}", gop_index=gop,
        frame_types=list(profile.gop_pattern), frames=frames,
        mb_type_grids=mb.astype(np.uint8), luma_qp_grids=qp.astype(np.uint8),
        meta={"synthetic": True, "profile_seed": profile.seed})
    rec.validate()
    return rec


def synth_generate(profiles: Sequence[SyntheticDeviceProfile], videos_per_device: int,
                   gops_per_video: int, store: GopStore | None = None) -> list[GopRecord]:
    """Render records for every profile; also written to ``store`` when given."""
    seeds = [p.seed for p in profiles]
    if len(set(seeds)) != len(seeds):
        raise ValueError("synthetic profiles need distinct seeds")
    ids = [p.device_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError("synthetic profiles need distinct device ids")
    out = []
    for prof in profiles:
        for v in range(videos_per_device):
            for g in range(gops_per_video):
                rec = synth_record(prof, v, g)
                if store is not None:
                    store.write(rec)
                out.append(rec)
    return out


_PATTERNS = ("IPPPPPPP", "IPBPBPBP", "IBBPBBPB", "IPPBPPBP", "IBPBPBPB", "IPBBPBBP",
             "IBBBPBBB", "IPPPBPPP", "IBPPBPPB")
# macroblock types shared by all synthetic devices; each device uses a subset
SYNTH_MB_VOCAB = tuple(range(12))


def default_profiles(n: int, seed: int = 0, height: int = 64, width: int = 64,
                     offset: int = 0, device_ids: Sequence[str] | None = None
                     ) -> list[SyntheticDeviceProfile]:
    """``n`` profiles whose coding habits differ while their content statistics overlap.

    Base QPs come from a shuffled ladder with step 2, and GOP patterns cycle
    through a fixed list. Each device uses 5 of the 12 shared macroblock types
    with its own mix. ``seed`` reshuffles everything. Ids default to
    ``syn<k>``; ``device_ids`` names the ``n`` devices instead.
    """
    if device_ids is not None and len(device_ids) != n:
        raise ValueError(f"{len(device_ids)} device ids for {n} profiles")
    rng = np.random.default_rng(seed)
    ladder = 16 + 2 * rng.permutation(14)
    patterns = [_PATTERNS[i] for i in rng.permutation(len(_PATTERNS))]
    out = []
    for k in range(offset, offset + n):
        r = np.random.default_rng([seed, k])
        types = tuple(int(t) for t in sorted(r.choice(SYNTH_MB_VOCAB, size=5, replace=False)))
        out.append(SyntheticDeviceProfile(
            device_id=f"syn{k:02d}" if device_ids is None else str(device_ids[k - offset]), seed=1000 * (seed + 1) + k, base_qp=int(ladder[k % len(ladder)]),
            qp_jitter=2, gop_pattern=patterns[k % len(patterns)], mb_types=types,
            mb_probs=tuple(float(p) for p in r.dirichlet(np.ones(5))),
            spatial_freq=float(r.uniform(0.08, 0.2)), noise_level=float(r.uniform(3, 8)),
            height=height, width=width))
    return out
