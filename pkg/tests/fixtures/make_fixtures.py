"""Regenerate the H.264 parser fixtures with libx264 (via PyAV).

Run from the repository root::

    pip install av
    python tests/fixtures/make_fixtures.py

Each ``<name>.h264`` is written alongside ``<name>.json`` holding the values
the parser must recover: encode settings (size, QP) and per-frame types in
decode order as reported by the reference decoder.
"""
import json
from fractions import Fraction
from pathlib import Path

import av
import numpy as np

HERE = Path(__file__).parent

FIXTURES = {
    # name: (width, height, frames, codec options)
    "baseline_1080p": (1920, 1080, 2, {"_noise": "0",
        "profile": "baseline", "qp": "22",
        "x264-params": "keyint=8:min-keyint=8:scenecut=0:ipratio=1.0:pbratio=1.0:aq-mode=0",
    }),
    "closed_224": (224, 224, 12, {
        "profile": "main", "qp": "22", "bf": "1",
        "x264-params": ("keyint=4:min-keyint=4:scenecut=0:ipratio=1.0:pbratio=1.0:aq-mode=0:"
                        "b-adapt=0:b-pyramid=none:open-gop=0:stitchable=1"),
    }),
    "open_gop_224": (224, 224, 12, {
        "profile": "main", "qp": "30", "bf": "2",
        "x264-params": ("keyint=4:min-keyint=4:scenecut=0:ipratio=1.0:pbratio=1.0:aq-mode=0:"
                        "b-adapt=0:b-pyramid=none:open-gop=1"),
    }),
    "multislice_high_320x240": (320, 240, 10, {
        "profile": "high", "crf": "23", "bf": "3",
        "x264-params": "keyint=5:min-keyint=5:scenecut=0:slices=4:weightp=2:b-pyramid=normal",
    }),
}


PICT_TYPES = {1: "I", 2: "P", 3: "B"}


def _pict_type(frame):
    t = frame.pict_type
    return getattr(t, "name", None) or PICT_TYPES[int(t)]


def _frames(width, height, count, seed, noise=24):
    rng = np.random.default_rng(seed)
    block = 8 if noise else 120
    base = rng.integers(0, 256, size=(height // block + 1, width // block + 1, 3), dtype=np.uint8)
    img = np.kron(base, np.ones((block, block, 1), dtype=np.uint8))[:height, :width]
    for k in range(count):
        shifted = np.roll(img, shift=2 * k, axis=1)
        if not noise:
            yield shifted
            continue
        noise_img = rng.integers(0, noise, size=shifted.shape, dtype=np.uint8)
        yield np.clip(shifted.astype(np.int16) + noise_img, 0, 255).astype(np.uint8)


def encode(name, width, height, count, options):
    enc = av.CodecContext.create("libx264", "w")
    enc.width, enc.height = width, height
    enc.pix_fmt = "yuv420p"
    enc.time_base = Fraction(1, 25)
    enc.framerate = Fraction(25, 1)
    options = dict(options)
    noise = int(options.pop("_noise", 24))
    enc.options = options
    packets = []
    for k, rgb in enumerate(_frames(width, height, count, seed=len(name), noise=noise)):
        frame = av.VideoFrame.from_ndarray(rgb, format="rgb24").reformat(format="yuv420p")
        frame.pts = k
        packets.extend(enc.encode(frame))
    packets.extend(enc.encode(None))

    stream = b"".join(bytes(p) for p in packets)
    (HERE / f"{name}.h264").write_bytes(stream)

    dec = av.CodecContext.create("h264", "r")
    types = {}
    for p in packets:
        for fr in dec.decode(p):
            types[fr.pts] = _pict_type(fr)
    for fr in dec.decode(None):
        types[fr.pts] = _pict_type(fr)
    decode_order = [types[p.pts] for p in packets]
    meta = {
        "width": width,
        "height": height,
        "frame_count": count,
        "options": options,
        "frame_types_decode_order": decode_order,
        "keyframe_flags": [bool(p.is_keyframe) for p in packets],
        "packet_sizes": [p.size for p in packets],
    }
    if "qp" in options:
        meta["qp"] = int(options["qp"])
    (HERE / f"{name}.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


if __name__ == "__main__":
    for name, (w, h, n, opts) in FIXTURES.items():
        m = encode(name, w, h, n, opts)
        print(name, "".join(t[0] for t in m["frame_types_decode_order"]), m["keyframe_flags"])
