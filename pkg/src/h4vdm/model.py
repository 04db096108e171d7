"""Twin-branch GOP feature extractor, pair similarity and pair loss.

One extractor encodes a GOP as follows:

* I-Proc runs a ViT-1 over the I-frame pixels.
* DF-Proc runs ViT-1s over the L frame differences.
* FT-Proc embeds the frame-type ids.
* M-Proc embeds the macroblock-type map (256 x 3) and runs a ViT-2 on the result.
* L-Proc runs a ViT-2 over the luma QP map.

The ``4L + 5`` tokens are then joined by four learnable separators, passed
through a joint transformer, flattened and projected to ``D_r``. Both GOPs of
a pair go through the same weights.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, ShapeMismatch
from .gop_store import SCALING, ModelInput
from .nn.layers import Embedding, Encoder, Linear, ParamSpec, ViT, init_array

LOSS_EPS = 1e-7
POOLING = "flatten"


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8
    height: int = 224
    width: int = 224
    patch: int = 16
    d_vit1: int = 256
    d_vit2: int = 64
    d_t: int = 256
    d_r: int = 1024
    vit1_depth: int = 8
    vit1_heads: int = 8
    vit2_depth: int = 4
    vit2_heads: int = 4
    joint_depth: int = 8
    joint_heads: int = 8
    ft_vocab: int = 3
    mb_vocab: int = 256
    mb_dim: int = 3
    mlp_ratio: int = 4
    # per-frame DF-Proc ViT-1s (False) or one ViT-1 applied to every frame (True)
    df_shared: bool = False
    # layer norm at the end of the joint encoder
    joint_final_norm: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("L must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} must divide {self.height}x{self.width}")
        for d, h, what in ((self.d_vit1, self.vit1_heads, "ViT-1"),
                           (self.d_vit2, self.vit2_heads, "ViT-2"),
                           (self.d_t, self.joint_heads, "joint")):
            if h < 1 or d % h:
                raise ConfigError(f"{what}: heads {h} must divide width {d}")

    @property
    def n_tokens(self) -> int:
        return 4 * self.L + 5

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


PRESETS = {
    "S": ModelConfig(d_vit1=192, d_t=192),
    "B": ModelConfig(d_vit1=256, d_t=256),
    "L": ModelConfig(d_vit1=320, d_t=320),
    "tiny": ModelConfig(L=4, height=64, width=64, d_vit1=32, d_vit2=16, d_t=32, d_r=64,
                        vit1_depth=4, vit2_depth=2, joint_depth=4),
    # smallest configuration used for finite-difference checks
    "micro": ModelConfig(L=2, height=32, width=32, d_vit1=8, d_vit2=8, d_t=8, d_r=8,
                         vit1_depth=1, vit1_heads=2, vit2_depth=1, vit2_heads=2,
                         joint_depth=1, joint_heads=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def stack_inputs(inputs: Sequence[ModelInput]) -> dict:
    """Stack per-GOP inputs into batched arrays keyed like :class:`ModelInput`."""
    if not inputs:
        raise ShapeMismatch("empty batch")
    return {
        "i_frame": np.stack([x.i_frame for x in inputs]),
        "frame_diffs": np.stack([x.frame_diffs for x in inputs]),
        "frame_type_ids": np.stack([x.frame_type_ids for x in inputs]).astype(np.int64),
        "mb_type_maps": np.stack([x.mb_type_maps for x in inputs]).astype(np.int64),
        "luma_qp_maps": np.stack([x.luma_qp_maps for x in inputs]),
    }


class H4VDM:
    """Feature extractor over a flat parameter dict."""

    def __init__(self, config: ModelConfig):
        c = self.config = config

        def vit1(name):
            return ViT(name, c.height, c.width, c.patch, 3, c.d_vit1, c.vit1_depth,
                       c.vit1_heads, c.d_t, c.mlp_ratio)

        def vit2(name, channels):
            return ViT(name, c.height, c.width, c.patch, channels, c.d_vit2, c.vit2_depth,
                       c.vit2_heads, c.d_t, c.mlp_ratio)

        self.i_proc = vit1("i_proc")
        if c.df_shared:
            self.df_proc = [vit1("df_proc")]
        else:
            self.df_proc = [vit1(f"df_proc.{i}") for i in range(c.L)]
        self.ft_proc = Embedding("ft_proc", c.ft_vocab, c.d_t)
        self.mb_embed = Embedding("m_proc.embed", c.mb_vocab, c.mb_dim)
        self.m_proc = vit2("m_proc.vit", c.mb_dim)
        self.l_proc = vit2("l_proc", 1)
        self.joint = Encoder("joint.encoder", c.d_t, c.joint_depth, c.joint_heads, c.mlp_ratio,
                             final_norm=c.joint_final_norm)
        self.out = Linear("out", c.n_tokens * c.d_t, c.d_r, init="uniform_small")

    # -- parameters ---------------------------------------------------------

    def _modules(self):
        return [self.i_proc, *self.df_proc, self.ft_proc, self.mb_embed, self.m_proc,
                self.l_proc, self.joint, self.out]

    def param_specs(self) -> list[ParamSpec]:
        c = self.config
        specs = [s for m in self._modules() for s in m.param_specs()]
        specs.append(ParamSpec("special", (4, c.d_t), "normal"))
        specs.append(ParamSpec("joint.pos", (c.n_tokens, c.d_t), "normal"))
        return specs

    def n_params(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self.param_specs())

    def param_breakdown(self) -> dict[str, int]:
        """Parameter counts per branch; keys are the leading name component."""
        out: dict[str, int] = {}
        for s in self.param_specs():
            group = s.name.split(".")[0]
            out[group] = out.get(group, 0) + int(np.prod(s.shape))
        return out

    def init_params(self, seed: int, dtype=np.float32) -> dict:
        rng = np.random.default_rng(seed)
        return {s.name: init_array(s, rng, dtype) for s in self.param_specs()}

    def check_params(self, p: dict) -> None:
        for s in self.param_specs():
            if s.name not in p:
                raise ShapeMismatch(f"missing parameter {s.name}")
            if tuple(p[s.name].shape) != s.shape:
                raise ShapeMismatch(f"{s.name}: expected {s.shape}, got {p[s.name].shape}")

    # -- forward / backward ---------------------------------------------------

    def _check_batch(self, batch: dict) -> int:
        c = self.config
        b = batch["i_frame"].shape[0]
        expected = {
            "i_frame": (b, c.height, c.width, 3),
            "frame_diffs": (b, c.L, c.height, c.width, 3),
            "frame_type_ids": (b, c.L),
            "mb_type_maps": (b, c.L, c.height, c.width, 1),
            "luma_qp_maps": (b, c.L, c.height, c.width, 1),
        }
        for key, shape in expected.items():
            if batch[key].shape != shape:
                raise ShapeMismatch(f"{key}: expected {shape}, got {batch[key].shape}")
        return b

    def tokens(self, p: dict, batch: dict):
        """Return the ``(B, 4L+5, D_t)`` token sequence before the joint encoder."""
        c = self.config
        b = self._check_batch(batch)
        L, H, W = c.L, c.height, c.width
        dt = p["special"].dtype
        cache = {}
        t1, cache["i"] = self.i_proc.forward(p, batch["i_frame"].astype(dt, copy=False))
        diffs = batch["frame_diffs"].astype(dt, copy=False)
        if c.df_shared:
            df, cache["df"] = self.df_proc[0].forward(p, diffs.reshape(b * L, H, W, 3))
            df = df.reshape(b, L, c.d_t)
        else:
            outs, cache["df"] = [], []
            for i, vit in enumerate(self.df_proc):
                y, ci = vit.forward(p, diffs[:, i])
                outs.append(y)
                cache["df"].append(ci)
            df = np.stack(outs, axis=1)
        ft, cache["ft"] = self.ft_proc.forward(p, batch["frame_type_ids"])
        emb, cache["mb"] = self.mb_embed.forward(p, batch["mb_type_maps"][..., 0])
        m, cache["m"] = self.m_proc.forward(p, emb.reshape(b * L, H, W, c.mb_dim))
        lq, cache["l"] = self.l_proc.forward(
            p, batch["luma_qp_maps"].astype(dt, copy=False).reshape(b * L, H, W, 1))
        s = np.broadcast_to(p["special"], (b, 4, c.d_t))
        seq = np.concatenate([
            t1[:, None], s[:, 0:1], df, s[:, 1:2], ft, s[:, 2:3],
            m.reshape(b, L, c.d_t), s[:, 3:4], lq.reshape(b, L, c.d_t)], axis=1)
        return seq, cache

    def forward(self, p: dict, batch: dict):
        """Return ``(r, cache)`` with ``r`` of shape ``(B, D_r)``."""
        seq, c_tok = self.tokens(p, batch)
        z, c_joint = self.joint.forward(p, seq + p["joint.pos"])
        b = z.shape[0]
        r, c_out = self.out.forward(p, z.reshape(b, -1))
        return r, (c_tok, c_joint, c_out, z.shape)

    def extract(self, p: dict, inputs: Sequence[ModelInput] | dict) -> np.ndarray:
        batch = inputs if isinstance(inputs, dict) else stack_inputs(inputs)
        return self.forward(p, batch)[0]

    def backward(self, p: dict, dr: np.ndarray, cache) -> dict:
        """Gradients of a scalar objective given ``dr = d objective / d r``."""
        c = self.config
        c_tok, c_joint, c_out, zshape = cache
        g = {k: np.zeros_like(v) for k, v in p.items()}
        b = zshape[0]
        L = c.L
        dz = self.out.backward(p, g, dr, c_out).reshape(zshape)
        dseq = self.joint.backward(p, g, dz, c_joint)
        g["joint.pos"] += dseq.sum(axis=0)
        g["special"] += dseq[:, [1, L + 2, 2 * L + 3, 3 * L + 4]].sum(axis=0)
        self.i_proc.backward(p, g, dseq[:, 0], c_tok["i"])
        ddf = dseq[:, 2:L + 2]
        if c.df_shared:
            self.df_proc[0].backward(p, g, ddf.reshape(b * L, c.d_t), c_tok["df"])
        else:
            for i, vit in enumerate(self.df_proc):
                vit.backward(p, g, ddf[:, i], c_tok["df"][i])
        self.ft_proc.backward(p, g, dseq[:, L + 3:2 * L + 3], c_tok["ft"])
        dm = dseq[:, 2 * L + 4:3 * L + 4].reshape(b * L, c.d_t)
        demb = self.m_proc.backward(p, g, dm, c_tok["m"], need_input_grad=True)
        self.mb_embed.backward(p, g, demb, c_tok["mb"])
        self.l_proc.backward(p, g, dseq[:, 3 * L + 5:].reshape(b * L, c.d_t), c_tok["l"])
        return g

    def model_card(self, seed: int | None = None, preset_name: str | None = None) -> dict:
        return {
            "architecture": "h4vdm",
            "preset": preset_name,
            "config": self.config.to_dict(),
            "seed": seed,
            "pooling": POOLING,
            "scaling": SCALING,
            "n_tokens": self.config.n_tokens,
            "n_params": self.n_params(),
            "param_breakdown": self.param_breakdown(),
        }


# -- similarity and loss -------------------------------------------------------

def similarity(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """``1 - tanh(||r1 - r2||_2)`` along the last axis."""
    r1, r2 = np.asarray(r1), np.asarray(r2)
    if r1.shape != r2.shape:
        raise DimensionMismatch(f"feature shapes differ: {r1.shape} vs {r2.shape}")
    return 1.0 - np.tanh(np.linalg.norm(r1 - r2, axis=-1))


def pair_loss(r1: np.ndarray, r2: np.ndarray, y) -> np.ndarray:
    """Binary cross-entropy on the clamped similarity, per pair."""
    s = np.clip(similarity(r1, r2), LOSS_EPS, 1.0 - LOSS_EPS)
    y = np.asarray(y, dtype=s.dtype)
    return -(y * np.log(s) + (1.0 - y) * np.log1p(-s))


def pair_loss_grad(r1: np.ndarray, r2: np.ndarray, y):
    """Mean pair loss over the batch and its gradients w.r.t. ``r1`` and ``r2``."""
    r1, r2 = np.asarray(r1), np.asarray(r2)
    if r1.shape != r2.shape:
        raise DimensionMismatch(f"feature shapes differ: {r1.shape} vs {r2.shape}")
    y = np.asarray(y, dtype=r1.dtype).reshape(-1)
    n = len(y)
    delta = r1 - r2
    dist = np.linalg.norm(delta, axis=-1)
    th = np.tanh(dist)
    s = 1.0 - th
    inside = (s > LOSS_EPS) & (s < 1.0 - LOSS_EPS)
    sc = np.clip(s, LOSS_EPS, 1.0 - LOSS_EPS)
    loss = -(y * np.log(sc) + (1.0 - y) * np.log1p(-sc))
    dl_ds = np.where(inside, -y / sc + (1.0 - y) / (1.0 - sc), 0.0) / n
    ds_ddist = -(1.0 - th * th)
    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(dist > 0, dl_ds * ds_ddist / safe, 0.0)
    dr1 = (coef[:, None] * delta).astype(r1.dtype, copy=False)
    return float(loss.mean()), dr1, -dr1


def concat_batches(a: dict, b: dict) -> dict:
    return {k: np.concatenate([a[k], b[k]]) for k in a}


def loss_and_grads(model: H4VDM, p: dict, batch1: dict, batch2: dict, y):
    """Mean pair loss over ``(batch1[i], batch2[i], y[i])`` and parameter gradients.

    Both sides run through the shared weights in a single forward pass.
    """
    n = batch1["i_frame"].shape[0]
    r, cache = model.forward(p, concat_batches(batch1, batch2))
    loss, dr1, dr2 = pair_loss_grad(r[:n], r[n:], y)
    grads = model.backward(p, np.concatenate([dr1, dr2]), cache)
    return loss, grads, r
