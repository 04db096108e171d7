"""Modules with explicit forward/backward over a flat parameter dict.

A module owns no arrays. It knows the names, shapes and initialisers of its
parameters (``param_specs``); ``forward(p, x)`` returns ``(y, cache)`` and
``backward(p, g, dy, cache)`` accumulates parameter gradients into ``g`` and
returns the gradient with respect to ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from . import functional as F

INIT_STD = 0.02
OUTPUT_LIMIT = 0.002


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # trunc_normal | normal | zeros | ones | uniform_small


def init_array(spec: ParamSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    if spec.init == "trunc_normal":
        x = rng.standard_normal(spec.shape)
        bad = np.abs(x) > 2
        while bad.any():
            x[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2
        return (INIT_STD * x).astype(dtype)
    if spec.init == "normal":
        return (INIT_STD * rng.standard_normal(spec.shape)).astype(dtype)
    if spec.init == "uniform_small":
        return rng.uniform(-OUTPUT_LIMIT, OUTPUT_LIMIT, spec.shape).astype(dtype)
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype)
    raise ValueError(f"unknown initialiser {spec.init!r}")


class Module:
    def __init__(self, name: str):
        self.name = name

    def param_specs(self) -> list[ParamSpec]:
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self.param_specs())

    def _k(self, leaf: str) -> str:
        return f"{self.name}.{leaf}"


class Linear(Module):
    def __init__(self, name, d_in, d_out, bias=True, init="trunc_normal"):
        super().__init__(name)
        self.d_in, self.d_out, self.bias, self.init = d_in, d_out, bias, init

    def param_specs(self):
        specs = [ParamSpec(self._k("W"), (self.d_in, self.d_out), self.init)]
        if self.bias:
            specs.append(ParamSpec(self._k("b"), (self.d_out,), "zeros"))
        return specs

    def forward(self, p, x):
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(f"{self.name}: expected last dim {self.d_in}, got {x.shape}")
        y = x @ p[self._k("W")]
        if self.bias:
            y = y + p[self._k("b")]
        return y, x

    def backward(self, p, g, dy, x, need_dx=True):
        g[self._k("W")] += x.reshape(-1, self.d_in).T @ dy.reshape(-1, self.d_out)
        if self.bias:
            g[self._k("b")] += dy.reshape(-1, self.d_out).sum(axis=0)
        return dy @ p[self._k("W")].T if need_dx else None


class LayerNorm(Module):
    def __init__(self, name, d, eps=1e-6):
        super().__init__(name)
        self.d, self.eps = d, eps

    def param_specs(self):
        return [ParamSpec(self._k("gamma"), (self.d,), "ones"),
                ParamSpec(self._k("beta"), (self.d,), "zeros")]

    def forward(self, p, x):
        return F.layer_norm(x, p[self._k("gamma")], p[self._k("beta")], self.eps)

    def backward(self, p, g, dy, cache):
        dx, dgamma, dbeta = F.layer_norm_backward(dy, p[self._k("gamma")], cache)
        g[self._k("gamma")] += dgamma
        g[self._k("beta")] += dbeta
        return dx


class Embedding(Module):
    def __init__(self, name, vocab, d):
        super().__init__(name)
        self.vocab, self.d = vocab, d

    def param_specs(self):
        return [ParamSpec(self._k("table"), (self.vocab, self.d), "normal")]

    def forward(self, p, ids):
        return F.embedding_lookup(p[self._k("table")], ids), ids

    def backward(self, p, g, dy, ids):
        g[self._k("table")] += F.embedding_backward(dy, ids, self.vocab)


class Attention(Module):
    """Multi-head self-attention; ``U`` has no bias, the output map ``V`` does."""

    def __init__(self, name, d, heads):
        super().__init__(name)
        if heads < 1 or d % heads:
            raise ShapeMismatch(f"{name}: heads={heads} must divide D={d}")
        self.d, self.h, self.dh = d, heads, d // heads

    def param_specs(self):
        return [ParamSpec(self._k("U"), (self.h, self.d, 3 * self.dh), "trunc_normal"),
                ParamSpec(self._k("V"), (self.d, self.d), "trunc_normal"),
                ParamSpec(self._k("b"), (self.d,), "zeros")]

    def forward(self, p, x):
        b, n, d = x.shape
        dh = self.dh
        qkv = np.tensordot(x, p[self._k("U")], axes=([2], [1])).transpose(0, 2, 1, 3)
        q, k, v = qkv[..., :dh], qkv[..., dh:2 * dh], qkv[..., 2 * dh:]
        scale = 1.0 / math.sqrt(dh)
        a = F.softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = a @ v
        cat = o.transpose(0, 2, 1, 3).reshape(b, n, d)
        y = cat @ p[self._k("V")] + p[self._k("b")]
        return y, (x, q, k, v, a, cat)

    def backward(self, p, g, dy, cache):
        x, q, k, v, a, cat = cache
        b, n, d = x.shape
        g[self._k("V")] += cat.reshape(-1, d).T @ dy.reshape(-1, d)
        g[self._k("b")] += dy.reshape(-1, d).sum(axis=0)
        do = (dy @ p[self._k("V")].T).reshape(b, n, self.h, self.dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        dlogits = F.softmax_backward(da, a) * (1.0 / math.sqrt(self.dh))
        dq = dlogits @ k
        dk = dlogits.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([dq, dk, dv], axis=-1)  # (B, h, N, 3dh)
        g[self._k("U")] += np.tensordot(x, dqkv, axes=([0, 1], [0, 2])).transpose(1, 0, 2)
        return np.tensordot(dqkv, p[self._k("U")], axes=([1, 3], [0, 2]))


class TransformerLayer(Module):
    """Pre-norm block: ``x + MSA(LN(x))`` then ``+ MLP(LN(.))`` with GELU."""

    def __init__(self, name, d, heads, mlp_ratio=4):
        super().__init__(name)
        self.ln1 = LayerNorm(self._k("ln1"), d)
        self.attn = Attention(self._k("attn"), d, heads)
        self.ln2 = LayerNorm(self._k("ln2"), d)
        self.fc1 = Linear(self._k("fc1"), d, mlp_ratio * d)
        self.fc2 = Linear(self._k("fc2"), mlp_ratio * d, d)

    def param_specs(self):
        return [s for m in (self.ln1, self.attn, self.ln2, self.fc1, self.fc2) for s in m.param_specs()]

    def forward(self, p, x):
        h1, c_ln1 = self.ln1.forward(p, x)
        att, c_att = self.attn.forward(p, h1)
        x = x + att
        h2, c_ln2 = self.ln2.forward(p, x)
        u, c_fc1 = self.fc1.forward(p, h2)
        m, c_fc2 = self.fc2.forward(p, F.gelu(u))
        return x + m, (c_ln1, c_att, c_ln2, c_fc1, u, c_fc2)

    def backward(self, p, g, dy, cache):
        c_ln1, c_att, c_ln2, c_fc1, u, c_fc2 = cache
        du = F.gelu_backward(self.fc2.backward(p, g, dy, c_fc2), u)
        dx = dy + self.ln2.backward(p, g, self.fc1.backward(p, g, du, c_fc1), c_ln2)
        return dx + self.ln1.backward(p, g, self.attn.backward(p, g, dx, c_att), c_ln1)


class Encoder(Module):
    def __init__(self, name, d, depth, heads, mlp_ratio=4, final_norm=True):
        super().__init__(name)
        self.layers = [TransformerLayer(self._k(f"layers.{i}"), d, heads, mlp_ratio) for i in range(depth)]
        self.norm = LayerNorm(self._k("norm"), d) if final_norm else None

    def param_specs(self):
        specs = [s for layer in self.layers for s in layer.param_specs()]
        return specs + (self.norm.param_specs() if self.norm else [])

    def forward(self, p, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(p, x)
            caches.append(c)
        c_norm = None
        if self.norm:
            x, c_norm = self.norm.forward(p, x)
        return x, (caches, c_norm)

    def backward(self, p, g, dy, cache):
        caches, c_norm = cache
        if self.norm:
            dy = self.norm.backward(p, g, dy, c_norm)
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(p, g, dy, c)
        return dy


class ViT(Module):
    """Patchify, project, prepend a class token, encode, project the class state."""

    def __init__(self, name, height, width, patch, channels, d, depth, heads, d_out, mlp_ratio=4):
        super().__init__(name)
        if height % patch or width % patch:
            raise ShapeMismatch(f"{name}: patch {patch} does not divide {height}x{width}")
        self.height, self.width, self.patch, self.channels = height, width, patch, channels
        self.K = (height // patch) * (width // patch)
        self.d = d
        self.proj = Linear(self._k("patch_proj"), patch * patch * channels, d)
        self.encoder = Encoder(self._k("encoder"), d, depth, heads, mlp_ratio, final_norm=True)
        self.head = Linear(self._k("head"), d, d_out)

    def param_specs(self):
        return (self.proj.param_specs()
                + [ParamSpec(self._k("cls"), (self.d,), "normal"),
                   ParamSpec(self._k("pos"), (self.K + 1, self.d), "normal")]
                + self.encoder.param_specs() + self.head.param_specs())

    def forward(self, p, x):
        if x.shape[1:] != (self.height, self.width, self.channels):
            raise ShapeMismatch(f"{self.name}: expected (B, {self.height}, {self.width}, "
                                f"{self.channels}), got {x.shape}")
        b = x.shape[0]
        z, c_proj = self.proj.forward(p, F.patchify(x, self.patch))
        cls = np.broadcast_to(p[self._k("cls")], (b, 1, self.d))
        z = np.concatenate([cls, z], axis=1) + p[self._k("pos")]
        z, c_enc = self.encoder.forward(p, z)
        y, c_head = self.head.forward(p, z[:, 0])
        return y, (c_proj, c_enc, c_head, z.shape)

    def backward(self, p, g, dy, cache, need_input_grad=False):
        c_proj, c_enc, c_head, zshape = cache
        dz = np.zeros(zshape, dtype=dy.dtype)
        dz[:, 0] = self.head.backward(p, g, dy, c_head)
        dz = self.encoder.backward(p, g, dz, c_enc)
        g[self._k("pos")] += dz.sum(axis=0)
        g[self._k("cls")] += dz[:, 0].sum(axis=0)
        dpatch = self.proj.backward(p, g, dz[:, 1:], c_proj, need_dx=need_input_grad)
        if dpatch is None:
            return None
        return F.unpatchify(dpatch, self.patch, self.height, self.width)
