"""Modality encoders producing the global embedding ``I``.

``ImageEncoder`` is a frozen stand-in for CLIP: three non-overlapping
strided ("patchify") convolutions at strides 4, 8 and 16 with ReLU, whose
last level is mean-pooled and passed through a frozen linear map.

``SeqEncoder`` is a small bidirectional transformer (3 blocks, 2 heads) for
acoustic / facial feature sequences, trainable or frozen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import generator
from .transformer import attention_weights


@dataclass
class ImageFeatures:
    global_embedding: Tensor
    levels: list[Tensor]


@dataclass
class SeqFeatures:
    pooled: Tensor
    per_step: Tensor


def patchify_conv(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Conv with kernel == stride on (B, H, W, C) maps, as reshape + matmul."""
    bsz, h, wd, c = x.shape
    if h % stride or wd % stride:
        raise ShapeError(f"patchify_conv: {h}x{wd} not divisible by stride {stride}")
    x = x.reshape(bsz, h // stride, stride, wd // stride, stride, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, h // stride, wd // stride, stride * stride * c)
    return x @ w + b


class ImageEncoder:
    STRIDES = (4, 2, 2)  # cumulative 4, 8, 16

    def __init__(self, d_I: int = 32, seed: int = 0, channels=(16, 32)):
        self.d_I = d_I
        self.channels = (3, *channels, d_I)
        rng = generator(seed, "image-encoder")
        self.params: dict[str, Tensor] = {}
        for i, s in enumerate(self.STRIDES):
            fan_in = s * s * self.channels[i]
            self._put(f"encoder.image.conv{i}.w", rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, self.channels[i + 1])))
            self._put(f"encoder.image.conv{i}.b", rng.normal(0, 0.1, self.channels[i + 1]))
        self._put("encoder.image.proj.w", rng.normal(0, d_I**-0.5, (d_I, d_I)))
        self._put("encoder.image.proj.b", np.zeros(d_I))

    def _put(self, name, arr):
        t = Tensor(arr, requires_grad=False, name=name)
        t.data.setflags(write=False)
        self.params[name] = t

    def level_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        out, stride = [], 1
        for i, s in enumerate(self.STRIDES):
            stride *= s
            out.append((h // stride, w // stride, self.channels[i + 1]))
        return out

    def encode(self, img) -> ImageFeatures:
        x = ad.as_tensor(img)
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"image must be (H, W, 3) or (B, H, W, 3), got {x.shape}")
        h, w = x.shape[1:3]
        if h % 16 or w % 16:
            raise ShapeError(f"image dims {h}x{w} must be divisible by 16")
        if x.data.min() < 0.0 or x.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        levels = []
        for i, s in enumerate(self.STRIDES):
            x = ad.relu(patchify_conv(x, self.params[f"encoder.image.conv{i}.w"],
                                      self.params[f"encoder.image.conv{i}.b"], s))
            levels.append(x)
        pooled = x.mean(axis=(1, 2))
        g = pooled @ self.params["encoder.image.proj.w"] + self.params["encoder.image.proj.b"]
        if single:
            return ImageFeatures(g[0], [lv[0] for lv in levels])
        return ImageFeatures(g, levels)

    __call__ = encode


def image_encoder_param_count(d_I: int, channels=(16, 32)) -> int:
    ch = (3, *channels, d_I)
    total = sum(s * s * ch[i] * ch[i + 1] + ch[i + 1] for i, s in enumerate(ImageEncoder.STRIDES))
    return total + d_I * d_I + d_I


class SeqEncoder:
    """Bidirectional transformer encoder over (L, d_feat) feature sequences."""

    def __init__(self, d_feat: int, d_I: int = 32, n_blocks: int = 3, n_heads: int = 2,
                 max_len: int = 64, trainable: bool = True, seed: int = 0, name: str = "seq"):
        if d_I % n_heads:
            raise ValueError("d_I must be divisible by n_heads")
        self.d_feat, self.d_I, self.n_blocks, self.n_heads = d_feat, d_I, n_blocks, n_heads
        self.max_len = max_len
        self.trainable = trainable
        self.prefix = f"encoder.{name}."
        rng = generator(seed, "seq-encoder", name)
        d = d_I
        arrays = {
            "in.w": rng.normal(0, d_feat**-0.5, (d_feat, d)),
            "in.b": np.zeros(d),
            "pos": rng.normal(0, 0.5, (max_len, d)),
        }
        for i in range(n_blocks):
            p = f"block{i}."
            arrays[p + "norm1"] = np.ones(d)
            for m in ("wq", "wk", "wv", "wo"):
                arrays[p + m] = rng.normal(0, d**-0.5, (d, d))
            arrays[p + "norm2"] = np.ones(d)
            arrays[p + "w1"] = rng.normal(0, d**-0.5, (d, 2 * d))
            arrays[p + "b1"] = np.zeros(2 * d)
            arrays[p + "w2"] = rng.normal(0, (2 * d) ** -0.5, (2 * d, d))
            arrays[p + "b2"] = np.zeros(d)
        arrays["final_norm"] = np.ones(d)
        self.params = {self.prefix + k: Tensor(v, requires_grad=trainable, name=self.prefix + k)
                       for k, v in arrays.items()}

    def _p(self, key: str) -> Tensor:
        return self.params[self.prefix + key]

    def encode(self, x) -> SeqFeatures:
        x = ad.as_tensor(x)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        b, n, f = x.shape
        if n < 1:
            raise ShapeError("empty sequence")
        if f != self.d_feat:
            raise ShapeError(f"feature width {f} != d_feat={self.d_feat}")
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len={self.max_len}")
        d, hh = self.d_I, self.n_heads
        h = x @ self._p("in.w") + self._p("in.b") + self._p("pos")[:n]
        nomask = np.zeros((1, 1, n, n), dtype=bool)
        for i in range(self.n_blocks):
            p = f"block{i}."
            z = ad.rms_norm(h, self._p(p + "norm1"))
            q = (z @ self._p(p + "wq")).reshape(b, n, hh, d // hh)
            k = (z @ self._p(p + "wk")).reshape(b, n, hh, d // hh)
            v = (z @ self._p(p + "wv")).reshape(b, n, hh, d // hh)
            att = attention_weights(q, k, nomask, (d // hh) ** -0.5)
            ctx = (att @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(b, n, d)
            h = h + ctx @ self._p(p + "wo")
            z = ad.rms_norm(h, self._p(p + "norm2"))
            h = h + ad.silu(z @ self._p(p + "w1") + self._p(p + "b1")) @ self._p(p + "w2") + self._p(p + "b2")
        per_step = ad.rms_norm(h, self._p("final_norm"))
        pooled = per_step.mean(axis=1)
        if single:
            return SeqFeatures(pooled[0], per_step[0])
        return SeqFeatures(pooled, per_step)

    __call__ = encode


def seq_encoder_param_count(d_feat: int, d_I: int = 32, n_blocks: int = 3, max_len: int = 64) -> int:
    d = d_I
    per_block = 2 * d + 4 * d * d + 2 * d * d + 2 * d + 2 * d * d + d
    return d_feat * d + d + max_len * d + n_blocks * per_block + d
