"""Dual-stream multi-modal attention.

Text and image token streams are projected with separate QKV weights,
rotary position embeddings are applied to Q and K (1D contiguous positions,
text first), and the streams are concatenated for joint scaled-dot-product
attention over the full sequence. Guidance hooks in between projection and
attention, on the JointQKV value.

All value types freeze their arrays (read-only, private copies), so they
are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensors import as_tensor, matmul, softmax_rows

__all__ = [
    "StreamBatch",
    "LayerWeights",
    "JointQKV",
    "rope",
    "project_qkv",
    "joint_attention",
    "attention_weights",
    "DEFAULT_ROPE_BASE",
]

DEFAULT_ROPE_BASE = 10000.0


def _frozen(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass
class StreamBatch:
    """Paired text (S_t, D) and image (S_i, D) token blocks."""

    txt: np.ndarray
    img: np.ndarray

    def __post_init__(self):
        self.txt = _frozen(self.txt, "txt")
        self.img = _frozen(self.img, "img")
        if self.txt.ndim != 2 or self.img.ndim != 2:
            raise ShapeError(
                f"streams must be 2D token blocks, got txt {self.txt.shape}, img {self.img.shape}"
            )
        if self.txt.shape[0] < 1 or self.img.shape[0] < 1:
            raise ShapeError("each stream needs at least one token")
        if self.txt.shape[1] != self.img.shape[1]:
            raise ShapeError(
                f"streams disagree on hidden dimension: txt {self.txt.shape} vs img {self.img.shape}"
            )

    @property
    def dim(self) -> int:
        return self.txt.shape[1]


@dataclass
class LayerWeights:
    """Per-stream projection matrices for one attention layer.

    All six matrices are (D, D); D splits evenly into `heads` heads of
    d_h = D / heads coordinates each.
    """

    txt_wq: np.ndarray
    txt_wk: np.ndarray
    txt_wv: np.ndarray
    img_wq: np.ndarray
    img_wk: np.ndarray
    img_wv: np.ndarray
    heads: int

    def __post_init__(self):
        names = ("txt_wq", "txt_wk", "txt_wv", "img_wq", "img_wk", "img_wv")
        for name in names:
            setattr(self, name, _frozen(getattr(self, name), name))
        d = self.txt_wq.shape[0]
        for name in names:
            if getattr(self, name).shape != (d, d):
                raise ShapeError(
                    f"{name} must be ({d}, {d}), got {getattr(self, name).shape}"
                )
        if self.heads < 1:
            raise ValueError(f"heads must be positive, got {self.heads}")
        if d % self.heads != 0:
            raise ShapeError(f"hidden dimension {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.txt_wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class JointQKV:
    """Concatenated per-head Q, K, V of shape (S, H, d_h).

    RoPE is already applied to q and k; v never receives it. Image tokens
    occupy the half-open slice img_range of the sequence, text tokens the
    prefix before it.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    img_range: tuple[int, int]

    def __post_init__(self):
        self.q = _frozen(self.q, "q")
        self.k = _frozen(self.k, "k")
        self.v = _frozen(self.v, "v")
        if self.q.ndim != 3:
            raise ShapeError(f"q/k/v must be (S, H, d_h), got {self.q.shape}")
        if self.k.shape != self.q.shape or self.v.shape != self.q.shape:
            raise ShapeError(
                f"q, k, v shapes disagree: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        i_s, i_e = (int(self.img_range[0]), int(self.img_range[1]))
        self.img_range = (i_s, i_e)
        if not (0 <= i_s < i_e == self.q.shape[0]):
            raise ShapeError(
                f"image range {self.img_range} inconsistent with sequence length {self.q.shape[0]}"
            )

    @property
    def seq_len(self) -> int:
        return self.q.shape[0]


def rope(x, positions, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotate consecutive coordinate pairs (2j, 2j+1) of an (S, H, d_h) block.

    Pair j of the token at position p turns by the angle p * base**(-2j/d_h).
    Every rotation is an isometry, so per-pair norms are preserved; position
    0 is left untouched.
    """
    x = as_tensor(x, "rope input")
    if x.ndim != 3:
        raise ShapeError(f"rope expects an (S, H, d_h) block, got shape {x.shape}")
    s, _, dh = x.shape
    if dh % 2 != 0:
        raise ValueError(f"rope needs an even head dimension, got d_h={dh}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (s,):
        raise ShapeError(f"need one position per token: {pos.shape} positions for {s} tokens")
    theta = float(base) ** (-2.0 * np.arange(dh // 2, dtype=np.float64) / dh)
    angles = pos[:, None] * theta[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    even = x[:, :, 0::2]
    odd = x[:, :, 1::2]
    out = np.empty_like(x)
    out[:, :, 0::2] = even * cos - odd * sin
    out[:, :, 1::2] = even * sin + odd * cos
    return out


def _to_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, d = x.shape
    return x.reshape(s, heads, d // heads)


def project_qkv(batch: StreamBatch, weights: LayerWeights,
                rope_base: float = DEFAULT_ROPE_BASE) -> JointQKV:
    """Project both streams to per-head Q, K, V and apply RoPE to Q and K.

    Positions run 0..S_t-1 over the text tokens and continue contiguously
    S_t..S_t+S_i-1 over the image tokens. Returns the concatenated
    JointQKV, text first, with img_range = (S_t, S_t + S_i).
    """
    if batch.dim != weights.dim:
        raise ShapeError(
            f"batch hidden dimension {batch.dim} does not match weights {weights.dim}"
        )
    h = weights.heads
    s_t = batch.txt.shape[0]
    s_i = batch.img.shape[0]
    pos_txt = np.arange(s_t)
    pos_img = np.arange(s_t, s_t + s_i)

    q_txt = rope(_to_heads(matmul(batch.txt, weights.txt_wq), h), pos_txt, rope_base)
    k_txt = rope(_to_heads(matmul(batch.txt, weights.txt_wk), h), pos_txt, rope_base)
    v_txt = _to_heads(matmul(batch.txt, weights.txt_wv), h)
    q_img = rope(_to_heads(matmul(batch.img, weights.img_wq), h), pos_img, rope_base)
    k_img = rope(_to_heads(matmul(batch.img, weights.img_wk), h), pos_img, rope_base)
    v_img = _to_heads(matmul(batch.img, weights.img_wv), h)

    return JointQKV(
        q=np.concatenate([q_txt, q_img], axis=0),
        k=np.concatenate([k_txt, k_img], axis=0),
        v=np.concatenate([v_txt, v_img], axis=0),
        img_range=(s_t, s_t + s_i),
    )


def _attend(qkv: JointQKV) -> tuple[np.ndarray, np.ndarray]:
    s, h, dh = qkv.q.shape
    scale = 1.0 / np.sqrt(dh)
    # batched per-head matmuls: (H, S, d_h) @ (H, d_h, S) -> (H, S, S)
    logits = (qkv.q.transpose(1, 0, 2) @ qkv.k.transpose(1, 2, 0)) * scale
    weights = softmax_rows(logits.reshape(h * s, s)).reshape(h, s, s)
    merged = (weights @ qkv.v.transpose(1, 0, 2)).transpose(1, 0, 2).reshape(s, h * dh)
    return merged, weights


def attention_weights(qkv: JointQKV) -> np.ndarray:
    """Per-head attention weight tensor (H, S, S); every row sums to 1."""
    return _attend(qkv)[1]


def joint_attention(qkv: JointQKV, return_weights: bool = False):
    """Scaled dot-product attention over the joint sequence.

    Heads are re-merged and the output is split back into text and image
    streams at the image range boundary (so the text prefix must be
    non-empty; use attention_weights for image-only fixtures).
    """
    merged, weights = _attend(qkv)
    i_s, i_e = qkv.img_range
    out = StreamBatch(txt=merged[:i_s], img=merged[i_s:i_e])
    if return_weights:
        return out, weights
    return out
