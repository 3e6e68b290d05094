"""External spatial attention: linear-cost attention over the spatial axes.

The query is a composite of the downsampled context image (where pixels are
known) and the bottleneck feature (under the hole):

    Q = I_sub * (1 - M_sub) + F_in * M_sub

Attention then contracts Q per channel with two small learnable operators
that are independent of the sample: a key operator acting along the height
axis and a value operator acting along the width axis,

    out = (Q^T . K)^T . V

Each operator is two linear layers with an activation between them, shared
across channels and samples, so the cost is linear in h * w instead of the
quadratic cost of dense self-attention.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError


def masked_query(f_in, i_sub, m_sub):
    """Composite feature/context query at the bottleneck scale.

    Output pixels with m_sub = 1 depend only on f_in, pixels with m_sub = 0
    only on i_sub (exact partition, no blending).
    """
    if f_in.shape != i_sub.shape:
        raise DimensionError(f"feature/context shape mismatch: {f_in.shape} vs {i_sub.shape}")
    if m_sub.shape[-2:] != f_in.shape[-2:]:
        raise DimensionError(f"mask spatial size {m_sub.shape[-2:]} != {f_in.shape[-2:]}")
    return i_sub * (1.0 - m_sub) + f_in * m_sub


class ExternalOperator(nn.Module):
    """Two linear layers with an activation, applied along one spatial axis.

    ``axis_len`` is the length of the axis the operator contracts; the
    operator maps axis_len -> hidden -> axis_len and is shared across all
    other dimensions of its input.
    """

    def __init__(self, axis_len, hidden, activation="relu"):
        super().__init__()
        if activation not in ("relu", "gelu", "identity"):
            raise DimensionError(f"unsupported operator activation: {activation}")
        self.axis_len = axis_len
        self.hidden = hidden
        self.activation = activation
        self.fc1 = nn.Linear(axis_len, hidden)
        self.fc2 = nn.Linear(hidden, axis_len)
        # small init keeps the two contractions well-scaled at depth
        for fc in (self.fc1, self.fc2):
            nn.init.normal_(fc.weight, std=1.0 / math.sqrt(axis_len))
            nn.init.zeros_(fc.bias)

    def forward(self, x):
        y = self.fc1(x)
        if self.activation == "relu":
            y = F.relu(y)
        elif self.activation == "gelu":
            y = F.gelu(y)
        return self.fc2(y)

    def set_identity(self):
        """Configure as an exact identity map (test mode); needs hidden == axis_len."""
        if self.hidden != self.axis_len:
            raise DimensionError("identity configuration requires hidden == axis_len")
        self.activation = "identity"
        with torch.no_grad():
            self.fc1.weight.copy_(torch.eye(self.axis_len))
            self.fc1.bias.zero_()
            self.fc2.weight.copy_(torch.eye(self.axis_len))
            self.fc2.bias.zero_()

    def load_dense(self, w1, b1, w2, b2):
        """Install explicit weights (oracle tests hand-specify operators this way)."""
        with torch.no_grad():
            self.fc1.weight.copy_(torch.as_tensor(w1))
            self.fc1.bias.copy_(torch.as_tensor(b1))
            self.fc2.weight.copy_(torch.as_tensor(w2))
            self.fc2.bias.copy_(torch.as_tensor(b2))


class ExternalSpatialAttention(nn.Module):
    """The full module: context projection, query compositing and attention.

    Operates on bottleneck features of fixed spatial size (height, width);
    the context image and mask come in at full resolution and are reduced by
    ``factor`` (average pooling for the image, block-max for the mask).
    """

    def __init__(
        self,
        channels,
        height,
        width,
        d_k=None,
        d_v=None,
        activation="relu",
        double_norm=False,
        context_channels=3,
    ):
        super().__init__()
        self.channels = channels
        self.height = height
        self.width = width
        self.double_norm = double_norm
        d_k = d_k if d_k is not None else min(height, width)
        d_v = d_v if d_v is not None else min(height, width)
        self.key_op = ExternalOperator(height, d_k, activation)
        self.value_op = ExternalOperator(width, d_v, activation)
        self.context_proj = nn.Conv2d(context_channels, channels, kernel_size=1)

    def composite_query(self, f_in, context, mask):
        """Downsample + project the context and blend it with f_in under the mask."""
        if f_in.shape[-3] != self.channels or f_in.shape[-2:] != (self.height, self.width):
            raise DimensionError(
                f"expected features ({self.channels}, {self.height}, {self.width}), "
                f"got {tuple(f_in.shape[-3:])}"
            )
        fh, fw = context.shape[-2] // self.height, context.shape[-1] // self.width
        if fh < 1 or fh != fw or context.shape[-2] % self.height or context.shape[-1] % self.width:
            raise DimensionError(
                f"context size {tuple(context.shape[-2:])} is not an integer multiple "
                f"of the feature size ({self.height}, {self.width})"
            )
        if mask.shape[-2:] != context.shape[-2:]:
            raise DimensionError("mask and context spatial sizes differ")
        i_sub = self.context_proj(F.avg_pool2d(context, fh))
        m_sub = F.max_pool2d(mask, fh)
        return masked_query(f_in, i_sub, m_sub)

    def external_attention(self, q):
        """Contract the height axis with the key operator, then width with the value."""
        if q.shape[-2:] != (self.height, self.width):
            raise DimensionError(f"query spatial size {tuple(q.shape[-2:])} != "
                                 f"({self.height}, {self.width})")
        attn = self.key_op(q.transpose(-2, -1))  # (.., w, h): Q^T contracted along h
        if self.double_norm:
            # optional stabilization after the external-attention lineage:
            # softmax over the contracted axis, then L1 renormalization
            attn = attn.softmax(dim=-1)
            attn = attn / (1e-9 + attn.sum(dim=-2, keepdim=True))
        attn = attn.transpose(-2, -1)  # (.., h, w): (Q^T . K)^T
        return self.value_op(attn)

    def forward(self, f_in, context, mask):
        return self.external_attention(self.composite_query(f_in, context, mask))


def full_self_attention(q):
    """Dense self-attention over all h*w positions; the quadratic reference.

    Used only as the complexity baseline for MAC counts and benchmarks.
    """
    b, c, h, w = q.shape
    flat = q.reshape(b, c, h * w)
    attn = torch.softmax(flat.transpose(1, 2) @ flat / math.sqrt(c), dim=-1)  # (b, n, n)
    out = flat @ attn.transpose(1, 2)
    return out.reshape(b, c, h, w)


def count_flops(h, w, c, d_k, d_v, mode):
    """Analytic multiply-accumulate count for one forward pass.

    espa: both operators run per channel, two matmuls each ->
    2 * c * h * w * (d_k + d_v). Dense self-attention costs one n x n
    similarity plus one aggregation: 2 * c * (h * w)^2.
    """
    if min(h, w, c) < 1:
        raise DimensionError("dimensions must be positive")
    if mode == "espa":
        if min(d_k, d_v) < 1:
            raise DimensionError("hidden widths must be positive")
        return 2 * c * h * w * (d_k + d_v)
    if mode == "full_self_attention":
        return 2 * c * (h * w) ** 2
    raise DimensionError(f"unknown flop-count mode: {mode}")
