"""Temporal contextual transformer: pre-norm residual blocks with task-specific token mixers."""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

RNN_KINDS = {"rnn": nn.RNN, "lstm": nn.LSTM, "gru": nn.GRU}


def attention(q, k, v, return_weights: bool = False):
    """Scaled dot-product attention along the token axis (second to last)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class MSA(nn.Module):
    """Per-head qkv projections; head outputs are stacked, not concatenated.

    (B, seq, d_in) -> (B, n_head, seq, d_head)
    """

    def __init__(self, d_in: int, n_head: int = 16, d_head: int = 32):
        super().__init__()
        self.n_head, self.d_head = n_head, d_head
        self.w_qkv = nn.Parameter(torch.empty(n_head, d_in, 3 * d_head))
        bound = math.sqrt(6.0 / (d_in + 3 * d_head))
        nn.init.uniform_(self.w_qkv, -bound, bound)

    def qkv(self, s):
        n_head, d_in, width = self.w_qkv.shape
        w = self.w_qkv.permute(1, 0, 2).reshape(d_in, n_head * width)
        proj = (s @ w).unflatten(-1, (n_head, width)).transpose(-2, -3)
        return proj.split(self.d_head, dim=-1)

    def forward(self, s, return_weights: bool = False):
        q, k, v = self.qkv(s)
        return attention(q, k, v, return_weights)


class STA(nn.Module):
    """Short-time aggregation over the stacked head outputs.

    Dropout at rate ``alpha * p_base``, an ``(n_anchor, 1)`` same-padded
    convolution across time with heads as channels, then the heads are laid
    side by side and projected to ``d_out``.  With ``use_conv=False`` only
    the reshape and projection remain.
    """

    def __init__(self, n_head: int = 16, d_head: int = 32, d_out: int = 32,
                 n_anchor: int = 3, alpha: float = 0.25, p_base: float = 0.25,
                 use_conv: bool = True):
        super().__init__()
        if n_anchor < 1 or n_anchor % 2 == 0:
            raise ValueError("n_anchor must be a positive odd number")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.n_anchor = n_anchor
        self.use_conv = use_conv
        self.dropout = nn.Dropout(alpha * p_base)
        if use_conv:
            self.conv = nn.Conv2d(n_head, n_head, (n_anchor, 1), stride=1,
                                  padding=(n_anchor // 2, 0), bias=False)
            with torch.no_grad():
                w = 0.01 * torch.randn_like(self.conv.weight)
                w[torch.arange(n_head), torch.arange(n_head), n_anchor // 2, 0] += 1.0
                self.conv.weight.copy_(w)
        self.w_sta = nn.Linear(n_head * d_head, d_out, bias=False)

    def forward(self, h):
        b, n_head, seq, d_head = h.shape
        if self.use_conv:
            if self.n_anchor > seq:
                raise ValueError(f"n_anchor={self.n_anchor} exceeds sequence length {seq}")
            h = self.conv(self.dropout(h))
        return self.w_sta(h.permute(0, 2, 1, 3).reshape(b, seq, n_head * d_head))


class ClasMixer(nn.Module):
    def __init__(self, d_in: int, n_head=16, d_head=32, n_anchor=3, alpha=0.25,
                 p_base=0.25, use_sta: bool = True):
        super().__init__()
        self.msa = MSA(d_in, n_head, d_head)
        self.sta = STA(n_head, d_head, d_in, n_anchor, alpha, p_base, use_conv=use_sta)

    @property
    def out_width(self) -> int:
        return self.sta.w_sta.out_features

    def forward(self, s):
        return self.sta(self.msa(s))


class RegrMixer(nn.Module):
    """Linear value projection followed by a bidirectional recurrent stack.

    Output width is ``2 * d_head``.
    """

    def __init__(self, d_in: int, d_head: int = 32, rnn: str = "gru", num_layers: int = 2):
        super().__init__()
        if rnn not in RNN_KINDS:
            raise ValueError(f"unknown rnn kind {rnn!r}")
        self.w_v = nn.Linear(d_in, d_head, bias=False)
        self.rnn = RNN_KINDS[rnn](d_head, d_head, num_layers=num_layers,
                                  batch_first=True, bidirectional=True)

    @property
    def out_width(self) -> int:
        return 2 * self.rnn.hidden_size

    def forward(self, s):
        out, _ = self.rnn(self.w_v(s))
        return out


class MLP(nn.Module):
    def __init__(self, width: int, hidden: int, p: float = 0.25):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        self.drop1 = nn.Dropout(p)
        self.drop2 = nn.Dropout(p)

    def forward(self, x):
        return self.drop2(self.fc2(self.drop1(F.relu(self.fc1(x)))))


class TCTBlock(nn.Module):
    """``Z' = mixer(norm(Z)) + R(Z)``; ``Z_next = MLP(norm(Z')) + Z'``.

    ``R`` is the identity unless the mixer changes the width, in which case
    it is a learned linear map.
    """

    def __init__(self, mixer: nn.Module, width_in: int, p_base: float = 0.25,
                 mlp_ratio: int = 2):
        super().__init__()
        width_out = mixer.out_width
        self.norm1 = nn.LayerNorm(width_in, eps=1e-5)
        self.mixer = mixer
        self.residual = (nn.Identity() if width_in == width_out
                         else nn.Linear(width_in, width_out, bias=False))
        self.norm2 = nn.LayerNorm(width_out, eps=1e-5)
        self.mlp = MLP(width_out, mlp_ratio * width_out, p_base)
        self.width_in, self.width_out = width_in, width_out

    def forward(self, z):
        if z.shape[-1] != self.width_in:
            raise ValueError(f"block expects width {self.width_in}, got {z.shape[-1]}")
        z = self.mixer(self.norm1(z)) + self.residual(z)
        return self.mlp(self.norm2(z)) + z


def clas_blocks(depth: int, d_g: int = 32, n_head: int = 16, d_head: int = 32,
                n_anchor: int = 3, alpha: float = 0.25, p_base: float = 0.25,
                use_sta: bool = True) -> nn.ModuleList:
    return nn.ModuleList(
        TCTBlock(ClasMixer(d_g, n_head, d_head, n_anchor, alpha, p_base, use_sta), d_g, p_base)
        for _ in range(depth)
    )


def regr_blocks(depth: int, d_g: int = 32, d_head: int = 32, rnn: str = "gru",
                num_layers: int = 2, p_base: float = 0.25) -> nn.ModuleList:
    blocks = nn.ModuleList()
    width = d_g
    for _ in range(depth):
        blocks.append(TCTBlock(RegrMixer(width, d_head, rnn, num_layers), width, p_base))
        width = 2 * d_head
    return blocks
