"""EmT model assembly: graph encoder, transformer blocks, and output head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from .heads import ClasHead, RegrHead
from .rmpg import RMPG
from .tct import clas_blocks, regr_blocks

VARIANT_DEPTH = {"S": 2, "B": 4, "D": 8}
ABLATIONS = ("no_rmpg", "single_gcn", "no_tct", "no_sta")


def k_for_channels(c: int) -> int:
    """Chebyshev order: 3 for up to 32 channels, 4 for denser montages."""
    return 3 if c <= 32 else 4


@dataclass
class EmTConfig:
    n_nodes: int
    task: str = "classification"
    variant: str = "B"
    n_feat: int = 7
    d_g: int = 32
    gcn_depths: tuple[int, ...] = (1, 2)
    k_order: int | None = None
    cheb_hidden: int = 32
    n_head: int = 16
    d_head: int = 32
    n_anchor: int = 3
    alpha: float = 0.25
    p_base: float = 0.25
    rnn: str = "gru"
    rnn_layers: int = 2
    n_class: int = 2
    depth: int | None = None
    no_rmpg: bool = False
    single_gcn: bool = False
    no_tct: bool = False
    no_sta: bool = False

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANT_DEPTH:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.gcn_depths = tuple(self.gcn_depths)
        if self.k_order is None:
            self.k_order = k_for_channels(self.n_nodes)
        if self.depth is None:
            self.depth = VARIANT_DEPTH[self.variant]
        if self.depth < 1:
            raise ValueError("TCT depth must be >= 1")

    @property
    def branch_depths(self) -> tuple[int, ...]:
        if self.no_rmpg:
            return ()
        if self.single_gcn:
            return self.gcn_depths[:1]
        return self.gcn_depths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_depths"] = list(self.gcn_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmTConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class EmT(nn.Module):
    """(B, seq, c, f) temporal graphs -> logits (B, n_class) or per-step scores (B, seq)."""

    def __init__(self, cfg: EmTConfig):
        super().__init__()
        self.cfg = cfg
        self.rmpg = RMPG(cfg.n_nodes, cfg.n_feat, cfg.d_g, cfg.branch_depths, cfg.k_order,
                         cfg.cheb_hidden)
        depth = 0 if cfg.no_tct else cfg.depth
        if cfg.task == "classification":
            self.blocks = clas_blocks(depth, cfg.d_g, cfg.n_head, cfg.d_head, cfg.n_anchor,
                                      cfg.alpha, cfg.p_base, use_sta=not cfg.no_sta)
        else:
            self.blocks = regr_blocks(depth, cfg.d_g, cfg.d_head, cfg.rnn, cfg.rnn_layers,
                                      cfg.p_base)
        width = self.blocks[-1].width_out if len(self.blocks) else cfg.d_g
        self.head = (ClasHead(width, cfg.n_class) if cfg.task == "classification"
                     else RegrHead(width))

    def encode(self, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the token sequence before and after the transformer blocks."""
        tokens = self.rmpg(g)
        z = tokens
        for block in self.blocks:
            z = block(z)
        return tokens, z

    def forward(self, g):
        return self.head(self.encode(g)[1])

    def n_parameters(self, prefix: str = "") -> int:
        return sum(p.numel() for name, p in self.named_parameters() if name.startswith(prefix))


def build_model(cfg: EmTConfig, seed: int | None = None, dtype=torch.float32) -> EmT:
    """Instantiate with a private init stream so global RNG state is untouched."""
    if seed is None:
        return EmT(cfg).to(dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EmT(cfg)
    return model.to(dtype)
