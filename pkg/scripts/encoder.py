"""
Encoder - Long-input function embedding model

Token + learned position embeddings, a stack of pre-norm blocks built on
sliding-window local attention with a few global-attention positions, CLS
pooling, and a two-layer projection head producing unit-norm embeddings.

Attention pattern for a sequence with window W (half = W // 2):

    local row i   : keys {j : |i - j| <= half}  U  {global j}, masked by attention_mask
                    scored with the local q/k/v projections
    global row i  : every unmasked key, scored with the global q/k/v projections

The band is materialised with unfold, so cost grows with L * W rather than L^2.
"""

import logging
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent))
from utils import chunked, config_section
from error_recovery import ConfigError, EncodingError

logger = logging.getLogger('faser.encoder')


@dataclass
class EncoderConfig:
    input_len: int = 128
    num_blocks: int = 2
    hidden_dim: int = 64
    intermediate_dim: int = 128
    num_heads: int = 2
    window: int = 16
    embed_dim: int = 32
    vocab_size: int = 3
    dropout: float = 0.1
    tie_global_projections: bool = False

    @classmethod
    def full_scale(cls, vocab_size: int) -> 'EncoderConfig':
        return cls(input_len=4096, num_blocks=8, hidden_dim=768, intermediate_dim=2048,
                   num_heads=12, window=512, embed_dim=128, vocab_size=vocab_size)

    @classmethod
    def from_config(cls, config: Dict, vocab_size: Optional[int] = None) -> 'EncoderConfig':
        settings = config_section(config, 'encoder')
        known = {f.name for f in fields(cls)}
        unknown = set(settings) - known
        if unknown:
            raise ConfigError(f"unknown encoder settings: {', '.join(sorted(unknown))}")
        cfg = cls(**settings)
        if vocab_size is not None:
            cfg.vocab_size = vocab_size
        cfg.validate()
        return cfg

    def validate(self):
        for name in ("input_len", "num_blocks", "hidden_dim", "intermediate_dim",
                     "num_heads", "window", "embed_dim", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"encoder.{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.window % 2:
            raise ConfigError(f"window must be even, got {self.window}")
        if self.window > self.input_len:
            raise ConfigError(f"window {self.window} exceeds input_len {self.input_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> Dict:
        return asdict(self)


def _pad_band(mask: torch.Tensor, half: int) -> torch.Tensor:
    """(B, L) bool -> (B, L, 2*half+1) bool window view, out-of-range slots False."""
    padded = F.pad(mask.to(torch.float32), (half, half))
    return padded.unfold(1, 2 * half + 1, 1) > 0.5


def sliding_window_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                             attention_mask: torch.Tensor, global_mask: torch.Tensor,
                             window: int,
                             q_global: Optional[torch.Tensor] = None,
                             k_global: Optional[torch.Tensor] = None,
                             v_global: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Windowed attention with global positions.

    q, k, v (and the optional global projections) are (B, A, L, d);
    attention_mask and global_mask are (B, L). Returns (B, A, L, d).
    A query row with no visible key produces zeros.
    """
    if window % 2:
        raise ConfigError(f"window must be even, got {window}")
    B, A, L, d = q.shape
    half = window // 2
    span = 2 * half + 1
    scale = 1.0 / math.sqrt(d)
    neg = torch.finfo(q.dtype).min

    attention_mask = attention_mask.bool()
    global_mask = global_mask.bool() & attention_mask

    # local band; global keys are scored separately so they are excluded here
    k_win = F.pad(k, (0, 0, half, half)).unfold(2, span, 1)          # (B, A, L, d, span)
    v_win = F.pad(v, (0, 0, half, half)).unfold(2, span, 1)
    band_ok = _pad_band(attention_mask & ~global_mask, half)         # (B, L, span)
    band_scores = torch.einsum('bald,baldw->balw', q, k_win) * scale
    band_scores = band_scores.masked_fill(~band_ok[:, None], neg)
    row_ok = band_ok.any(-1)                                         # (B, L)

    num_global = int(global_mask.sum(1).max().item()) if L else 0
    if num_global:
        order = torch.argsort(global_mask.long(), dim=1, descending=True, stable=True)[:, :num_global]
        g_ok = torch.gather(global_mask, 1, order)                   # (B, G)
        idx = order[:, None, :, None].expand(B, A, num_global, d)
        k_glob = torch.gather(k, 2, idx)
        v_glob = torch.gather(v, 2, idx)
        glob_scores = torch.einsum('bald,bagd->balg', q, k_glob) * scale
        glob_scores = glob_scores.masked_fill(~g_ok[:, None, None, :], neg)
        scores = torch.cat([band_scores, glob_scores], dim=-1)
        row_ok = row_ok | g_ok.any(-1, keepdim=True)
    else:
        scores = band_scores

    probs = torch.softmax(scores, dim=-1) * row_ok[:, None, :, None].to(q.dtype)
    out = torch.einsum('balw,baldw->bald', probs[..., :span], v_win)
    if not num_global:
        return out
    out = out + torch.einsum('balg,bagd->bald', probs[..., span:], v_glob)

    # global rows see the whole sequence through the global projections
    qg = q if q_global is None else q_global
    kg = k if k_global is None else k_global
    vg = v if v_global is None else v_global
    g_scores = torch.einsum('bagd,bald->bagl', torch.gather(qg, 2, idx), kg) * scale
    g_scores = g_scores.masked_fill(~attention_mask[:, None, None, :], neg)
    g_probs = torch.softmax(g_scores, dim=-1) * attention_mask.any(-1)[:, None, None, None].to(q.dtype)
    g_out = torch.einsum('bagl,bald->bagd', g_probs, vg)
    g_out = torch.where(g_ok[:, None, :, None], g_out, torch.gather(out, 2, idx))
    return out.scatter(2, idx, g_out)


def dense_reference_attention(q, k, v, attention_mask, global_mask, window,
                              q_global=None, k_global=None, v_global=None) -> torch.Tensor:
    """O(L^2) masked-dense rendition of sliding_window_attention, for checking it."""
    B, A, L, d = q.shape
    half = window // 2
    attention_mask = attention_mask.bool()
    global_mask = global_mask.bool() & attention_mask
    pos = torch.arange(L)
    near = (pos[:, None] - pos[None, :]).abs() <= half                 # (L, L)
    allowed = (near[None] | global_mask[:, None, :]) & attention_mask[:, None, :]

    def attend(qq, kk, vv, mask):
        scores = qq @ kk.transpose(-1, -2) / math.sqrt(d)
        scores = scores.masked_fill(~mask[:, None], float('-inf'))
        probs = torch.softmax(scores, dim=-1)
        probs = torch.nan_to_num(probs, nan=0.0)
        return probs @ vv

    out = attend(q, k, v, allowed)
    glob = attend(q if q_global is None else q_global,
                  k if k_global is None else k_global,
                  v if v_global is None else v_global,
                  attention_mask[:, None, :].expand(B, L, L))
    return torch.where(global_mask[:, None, :, None], glob, out)


class WindowedSelfAttention(nn.Module):
    """Multi-head sliding-window attention with separate global projections."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.num_heads = cfg.num_heads
        self.head_dim = H // cfg.num_heads
        self.window = cfg.window
        self.query = nn.Linear(H, H)
        self.key = nn.Linear(H, H)
        self.value = nn.Linear(H, H)
        if cfg.tie_global_projections:
            self.query_global = self.key_global = self.value_global = None
        else:
            self.query_global = nn.Linear(H, H)
            self.key_global = nn.Linear(H, H)
            self.value_global = nn.Linear(H, H)
        self.output = nn.Linear(H, H)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, attention_mask, global_mask):
        B, L, H = x.shape
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        if self.query_global is not None and bool(global_mask.any()):
            qg = self._heads(self.query_global(x))
            kg = self._heads(self.key_global(x))
            vg = self._heads(self.value_global(x))
        else:
            qg = kg = vg = None
        ctx = sliding_window_attention(q, k, v, attention_mask, global_mask, self.window, qg, kg, vg)
        return self.output(ctx.transpose(1, 2).reshape(B, L, H))


class LongformerBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.hidden_dim)
        self.attn = WindowedSelfAttention(cfg)
        self.ffn_norm = nn.LayerNorm(cfg.hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.intermediate_dim),
            nn.GELU(),
            nn.Linear(cfg.intermediate_dim, cfg.hidden_dim),
        )
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, attention_mask, global_mask):
        x = x + self.dropout(self.attn(self.attn_norm(x), attention_mask, global_mask))
        x = x + self.dropout(self.ffn(self.ffn_norm(x)))
        return x


class FaserEncoder(nn.Module):
    """Function-string encoder producing unit-norm embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.token_embeddings = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.position_embeddings = nn.Embedding(cfg.input_len, cfg.hidden_dim)
        self.embed_dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList([LongformerBlock(cfg) for _ in range(cfg.num_blocks)])
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        self.head = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.embed_dim),
        )
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int = 0) -> 'FaserEncoder':
        """Freshly initialised model, identical for identical (cfg, seed)."""
        torch.manual_seed(seed)
        return cls(cfg)

    def forward(self, ids: torch.Tensor, attention_mask: torch.Tensor,
                global_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, L) ids -> (B, E) unit-norm embeddings."""
        if ids.dim() != 2 or ids.shape[1] != self.cfg.input_len:
            raise EncodingError(f"expected ids of shape (batch, {self.cfg.input_len}), got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise EncodingError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        attention_mask = attention_mask.bool()
        if global_mask is None:
            global_mask = torch.zeros_like(attention_mask)
            global_mask[:, 0] = True
        global_mask = global_mask.bool()

        positions = torch.arange(self.cfg.input_len, device=ids.device)
        x = self.token_embeddings(ids) + self.position_embeddings(positions)[None]
        x = self.embed_dropout(x)
        for block in self.blocks:
            x = block(x, attention_mask, global_mask)
        pooled = self.final_norm(x)[:, 0]
        return F.normalize(self.head(pooled), p=2, dim=-1)


def cosine_similarity(a, b) -> float:
    """Cosine of two unit-norm embeddings (their dot product), clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


@torch.no_grad()
def embed_functions(model: FaserEncoder, functions: Sequence, vocab, batch_size: int = 32,
                    global_policy=None) -> np.ndarray:
    """Embed normalized functions in inference mode. Returns an (n, E) float32 array."""
    from vocab import GlobalAttentionPolicy, encode_batch

    policy = global_policy or GlobalAttentionPolicy()
    was_training = model.training
    model.eval()
    rows: List[np.ndarray] = []
    try:
        for batch in chunked(list(functions), batch_size):
            ids, attention, global_mask = encode_batch(batch, vocab, model.cfg.input_len, policy)
            rows.append(model(ids, attention, global_mask).to(torch.float32).cpu().numpy())
    finally:
        model.train(was_training)
    if not rows:
        return np.zeros((0, model.cfg.embed_dim), dtype=np.float32)
    return np.concatenate(rows, axis=0)
