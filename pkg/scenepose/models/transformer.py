"""Pre-norm transformer encoder/decoder with learned 2D positional encodings re-added at every attention layer."""
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from scenepose.config.settings import ConfigError


class TokenSequence(NamedTuple):
    """Flattened activation map plus its positional encoding.

    tokens: [B, H*W, C_d] projected map with the encoding already added (Z^0)
    pos:    [H*W, C_d] encoding, added again to queries and keys in every attention layer
    """
    tokens: torch.Tensor
    pos: torch.Tensor
    height: int
    width: int


class PositionalEncodingTable(nn.Module):
    """Learned axis-split encoding: token (i, j) gets concat(E_u[j], E_v[i])."""

    def __init__(self, height: int, width: int, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError(f"Positional encoding dimension must be even, got {dim}")
        self.height = height
        self.width = width
        self.col_embed = nn.Parameter(torch.empty(width, dim // 2))   # E_u
        self.row_embed = nn.Parameter(torch.empty(height, dim // 2))  # E_v
        nn.init.uniform_(self.col_embed)
        nn.init.uniform_(self.row_embed)

    def forward(self) -> torch.Tensor:
        h, w = self.height, self.width
        pos = torch.cat([
            self.col_embed[None, :, :].expand(h, w, -1),
            self.row_embed[:, None, :].expand(h, w, -1),
        ], dim=-1)
        # row-major: i over H outer, j over W inner
        return pos.reshape(h * w, -1)


class SequencePreparer(nn.Module):
    """1x1 projection of an activation map to C_d, flattening, and positional encoding."""

    def __init__(self, in_channels: int, dim: int, height: int, width: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError(f"token_dim must be even, got {dim}")
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=1)
        self.pos_table = PositionalEncodingTable(height, width, dim)

    def forward(self, activation_map: torch.Tensor) -> TokenSequence:
        _, _, h, w = activation_map.shape
        if h != self.pos_table.height or w != self.pos_table.width:
            raise ConfigError(f"Activation map is {h}x{w}, positional table expects "
                              f"{self.pos_table.height}x{self.pos_table.width}")
        projected = self.proj(activation_map).flatten(2).transpose(1, 2)
        pos = self.pos_table()
        return TokenSequence(tokens=projected + pos.unsqueeze(0), pos=pos, height=h, width=w)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over separate query/key/value inputs.

    Returns the attended output and, when need_weights is set, the head-averaged attention
    weights [B, Sq, Sk]. Without weights the fused kernel is used and no [Sq, Sk] matrix is kept.
    """

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"num_heads ({num_heads}) must divide dim ({dim})")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.dropout = dropout
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.reshape(b, s, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                need_weights: bool = True) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if need_weights:
            scores = (q @ k.transpose(-2, -1)) / (self.head_dim ** 0.5)
            weights = scores.softmax(dim=-1)
            attended = self.attn_drop(weights) @ v
            averaged = weights.mean(dim=1)
        else:
            attended = F.scaled_dot_product_attention(q, k, v, dropout_p=self.dropout if self.training else 0.0)
            averaged = None
        attended = attended.transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out_proj(attended), averaged


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, hidden_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, hidden_dim, dropout)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)

    def forward(self, z: torch.Tensor, pos: torch.Tensor,
                need_weights: bool = True) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        h = self.norm1(z)
        qk = h + pos
        attended, weights = self.self_attn(qk, qk, h, need_weights)
        z = z + self.dropout1(attended)
        z = z + self.dropout2(self.mlp(self.norm2(z)))
        return z, weights


class TransformerEncoder(nn.Module):
    def __init__(self, dim: int, num_layers: int, num_heads: int, hidden_dim: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, num_heads, hidden_dim, dropout) for _ in range(num_layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, sequence: TokenSequence, need_weights: bool = True) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Encoded memory and per-layer attention weights (empty when need_weights is False)."""
        z = sequence.tokens
        attention = []
        for layer in self.layers:
            z, weights = layer(z, sequence.pos, need_weights)
            if need_weights:
                attention.append(weights)
        return self.norm(z), attention


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, hidden_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads, dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, hidden_dim, dropout)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)

    def forward(self, t: torch.Tensor, memory: torch.Tensor, pos: torch.Tensor,
                need_weights: bool = True) -> Tuple[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]]:
        h = self.norm1(t)
        attended, self_weights = self.self_attn(h, h, h, need_weights)
        t = t + self.dropout1(attended)
        h = self.norm2(t)
        attended, cross_weights = self.cross_attn(h, memory + pos, memory, need_weights)
        t = t + self.dropout2(attended)
        t = t + self.dropout3(self.mlp(self.norm3(t)))
        return t, self_weights, cross_weights


class TransformerDecoder(nn.Module):
    """Parallel (non-autoregressive) decoding of one learned query per scene."""

    def __init__(self, dim: int, num_layers: int, num_heads: int, hidden_dim: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, num_heads, hidden_dim, dropout) for _ in range(num_layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor, pos: torch.Tensor,
                expected_queries: Optional[int] = None,
                need_weights: bool = True) -> Tuple[torch.Tensor, List[torch.Tensor], List[torch.Tensor]]:
        if expected_queries is not None and queries.shape[-2] != expected_queries:
            raise ConfigError(f"Decoder got {queries.shape[-2]} queries, expected one per scene ({expected_queries})")
        t = queries.unsqueeze(0).expand(memory.shape[0], -1, -1) if queries.dim() == 2 else queries
        self_attention, cross_attention = [], []
        for layer in self.layers:
            t, self_weights, cross_weights = layer(t, memory, pos, need_weights)
            if need_weights:
                self_attention.append(self_weights)
                cross_attention.append(cross_weights)
        return self.norm(t), self_attention, cross_attention
