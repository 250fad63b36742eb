"""Multi-head self-attention with an optional score controller.

The controller consumes the pre-softmax score matrix one query row at a
time: scores [B, h, n, n] flatten to [B*h*n, n] rows, are encoded,
quantized against the codebook, and decoded back; the reconstruction is
added to the raw scores before the softmax.  With the controller absent
(or its decoder zeroed) the layer reduces to standard attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .controller import AttentionController
from .errors import ConfigError
from .params import linear, linear_params


@dataclass
class AttentionConfig:
    model_dim: int
    num_heads: int
    attn_dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by "
                              f"num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class AttentionTrace:
    """Per-layer byproducts needed by the losses and the EMA update."""
    out: T.Tensor
    scores: T.Tensor                 # [B, h, n, n]
    recon_scores: T.Tensor | None    # [B, h, n, n], None for baseline
    encoded: T.Tensor | None         # [B*h*n, latent]
    indices: np.ndarray | None       # [B*h*n, chunks_per_row]
    vq: T.Tensor | None              # scalar


def scaled_dot(q: T.Tensor, k: T.Tensor) -> T.Tensor:
    """q @ k^T / sqrt(d_k) over the last two axes."""
    d_k = q.shape[-1]
    return T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(d_k))


class MultiHeadAttention:
    def __init__(self, cfg: AttentionConfig,
                 controller: AttentionController | None,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.controller = controller
        d = cfg.model_dim
        self.wq, self.bq = linear_params(rng, d, d)
        self.wk, self.bk = linear_params(rng, d, d)
        self.wv, self.bv = linear_params(rng, d, d)
        self.wo, self.bo = linear_params(rng, d, d)

    def parameters(self, prefix: str = "") -> dict:
        out = {prefix + "wq": self.wq, prefix + "bq": self.bq,
               prefix + "wk": self.wk, prefix + "bk": self.bk,
               prefix + "wv": self.wv, prefix + "bv": self.bv,
               prefix + "wo": self.wo, prefix + "bo": self.bo}
        if self.controller is not None:
            out.update(self.controller.parameters(prefix + "controller."))
        return out

    def _split_heads(self, x: T.Tensor) -> T.Tensor:
        b, n, d = x.shape
        h = self.cfg.num_heads
        return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def forward(self, x: T.Tensor, task_rows: T.Tensor | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                frozen: dict | None = None,
                bypass_controller: bool = False) -> AttentionTrace:
        b, n, d = x.shape
        q = self._split_heads(linear(x, self.wq, self.bq))
        k = self._split_heads(linear(x, self.wk, self.bk))
        v = self._split_heads(linear(x, self.wv, self.bv))
        scores = scaled_dot(q, k)  # [b, h, n, n]

        if self.controller is not None and not bypass_controller:
            if self.controller.cfg.input_dim != n:
                raise ConfigError(
                    f"controller expects sequence length "
                    f"{self.controller.cfg.input_dim}, got {n}")
            rows = T.reshape(scores, (b * self.cfg.num_heads * n, n))
            recon_rows, encoded, indices, vq = self.controller(
                rows, task_rows, frozen=frozen)
            recon_scores = T.reshape(recon_rows, scores.shape)
            combined = scores + recon_scores
        else:
            recon_scores, encoded, indices, vq = None, None, None, None
            combined = scores

        attn = T.softmax_lastdim(combined)
        attn = T.dropout(attn, self.cfg.attn_dropout, rng, training)
        mixed = T.matmul(attn, v)  # [b, h, n, d_k]
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        out = linear(merged, self.wo, self.bo)
        return AttentionTrace(out=out, scores=scores, recon_scores=recon_scores,
                              encoded=encoded, indices=indices, vq=vq)


def asac_forward(attn: MultiHeadAttention, x: T.Tensor,
                 task_row: T.Tensor | None = None):
    """Single-sequence surface: x [n, d] -> (out [n, d], scores, recon).

    Score tensors come back as [h, n, n].  ``task_row`` is a [1, task_dim]
    conditioning vector replicated across all score rows.
    """
    n, d = x.shape
    task_rows = None
    if task_row is not None:
        task_rows = T.tile_rows(task_row, attn.cfg.num_heads * n)
    trace = attn.forward(T.reshape(x, (1, n, d)), task_rows=task_rows)
    squeeze = lambda t: T.reshape(t, t.shape[1:])
    recon = squeeze(trace.recon_scores) if trace.recon_scores is not None else None
    return squeeze(trace.out), squeeze(trace.scores), recon


def baseline_forward(attn: MultiHeadAttention, x: T.Tensor) -> T.Tensor:
    """Single-sequence plain attention; any controller is bypassed."""
    n, d = x.shape
    trace = attn.forward(T.reshape(x, (1, n, d)), bypass_controller=True)
    return T.reshape(trace.out, (n, d))
