"""Vector-quantized attention controller.

Attention score rows are encoded by a two-layer MLP, split into
contiguous chunks, snapped to nearest codebook entries, and decoded back
to score space.  The quantization step is bridged with a straight-through
estimator, so the encoder receives exactly the decoder-side gradient.
The codebook itself never sees optimizer gradients; it follows the
encoder output through an exponential moving average, with dead entries
revived from the current batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .params import linear, linear_params

EPS_DIV = 1e-5


@dataclass
class ControllerConfig:
    input_dim: int
    latent_dim: int
    codebook_dim: int
    codebook_size: int
    commitment_cost: float = 1.0
    ema_decay: float = 0.99
    dead_threshold: float = 2.0
    leaky_slope: float = 0.01
    task_dim: int = 0  # width of decoder-side task conditioning, 0 = off

    def __post_init__(self):
        if self.latent_dim % self.codebook_dim != 0:
            raise ConfigError(
                f"latent_dim {self.latent_dim} not divisible by "
                f"codebook_dim {self.codebook_dim}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")

    @property
    def chunks_per_row(self) -> int:
        return self.latent_dim // self.codebook_dim


@dataclass
class CodebookState:
    """EMA-tracked codebook: embeddings plus the running statistics."""
    embeddings: np.ndarray        # [size, dim]
    ema_cluster_size: np.ndarray  # [size]
    ema_sum: np.ndarray           # [size, dim]
    decay: float
    dead_threshold: float

    @classmethod
    def initial(cls, cfg: ControllerConfig, rng: np.random.Generator) -> "CodebookState":
        emb = rng.normal(0.0, np.sqrt(1.0 / cfg.codebook_dim),
                         size=(cfg.codebook_size, cfg.codebook_dim))
        return cls(embeddings=emb,
                   ema_cluster_size=np.ones(cfg.codebook_size),
                   ema_sum=emb.copy(),
                   decay=cfg.ema_decay,
                   dead_threshold=cfg.dead_threshold)


def nearest_codes(codebook: CodebookState, chunks: np.ndarray):
    """Squared distances to every code and the argmin per chunk.

    Ties break toward the lowest code index.
    """
    emb = codebook.embeddings
    d2 = (np.sum(chunks**2, axis=1, keepdims=True)
          - 2.0 * chunks @ emb.T
          + np.sum(emb**2, axis=1))
    return d2, np.argmin(d2, axis=1)


def quantize(codebook: CodebookState, encoded: T.Tensor, codebook_dim: int):
    """Snap encoded rows chunkwise to the codebook.

    Returns (quantized, indices, distances): ``quantized`` carries the
    straight-through graph (identity jacobian onto ``encoded``),
    ``indices`` is [rows, chunks_per_row] and ``distances`` is
    [rows, chunks_per_row, codebook_size], both plain arrays.
    """
    rows, latent = encoded.shape
    if latent % codebook_dim != 0:
        raise ContractError(f"latent width {latent} not divisible by {codebook_dim}")
    per_row = latent // codebook_dim
    chunks = encoded.data.reshape(rows * per_row, codebook_dim)
    d2, flat_idx = nearest_codes(codebook, chunks)
    q_values = codebook.embeddings[flat_idx].reshape(rows, latent)
    quantized = encoded + T.constant(q_values - encoded.data)
    return quantized, flat_idx.reshape(rows, per_row), d2.reshape(rows, per_row, -1)


def ema_update(codebook: CodebookState, encoded_values: np.ndarray,
               indices: np.ndarray, rng: np.random.Generator):
    """Move codes toward their assigned chunks; revive dead codes.

    Runs outside the autodiff graph.  An empty batch is a no-op.
    """
    if encoded_values.size == 0:
        return
    size, dim = codebook.embeddings.shape
    chunks = encoded_values.reshape(-1, dim)
    flat_idx = indices.reshape(-1)
    counts = np.bincount(flat_idx, minlength=size).astype(np.float64)
    sums = np.zeros_like(codebook.ema_sum)
    np.add.at(sums, flat_idx, chunks)

    d = codebook.decay
    codebook.ema_cluster_size = d * codebook.ema_cluster_size + (1.0 - d) * counts
    codebook.ema_sum = d * codebook.ema_sum + (1.0 - d) * sums
    denom = np.maximum(codebook.ema_cluster_size, EPS_DIV)
    codebook.embeddings = codebook.ema_sum / denom[:, None]

    dead = np.flatnonzero(codebook.ema_cluster_size < codebook.dead_threshold)
    for i in dead:
        pick = chunks[rng.integers(len(chunks))]
        codebook.embeddings[i] = pick
        codebook.ema_sum[i] = pick
        codebook.ema_cluster_size[i] = 1.0


def vq_loss(encoded: T.Tensor, quantized_values: np.ndarray,
            commitment_cost: float) -> T.Tensor:
    """Codebook term plus weighted commitment term, mean over elements.

    With EMA codebook learning the codebook term carries no gradient; it
    is still reported so the loss value matches the definition.
    """
    codebook_term = float(np.mean((encoded.data - quantized_values) ** 2))
    commitment = T.mse(encoded, T.constant(quantized_values))
    return T.constant(codebook_term) + commitment * commitment_cost


class AttentionController:
    """Encoder, codebook, and decoder over attention score rows."""

    def __init__(self, cfg: ControllerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.enc_w1, self.enc_b1 = linear_params(rng, cfg.input_dim, cfg.latent_dim)
        self.enc_w2, self.enc_b2 = linear_params(rng, cfg.latent_dim, cfg.latent_dim)
        dec_in = cfg.latent_dim + cfg.task_dim
        self.dec_w1, self.dec_b1 = linear_params(rng, dec_in, cfg.latent_dim)
        self.dec_w2, self.dec_b2 = linear_params(rng, cfg.latent_dim, cfg.input_dim)
        self.codebook = CodebookState.initial(cfg, rng)

    def parameters(self, prefix: str = "") -> dict:
        return {prefix + "enc_w1": self.enc_w1, prefix + "enc_b1": self.enc_b1,
                prefix + "enc_w2": self.enc_w2, prefix + "enc_b2": self.enc_b2,
                prefix + "dec_w1": self.dec_w1, prefix + "dec_b1": self.dec_b1,
                prefix + "dec_w2": self.dec_w2, prefix + "dec_b2": self.dec_b2}

    def codebook_arrays(self, prefix: str = "") -> dict:
        return {prefix + "codebook.embeddings": self.codebook.embeddings,
                prefix + "codebook.ema_cluster_size": self.codebook.ema_cluster_size,
                prefix + "codebook.ema_sum": self.codebook.ema_sum}

    def load_codebook_arrays(self, arrays: dict, prefix: str = ""):
        self.codebook.embeddings = arrays[prefix + "codebook.embeddings"]
        self.codebook.ema_cluster_size = arrays[prefix + "codebook.ema_cluster_size"]
        self.codebook.ema_sum = arrays[prefix + "codebook.ema_sum"]

    def encode(self, rows: T.Tensor) -> T.Tensor:
        if rows.shape[-1] != self.cfg.input_dim:
            raise ContractError(
                f"controller expects rows of width {self.cfg.input_dim}, "
                f"got {rows.shape}")
        h = T.leaky_relu(linear(rows, self.enc_w1, self.enc_b1), self.cfg.leaky_slope)
        return linear(h, self.enc_w2, self.enc_b2)

    def decode(self, quantized: T.Tensor, task_rows: T.Tensor | None = None) -> T.Tensor:
        if self.cfg.task_dim:
            if task_rows is None:
                raise ContractError("controller configured for task conditioning "
                                    "but no task rows were given")
            quantized = T.concat([quantized, task_rows], axis=1)
        h = T.leaky_relu(linear(quantized, self.dec_w1, self.dec_b1),
                         self.cfg.leaky_slope)
        return linear(h, self.dec_w2, self.dec_b2)

    def __call__(self, rows: T.Tensor, task_rows: T.Tensor | None = None,
                 frozen: dict | None = None):
        """Full pass: returns (reconstructed rows, encoded, indices, vq term).

        ``frozen`` pins the straight-through offset and commitment target
        captured on an earlier pass ({"offset", "target"} arrays).  With
        the snap frozen the whole pass is an ordinary differentiable
        function, which is what finite-difference gradient checks probe;
        live quantization is piecewise constant, so its true derivative
        would disagree with the surrogate gradient by design.
        """
        encoded = self.encode(rows)
        if frozen is None:
            quantized, indices, _ = quantize(self.codebook, encoded,
                                             self.cfg.codebook_dim)
            code_values = self.codebook.embeddings[indices.reshape(-1)] \
                .reshape(encoded.shape)
            vq = vq_loss(encoded, code_values, self.cfg.commitment_cost)
        else:
            quantized = encoded + T.constant(frozen["offset"])
            indices = None
            # the stop-gradient codebook term is pinned at its captured
            # value so FD probes see exactly the surrogate objective
            vq = (T.constant(frozen["codebook_term"])
                  + T.mse(encoded, T.constant(frozen["target"]))
                  * self.cfg.commitment_cost)
        recon = self.decode(quantized, task_rows)
        return recon, encoded, indices, vq

    def freeze_snap(self, rows: T.Tensor) -> dict:
        """Capture the quantization state at the current parameters.

        The returned dict makes a later ``frozen=`` pass reproduce this
        pass's loss value while staying differentiable end to end.
        """
        with T.no_grad():
            encoded = self.encode(rows)
            quantized, indices, _ = quantize(self.codebook, encoded,
                                             self.cfg.codebook_dim)
            code_values = self.codebook.embeddings[indices.reshape(-1)] \
                .reshape(encoded.shape)
        return {"offset": quantized.data - encoded.data,
                "target": code_values,
                "codebook_term": float(np.mean((encoded.data - code_values) ** 2))}
