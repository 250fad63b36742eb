"""Vision transformer with optional attention controllers per layer.

Layout: linear patch embedding, a learned class token at position 0,
learned positional embeddings, pre-norm transformer blocks, and a
linear head read out of the class token.  Task identity can enter as an
extra input position ("input"), as decoder-side conditioning inside the
controllers ("decoder"), or both.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionTrace, MultiHeadAttention
from .controller import AttentionController, ControllerConfig
from .errors import ConfigError, ContractError
from .params import linear, linear_params

HEAD_KINDS = ("binary", "multiclass", "multilabel")
TASK_MODES = ("none", "input", "decoder", "both")


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: int = 1
    patch_size: int = 4
    num_layers: int = 2
    num_heads: int = 2
    model_dim: int = 64
    ffn_dim: int = 128
    num_classes: int = 2
    head: str = "binary"
    task_mode: str = "none"
    num_tasks: int = 0
    task_dim: int = 8
    dropout: float = 0.1
    attn_dropout: float = 0.1
    use_asac: bool = True
    latent_dim: int = 32
    codebook_dim: int = 8
    codebook_size: int = 64
    commitment_cost: float = 1.0
    ema_decay: float = 0.99
    dead_threshold: float = 2.0
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.task_mode not in TASK_MODES:
            raise ConfigError(f"unknown task_mode {self.task_mode!r}")
        if self.task_mode != "none" and self.num_tasks < 1:
            raise ConfigError("task_mode set but num_tasks < 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        extra = 1 if self.task_mode in ("input", "both") else 0
        return self.num_patches + 1 + extra

    @property
    def head_width(self) -> int:
        return 1 if self.head == "binary" else self.num_classes

    def controller_config(self) -> ControllerConfig:
        task_dim = self.task_dim if self.task_mode in ("decoder", "both") else 0
        return ControllerConfig(
            input_dim=self.seq_len, latent_dim=self.latent_dim,
            codebook_dim=self.codebook_dim, codebook_size=self.codebook_size,
            commitment_cost=self.commitment_cost, ema_decay=self.ema_decay,
            dead_threshold=self.dead_threshold, leaky_slope=self.leaky_slope,
            task_dim=task_dim)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, patches, C*p*p].

    Patch grid is row-major; inside a patch the order is channel-major,
    then pixel rows, then pixel columns.
    """
    if images.ndim == 3:
        images = images[None]
    b, c, hgt, wid = images.shape
    p = patch_size
    if hgt % p or wid % p:
        raise ContractError(f"image {hgt}x{wid} not divisible by patch {p}")
    gh, gw = hgt // p, wid // p
    tiles = images.reshape(b, c, gh, p, gw, p)
    tiles = tiles.transpose(0, 2, 4, 1, 3, 5)
    return tiles.reshape(b, gh * gw, c * p * p)


def _patchify_tensor(images: T.Tensor, patch_size: int) -> T.Tensor:
    """Differentiable patchify, used when gradients w.r.t. pixels are
    needed (adversarial attacks)."""
    b, c, hgt, wid = images.shape
    p = patch_size
    if hgt % p or wid % p:
        raise ContractError(f"image {hgt}x{wid} not divisible by patch {p}")
    gh, gw = hgt // p, wid // p
    tiles = T.reshape(images, (b, c, gh, p, gw, p))
    tiles = T.transpose(tiles, axes=(0, 2, 4, 1, 3, 5))
    return T.reshape(tiles, (b, gh * gw, c * p * p))


@dataclass
class ModelOutput:
    logits: T.Tensor
    traces: list = field(default_factory=list)

    def recon_pairs(self):
        return [(t.scores, t.recon_scores) for t in self.traces
                if t.recon_scores is not None]


class TransformerLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        controller = None
        if cfg.use_asac:
            controller = AttentionController(cfg.controller_config(), rng)
        self.attn = MultiHeadAttention(
            AttentionConfig(model_dim=d, num_heads=cfg.num_heads,
                            attn_dropout=cfg.attn_dropout),
            controller, rng)
        self.ln1_g = T.Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = T.Tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = T.Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = T.Tensor(np.zeros(d), requires_grad=True)
        self.ffn_w1, self.ffn_b1 = linear_params(rng, d, cfg.ffn_dim)
        self.ffn_w2, self.ffn_b2 = linear_params(rng, cfg.ffn_dim, d)

    def parameters(self, prefix: str) -> dict:
        out = {prefix + "ln1_g": self.ln1_g, prefix + "ln1_b": self.ln1_b,
               prefix + "ln2_g": self.ln2_g, prefix + "ln2_b": self.ln2_b,
               prefix + "ffn_w1": self.ffn_w1, prefix + "ffn_b1": self.ffn_b1,
               prefix + "ffn_w2": self.ffn_w2, prefix + "ffn_b2": self.ffn_b2}
        out.update(self.attn.parameters(prefix + "attn."))
        return out


class AsacModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA5AC)))
        d = cfg.model_dim
        self.patch_w, self.patch_b = linear_params(rng, cfg.channels * cfg.patch_size**2, d)
        self.pos = T.Tensor(rng.normal(0, 0.02, size=(cfg.seq_len, d)),
                            requires_grad=True)
        self.cls = T.Tensor(rng.normal(0, 0.02, size=(1, d)), requires_grad=True)
        self.task_input_emb = None
        self.task_dec_emb = None
        if cfg.task_mode in ("input", "both"):
            self.task_input_emb = T.Tensor(rng.normal(0, 0.02, size=(cfg.num_tasks, d)),
                                           requires_grad=True)
        if cfg.task_mode in ("decoder", "both"):
            self.task_dec_emb = T.Tensor(rng.normal(0, 0.02,
                                                    size=(cfg.num_tasks, cfg.task_dim)),
                                         requires_grad=True)
        self.layers = [TransformerLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.ln_f_g = T.Tensor(np.ones(d), requires_grad=True)
        self.ln_f_b = T.Tensor(np.zeros(d), requires_grad=True)
        self.head_w, self.head_b = linear_params(rng, d, cfg.head_width)

    # -- parameter registry ---------------------------------------------------

    def parameters(self) -> dict:
        out = {"patch_w": self.patch_w, "patch_b": self.patch_b,
               "pos": self.pos, "cls": self.cls}
        if self.task_input_emb is not None:
            out["task_input_emb"] = self.task_input_emb
        if self.task_dec_emb is not None:
            out["task_dec_emb"] = self.task_dec_emb
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"layers.{i}."))
        out.update({"ln_f_g": self.ln_f_g, "ln_f_b": self.ln_f_b,
                    "head_w": self.head_w, "head_b": self.head_b})
        return out

    def codebook_arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            ctrl = layer.attn.controller
            if ctrl is not None:
                out.update(ctrl.codebook_arrays(f"layers.{i}.attn.controller."))
        return out

    def controllers(self) -> list:
        return [layer.attn.controller for layer in self.layers
                if layer.attn.controller is not None]

    def num_parameters(self) -> int:
        """Trainable parameters plus codebook embeddings."""
        total = sum(p.size for p in self.parameters().values())
        for ctrl in self.controllers():
            total += ctrl.codebook.embeddings.size
        return total

    # -- forward ----------------------------------------------------------------

    def embed(self, images,
              task_ids: np.ndarray | None = None) -> T.Tensor:
        """Patch projection, class token, optional task token, positions.

        ``images`` may be a Tensor to keep the pixel gradient path alive."""
        cfg = self.cfg
        if isinstance(images, T.Tensor):
            patches = _patchify_tensor(images, cfg.patch_size)
        else:
            if images.ndim == 3:
                images = images[None]
            patches = T.constant(patchify(images, cfg.patch_size))
        b = images.shape[0]
        x = linear(patches, self.patch_w, self.patch_b)  # [b, P, d]
        cls_tok = T.reshape(T.tile_rows(self.cls, b), (b, 1, cfg.model_dim))
        parts = [cls_tok, x]
        if cfg.task_mode in ("input", "both"):
            tok = T.embedding_lookup(self.task_input_emb, task_ids)
            parts.append(T.reshape(tok, (b, 1, cfg.model_dim)))
        return T.concat(parts, axis=1) + self.pos

    def forward(self, images, task_ids: np.ndarray | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                frozen: list | None = None) -> ModelOutput:
        cfg = self.cfg
        if not isinstance(images, T.Tensor) and images.ndim == 3:
            images = images[None]
        b = images.shape[0]
        if cfg.task_mode != "none":
            if task_ids is None:
                raise ContractError("model expects task_ids for task_mode "
                                    f"{cfg.task_mode!r}")
            task_ids = np.asarray(task_ids, dtype=np.int64)
            if task_ids.min() < 0 or task_ids.max() >= cfg.num_tasks:
                raise ContractError("task id out of range")

        x = self.embed(images, task_ids)
        x = T.dropout(x, cfg.dropout, rng, training)

        task_rows = None
        if cfg.use_asac and cfg.task_mode in ("decoder", "both"):
            task_vec = T.embedding_lookup(self.task_dec_emb, task_ids)
            task_rows = T.tile_rows(task_vec, cfg.num_heads * cfg.seq_len)

        traces = []
        for i, layer in enumerate(self.layers):
            attn_in = T.layer_norm(x) * layer.ln1_g + layer.ln1_b
            trace = layer.attn.forward(
                attn_in, task_rows=task_rows, training=training, rng=rng,
                frozen=frozen[i] if frozen is not None else None)
            traces.append(trace)
            x = x + T.dropout(trace.out, cfg.dropout, rng, training)
            ffn_in = T.layer_norm(x) * layer.ln2_g + layer.ln2_b
            hidden = T.gelu(linear(ffn_in, layer.ffn_w1, layer.ffn_b1))
            ffn_out = linear(hidden, layer.ffn_w2, layer.ffn_b2)
            x = x + T.dropout(ffn_out, cfg.dropout, rng, training)

        x = T.layer_norm(x) * self.ln_f_g + self.ln_f_b
        cls_out = T.reshape(T.slice_axis(x, 1, 0, 1), (b, cfg.model_dim))
        logits = linear(cls_out, self.head_w, self.head_b)
        return ModelOutput(logits=logits, traces=traces)

    def freeze_snaps(self, images: np.ndarray,
                     task_ids: np.ndarray | None = None) -> list:
        """Per-layer frozen quantization state for FD gradient checks."""
        with T.no_grad():
            out = self.forward(images, task_ids, training=False)
        snaps = []
        for trace, ctrl in zip(out.traces, self.controllers()):
            code_values = ctrl.codebook.embeddings[trace.indices.reshape(-1)] \
                .reshape(trace.encoded.shape)
            snaps.append({
                "offset": code_values - trace.encoded.data,
                "target": code_values,
                "codebook_term": float(np.mean((trace.encoded.data - code_values) ** 2)),
            })
        return snaps


# -- checkpoint io --------------------------------------------------------------

CKPT_MAGIC = b"ASACCKPT"
CKPT_VERSION = 1


def _named_arrays(model: AsacModel) -> dict:
    arrays = {name: p.data for name, p in model.parameters().items()}
    arrays.update(model.codebook_arrays())
    return arrays


def save_checkpoint(model: AsacModel, path):
    """Binary format: magic, u32 version, length-prefixed config JSON,
    then (name, rank, dims, float64 payload) per array, little-endian."""
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    named = _named_arrays(model)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype="<f8")
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> AsacModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", blob, 8)[0]
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = struct.unpack_from("<I", blob, 12)[0]
    off = 16
    cfg = ModelConfig(**json.loads(blob[off:off + cfg_len].decode("utf-8")))
    off += cfg_len

    arrays = {}
    while off < len(blob):
        name_len = struct.unpack_from("<I", blob, off)[0]
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank = struct.unpack_from("<I", blob, off)[0]
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += 8 * count
        arrays[name] = arr.reshape(dims).astype(np.float64)

    model = AsacModel(cfg, seed=0)
    params = model.parameters()
    expected = set(params) | set(model.codebook_arrays())
    if set(arrays) != expected:
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        raise ContractError(f"{path}: checkpoint arrays mismatch "
                            f"(missing {sorted(missing)}, extra {sorted(extra)})")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ContractError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name]
    for i, layer in enumerate(model.layers):
        ctrl = layer.attn.controller
        if ctrl is not None:
            ctrl.load_codebook_arrays(arrays, f"layers.{i}.attn.controller.")
    return model
