"""Patch encoder, query decoder, and prediction heads.

The encoder is a deliberately small stand-in: non-overlapping patches
are flattened, linearly projected, and given a fixed 2-D sinusoidal
position encoding (position enters through the keys only; queries are
position-free learnable anchors). The decoder runs M pre-norm blocks
of query self-attention, bias-modulated cross-attention onto the
patch grid, and a feed-forward layer. Two heads turn the final query
embeddings into (cx, cy, w, h) boxes and quality scores, both through
sigmoids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .composition import CompositionPrior, biased_cross_attention
from .errors import BadShape, Degenerate, DimMismatch
from .geometry import CropBox
from .tensor import Tensor

MIN_PREDICTED_EXTENT = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Shape hyperparameters for the encoder/decoder stack."""

    n_queries: int = 16
    n_layers: int = 2
    model_dim: int = 32
    n_heads: int = 4
    ffn_dim: int = 128
    grid_h: int = 8
    grid_w: int = 8
    epsilon_b: float = 1e-6
    in_channels: int = 3
    image_h: int = 64
    image_w: int = 64

    def __post_init__(self):
        if self.n_queries < 1:
            raise DimMismatch(f"n_queries must be >= 1, got {self.n_queries}")
        # n_layers == 0 is a degenerate configuration allowed for tests;
        # operational configs use >= 1
        if self.n_layers < 0:
            raise DimMismatch(f"n_layers must be >= 0, got {self.n_layers}")
        if self.model_dim < 1 or self.model_dim % self.n_heads != 0:
            raise DimMismatch(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.model_dim % 4 != 0:
            raise DimMismatch(f"model_dim {self.model_dim} must be divisible by 4 for the 2-D position encoding")
        if self.grid_h < 1 or self.grid_w < 1:
            raise DimMismatch(f"grid ({self.grid_h}, {self.grid_w}) must be positive")
        if self.image_h % self.grid_h != 0 or self.image_w % self.grid_w != 0:
            raise BadShape(
                f"image ({self.image_h}, {self.image_w}) not divisible into a ({self.grid_h}, {self.grid_w}) grid"
            )
        if self.ffn_dim < 1 or self.in_channels < 1:
            raise DimMismatch("ffn_dim and in_channels must be positive")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_h(self) -> int:
        return self.image_h // self.grid_h

    @property
    def patch_w(self) -> int:
        return self.image_w // self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_h * self.patch_w

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_layers": self.n_layers,
            "model_dim": self.model_dim,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "epsilon_b": self.epsilon_b,
            "in_channels": self.in_channels,
            "image_h": self.image_h,
            "image_w": self.image_w,
        }


@dataclass(frozen=True)
class Prediction:
    """One decoded crop candidate with its quality score."""

    box: CropBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise Degenerate(f"score {self.score} outside [0, 1]")


@dataclass
class HeadOutputs:
    """Raw head tensors kept differentiable for the training loss."""

    boxes: Tensor  # (N, 4) cxcywh, each in (0, 1)
    scores: Tensor  # (N, 1) in (0, 1)

    def to_predictions(self) -> list[Prediction]:
        """Detach into Prediction values; sub-1e-6 extents are rejected."""
        out = []
        b = self.boxes.data
        s = self.scores.data
        for i in range(b.shape[0]):
            w, h = float(b[i, 2]), float(b[i, 3])
            if w < MIN_PREDICTED_EXTENT or h < MIN_PREDICTED_EXTENT:
                raise Degenerate(f"prediction {i} has near-zero extent ({w}, {h})")
            box = CropBox(cx=float(b[i, 0]), cy=float(b[i, 1]), w=w, h=h)
            out.append(Prediction(box=box, score=float(s[i, 0])))
        return out


def sinusoidal_grid_encoding(grid_h: int, grid_w: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sin/cos position codes, one row per grid cell.

    Half the channels encode the row index, half the column index,
    with the classic 10000^(2i/half) frequency ladder. Rows are laid
    out in row-major cell order to match patch extraction.
    """
    if dim % 4 != 0:
        raise DimMismatch(f"position encoding dim {dim} must be divisible by 4")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, half, 2, dtype=np.float64) / half))
    ys, xs = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    pos = np.zeros((grid_h * grid_w, dim), dtype=np.float64)
    for axis, coord in enumerate((ys.reshape(-1), xs.reshape(-1))):
        angles = coord[:, None] * freqs[None, :]
        base = axis * half
        pos[:, base : base + half : 2] = np.sin(angles)
        pos[:, base + 1 : base + half : 2] = np.cos(angles)
    return pos.astype(dtype)


class ModelState:
    """Named parameter store for one encoder/decoder instance."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], dtype: np.dtype):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self.position = T.constant(sinusoidal_grid_encoding(config.grid_h, config.grid_w, config.model_dim, dtype))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def init_state(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelState:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    p: dict[str, Tensor] = {}

    def weight(name: str, fan_in: int, fan_out: int) -> None:
        p[name] = Tensor(T.xavier_uniform(rng, fan_in, fan_out), dtype=dtype, requires_grad=True)

    def bias(name: str, n: int) -> None:
        p[name] = Tensor(np.zeros((1, n)), dtype=dtype, requires_grad=True)

    d = config.model_dim
    weight("enc.proj.w", config.patch_dim, d)
    bias("enc.proj.b", d)
    p["query.embed"] = Tensor(T.xavier_uniform(rng, config.n_queries, d), dtype=dtype, requires_grad=True)
    for i in range(config.n_layers):
        for ln in ("ln1", "ln2", "ln3"):
            p[f"layer{i}.{ln}.g"] = Tensor(np.ones((1, d)), dtype=dtype, requires_grad=True)
            bias(f"layer{i}.{ln}.b", d)
        for attn in ("self", "cross"):
            for proj in ("q", "k", "v", "o"):
                weight(f"layer{i}.{attn}.w{proj}", d, d)
                bias(f"layer{i}.{attn}.b{proj}", d)
        weight(f"layer{i}.ffn.w1", d, config.ffn_dim)
        bias(f"layer{i}.ffn.b1", config.ffn_dim)
        weight(f"layer{i}.ffn.w2", config.ffn_dim, d)
        bias(f"layer{i}.ffn.b2", d)
    p["final_ln.g"] = Tensor(np.ones((1, d)), dtype=dtype, requires_grad=True)
    bias("final_ln.b", d)
    for j, (fi, fo) in enumerate(((d, d), (d, d), (d, 4)), start=1):
        weight(f"box.w{j}", fi, fo)
        bias(f"box.b{j}", fo)
    weight("score.w", d, 1)
    bias("score.b", 1)
    return ModelState(config, p, dtype)


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), T.tile_rows(b, x.dims[0]))


def patch_matrix(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Flatten an image into its (n_cells, patch_dim) row-major patch matrix."""
    c, h, w = config.in_channels, config.image_h, config.image_w
    if image.shape != (c, h, w):
        raise BadShape(f"image shape {image.shape} != configured ({c}, {h}, {w})")
    ph, pw = config.patch_h, config.patch_w
    patches = image.reshape(c, config.grid_h, ph, config.grid_w, pw)
    patches = patches.transpose(1, 3, 0, 2, 4).reshape(config.n_cells, config.patch_dim)
    return np.ascontiguousarray(patches)


def encode(image: np.ndarray, state: ModelState, add_position: bool = True) -> Tensor:
    """Patch-embed an image into (n_cells, d) key/value memory.

    ``add_position=False`` exposes the content embeddings alone (used
    by permutation probes); normal forward passes keep the default.
    """
    patches = patch_matrix(np.asarray(image, dtype=state.dtype), state.config)
    content = _affine(T.constant(patches), state["enc.proj.w"], state["enc.proj.b"])
    if not add_position:
        return content
    return T.add(content, T.constant(state.position.data))


def _multi_head_attention(
    state: ModelState,
    prefix: str,
    queries: Tensor,
    memory: Tensor,
    prior: CompositionPrior | None,
    weights_out: list | None,
) -> Tensor:
    cfg = state.config
    q = _affine(queries, state[f"{prefix}.wq"], state[f"{prefix}.bq"])
    k = _affine(memory, state[f"{prefix}.wk"], state[f"{prefix}.bk"])
    v = _affine(memory, state[f"{prefix}.wv"], state[f"{prefix}.bv"])
    dh = cfg.head_dim
    heads = []
    per_head_weights: list | None = [] if weights_out is not None else None
    for i in range(cfg.n_heads):
        lo, hi = i * dh, (i + 1) * dh
        heads.append(
            biased_cross_attention(
                T.slice_cols(q, lo, hi),
                T.slice_cols(k, lo, hi),
                T.slice_cols(v, lo, hi),
                prior,
                weights_out=per_head_weights,
            )
        )
    if weights_out is not None:
        weights_out.append(np.stack(per_head_weights))
    merged = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    return _affine(merged, state[f"{prefix}.wo"], state[f"{prefix}.bo"])


def decode(
    memory: Tensor,
    prior: CompositionPrior | None,
    state: ModelState,
    attention_out: list | None = None,
) -> Tensor:
    """Refine the N anchor queries against the encoded grid.

    Pre-norm blocks: x += SelfAttn(LN(x)); x += CrossAttn(LN(x), E)
    with the composition bias added to every head's scaled logits;
    x += FFN(LN(x)). The same prior is shared by all layers and heads.
    ``attention_out`` collects one (n_heads, N, n_cells) array per
    layer of cross-attention weights.
    """
    cfg = state.config
    if memory.dims != (cfg.n_cells, cfg.model_dim):
        raise DimMismatch(f"memory {memory.dims} != ({cfg.n_cells}, {cfg.model_dim})")
    if prior is not None and (prior.grid_h, prior.grid_w) != (cfg.grid_h, cfg.grid_w):
        raise DimMismatch(
            f"prior grid ({prior.grid_h}, {prior.grid_w}) != configured ({cfg.grid_h}, {cfg.grid_w})"
        )
    x = state["query.embed"]
    for i in range(cfg.n_layers):
        normed = T.layer_norm(x, state[f"layer{i}.ln1.g"], state[f"layer{i}.ln1.b"])
        x = T.add(x, _multi_head_attention(state, f"layer{i}.self", normed, normed, None, None))
        normed = T.layer_norm(x, state[f"layer{i}.ln2.g"], state[f"layer{i}.ln2.b"])
        x = T.add(x, _multi_head_attention(state, f"layer{i}.cross", normed, memory, prior, attention_out))
        normed = T.layer_norm(x, state[f"layer{i}.ln3.g"], state[f"layer{i}.ln3.b"])
        ffn = _affine(T.relu(_affine(normed, state[f"layer{i}.ffn.w1"], state[f"layer{i}.ffn.b1"])),
                      state[f"layer{i}.ffn.w2"], state[f"layer{i}.ffn.b2"])
        x = T.add(x, ffn)
    if cfg.n_layers == 0:
        return x
    return T.layer_norm(x, state["final_ln.g"], state["final_ln.b"])


def predict_heads(decoded: Tensor, state: ModelState) -> HeadOutputs:
    """Box head: 3-layer FFN + sigmoid; score head: linear + sigmoid."""
    h = T.relu(_affine(decoded, state["box.w1"], state["box.b1"]))
    h = T.relu(_affine(h, state["box.w2"], state["box.b2"]))
    boxes = T.sigmoid(_affine(h, state["box.w3"], state["box.b3"]))
    scores = T.sigmoid(_affine(decoded, state["score.w"], state["score.b"]))
    return HeadOutputs(boxes=boxes, scores=scores)


def forward_train(
    image: np.ndarray,
    prior: CompositionPrior | None,
    state: ModelState,
    attention_out: list | None = None,
) -> HeadOutputs:
    """encode -> decode -> heads with the graph kept for backward."""
    memory = encode(image, state)
    decoded = decode(memory, prior, state, attention_out=attention_out)
    return predict_heads(decoded, state)


def forward(
    image: np.ndarray,
    prior: CompositionPrior | None,
    state: ModelState,
    attention_out: list | None = None,
) -> list[Prediction]:
    """Inference-only pass; deterministic given weights and input."""
    with T.no_grad():
        return forward_train(image, prior, state, attention_out=attention_out).to_predictions()
