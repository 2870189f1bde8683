"""Central finite-difference verification of every differentiable op.

Each scenario builds a small random graph from trainable leaves and
returns (params, loss_fn); the runner compares backward() gradients
against central differences (f64, step 1e-5 by default). Relative
error uses a 1e-3 denominator floor so negligible gradients cannot
manufacture huge ratios out of finite-difference noise.

Scenario inputs are drawn away from the kinks of relu/abs/clamp/min/
max where feasible, since a kink inside the difference stencil is a
property of the probe, not of the gradient.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .assignment import LossWeights, assign, focal_terms, training_loss
from .composition import CompositionPrior, biased_cross_attention
from .decoder import ModelConfig, forward_train, init_state
from .geometry import ScoredCrop, CropBox, giou_pairs, iou_pairs, l1_pairs
from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-3


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of the scalar loss w.r.t. every param entry."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(param.data.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_error: float
    ok: bool


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _nudged_leaf(rng, shape, margin=2e-3) -> Tensor:
    """Random values pushed away from zero so kinks stay outside the stencil."""
    vals = rng.uniform(-1.0, 1.0, size=shape)
    vals = np.where(np.abs(vals) < margin, margin * np.where(vals >= 0, 1.0, -1.0), vals)
    return Tensor(vals, requires_grad=True)


def _weigh(x: Tensor, seed: int) -> Tensor:
    """Reduce to a scalar through a weighting fixed by ``seed``.

    A fresh generator per call keeps the loss function identical
    across the repeated evaluations finite differencing needs.
    """
    r = T.constant(np.random.default_rng(seed).uniform(-1.0, 1.0, size=x.dims))
    return T.sum_all(T.mul(x, r))


def _mid_boxes(x: Tensor) -> Tensor:
    """Map a raw (m, 4) tensor into boxes whose corners avoid the unit-square clamp."""
    s = T.sigmoid(x)
    cx = T.add_const(T.scale(T.slice_cols(s, 0, 1), 0.30), 0.35)
    cy = T.add_const(T.scale(T.slice_cols(s, 1, 2), 0.30), 0.35)
    w = T.add_const(T.scale(T.slice_cols(s, 2, 3), 0.20), 0.10)
    h = T.add_const(T.scale(T.slice_cols(s, 3, 4), 0.20), 0.10)
    return T.concat_cols([cx, cy, w, h])


def _scn_matmul(rng):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4, 2))
    return [a, b], lambda: _weigh(T.matmul(a, b), 7)


def _scn_transpose(rng):
    a = _leaf(rng, (3, 5))
    return [a], lambda: _weigh(T.matmul(T.transpose(a), a), 11)


def _scn_elementwise(rng):
    a = _leaf(rng, (4, 3))
    b = _leaf(rng, (4, 3))
    c = _leaf(rng, (4, 3))

    def fn():
        denom = T.add_const(T.sigmoid(c), 0.5)  # bounded away from zero
        x = T.div(T.mul(T.add(a, b), T.sub(a, b)), denom)
        return _weigh(T.scale(T.add_const(x, 0.25), -1.7), 13)

    return [a, b, c], fn


def _scn_minmax(rng):
    a = _leaf(rng, (4, 4))
    # keep |a - b| away from the tie so the subgradient choice is irrelevant
    b = Tensor(a.data + np.where(rng.uniform(size=(4, 4)) > 0.5, 0.2, -0.2) + rng.uniform(-0.05, 0.05, (4, 4)),
               requires_grad=True)
    return [a, b], lambda: _weigh(T.add(T.minimum(a, b), T.maximum(a, b)), 17)


def _scn_relu_abs_clamp_pow(rng):
    vals = rng.uniform(-1.6, 1.6, size=(4, 4))
    # keep every value a safe distance from the kinks at 0 and +-0.9
    for kink in (0.0, -0.9, 0.9):
        near = np.abs(vals - kink) < 2e-3
        vals = np.where(near, kink + 2e-3, vals)
    a = Tensor(vals, requires_grad=True)

    def fn():
        x = T.add(T.relu(a), T.absolute(a))
        x = T.add(x, T.clamp(a, -0.9, 0.9))
        x = T.add(x, T.pow_const(T.add_const(T.absolute(a), 0.1), 2.5))
        return _weigh(x, 19)

    return [a], fn


def _scn_sigmoid_exp_log(rng):
    a = _leaf(rng, (3, 4))

    def fn():
        x = T.log(T.add_const(T.sigmoid(a), 0.1))
        y = T.exp(T.scale(a, 0.3))
        return _weigh(T.add(x, y), 23)

    return [a], fn


def _scn_softmax(rng):
    a = _leaf(rng, (3, 6), -2.0, 2.0)
    return [a], lambda: _weigh(T.softmax_rows(a), 29)


def _scn_layer_norm(rng):
    x = _leaf(rng, (4, 6))
    g = _leaf(rng, (1, 6), 0.5, 1.5)
    b = _leaf(rng, (1, 6), -0.5, 0.5)
    return [x, g, b], lambda: _weigh(T.layer_norm(x, g, b), 31)


def _scn_structural(rng):
    a = _leaf(rng, (5, 6))
    v = _leaf(rng, (1, 6))
    col_weights = np.random.default_rng(41).uniform(-1, 1, (4, 1))

    def fn():
        x = T.add(a, T.tile_rows(v, 5))
        left = T.slice_cols(x, 0, 3)
        right = T.slice_cols(x, 3, 6)
        x = T.concat_cols([right, left])
        x = T.gather_rows(x, [4, 0, 2, 2])  # repeated row exercises accumulation
        return T.sum_all(T.mul(T.sum_cols(x), T.constant(col_weights)))

    return [a, v], fn


def _scn_attention_bias(rng):
    q = _leaf(rng, (3, 4))
    k = _leaf(rng, (4, 4))
    v = _leaf(rng, (4, 4))
    bias = np.maximum(rng.uniform(size=(2, 2)), 1e-6)
    prior = CompositionPrior(bias=bias)
    return [q, k, v], lambda: _weigh(biased_cross_attention(q, k, v, prior), 43)


def _scn_iou_giou(rng):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4))

    def fn():
        boxes_a = _mid_boxes(a)
        boxes_b = _mid_boxes(b)
        return T.add(_weigh(giou_pairs(boxes_a, boxes_b), 47), _weigh(iou_pairs(boxes_a, boxes_b), 53))

    return [a, b], fn


def _scn_l1_pairs(rng):
    a = _leaf(rng, (3, 4))
    target = np.random.default_rng(59).uniform(0.2, 0.8, size=(3, 4))
    return [a], lambda: _weigh(l1_pairs(_mid_boxes(a), T.constant(target)), 61)


def _scn_focal(rng):
    a = _leaf(rng, (5, 1), -2.0, 2.0)
    targets = np.random.default_rng(67).uniform(0.0, 1.0, size=(5, 1))
    return [a], lambda: _weigh(focal_terms(T.sigmoid(a), targets, 2.0), 71)


def toy_config() -> ModelConfig:
    """A 413-parameter model small enough for exhaustive finite differences."""
    return ModelConfig(
        n_queries=3,
        n_layers=1,
        model_dim=4,
        n_heads=2,
        ffn_dim=8,
        grid_h=2,
        grid_w=2,
        in_channels=1,
        image_h=8,
        image_w=8,
    )


def _toy_fixture(rng, with_loss: bool):
    cfg = toy_config()
    state = init_state(cfg, seed=int(rng.integers(1 << 30)))
    # nudge every parameter off the symmetric init: with zero biases and a
    # 4-wide head, whole relu rows go dead and the next layer's
    # pre-activation sits exactly on the kink, where one-sided finite
    # differences disagree with the subgradient by construction
    with T.no_grad():
        for p in state.parameters():
            p.data += rng.uniform(0.02, 0.10, size=p.data.shape) * np.where(
                rng.random(p.data.shape) < 0.5, -1.0, 1.0
            )
    image = rng.uniform(0.0, 1.0, size=(1, 8, 8))
    prior = CompositionPrior(bias=np.maximum(rng.uniform(size=(2, 2)), 1e-6))
    if not with_loss:

        def fn():
            head = forward_train(image, prior, state)
            return T.add(_weigh(head.boxes, 73), _weigh(head.scores, 79))

        return state.parameters(), fn
    gts = [
        ScoredCrop(box=CropBox(0.42, 0.40, 0.30, 0.28), mos=4.6),
        ScoredCrop(box=CropBox(0.60, 0.62, 0.26, 0.24), mos=4.2),
        ScoredCrop(box=CropBox(0.30, 0.70, 0.20, 0.20), mos=2.8),
    ]
    w = LossWeights()
    with T.no_grad():
        frozen = assign(forward_train(image, prior, state).to_predictions(), gts, w)

    def fn():
        head = forward_train(image, prior, state)
        return training_loss(head, frozen, gts, w)

    return state.parameters(), fn


def _scn_decoder_forward(rng):
    return _toy_fixture(rng, with_loss=False)


def _scn_training_loss(rng):
    return _toy_fixture(rng, with_loss=True)


SCENARIOS: dict[str, Callable] = {
    "matmul": _scn_matmul,
    "transpose": _scn_transpose,
    "elementwise": _scn_elementwise,
    "minmax": _scn_minmax,
    "relu_abs_clamp_pow": _scn_relu_abs_clamp_pow,
    "sigmoid_exp_log": _scn_sigmoid_exp_log,
    "softmax": _scn_softmax,
    "layer_norm": _scn_layer_norm,
    "structural": _scn_structural,
    "attention_bias": _scn_attention_bias,
    "iou_giou": _scn_iou_giou,
    "l1_pairs": _scn_l1_pairs,
    "focal": _scn_focal,
    "decoder_forward": _scn_decoder_forward,
    "training_loss": _scn_training_loss,
}


def run_check(name: str, seed: int, step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL) -> CheckResult:
    """Build scenario ``name`` for ``seed`` and compare gradients."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    params, fn = SCENARIOS[name](rng)
    loss = fn()
    T.backward(loss)
    analytic = [p.grad.copy() for p in params]
    T.zero_grads(params)
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, max_rel_error(a, numeric_gradient(fn, p, step)))
    return CheckResult(name=name, seed=seed, max_error=worst, ok=worst < tol)


def run_all(seeds, names=None, step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL):
    """CheckResults for the cross product of scenarios and seeds."""
    chosen = list(names) if names else list(SCENARIOS)
    return [run_check(name, seed, step, tol) for name in chosen for seed in seeds]
