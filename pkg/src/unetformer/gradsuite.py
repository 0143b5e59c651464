"""Finite-difference checks for every differentiable op and both full models."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from . import tensor as T
from .gradcheck import GradReport, gradcheck
from .losses import deep_supervision_loss, dice_ce_loss, masked_l1, onehot
from .swin import EncoderConfig, PatchMerging, SwinLayer, TokenGrid, WindowAttention, attention_mask, window_partition
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class Case:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[Tensor]
    max_coords: int | None = None
    eps: float = 1e-4


def _t(rng, *shape, scale=1.0, positive=False) -> Tensor:
    a = rng.standard_normal(shape) * scale
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    # keeps kinked ops (abs, leaky relu, clip) off their kinks under +-eps probes
    a = rng.standard_normal(shape)
    a = np.where(np.abs(a) < 0.05, a + np.sign(a + 1e-12) * 0.1, a)
    return Tensor(a, requires_grad=True)


def _grid_params(layer) -> list[Tensor]:
    return [p for _, p in layer.named_parameters()]


def op_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = [
        Case("add", lambda a, b: a + b, [_t(rng, 3, 4), _t(rng, 4)]),
        Case("sub", lambda a, b: a - b, [_t(rng, 3, 4), _t(rng, 3, 1)]),
        Case("mul", lambda a, b: a * b, [_t(rng, 3, 4), _t(rng, 1, 4)]),
        Case("div", lambda a, b: a / b, [_t(rng, 3, 4), _t(rng, 3, 4, positive=True)]),
        Case("neg", lambda a: -a, [_t(rng, 5)]),
        Case("power", lambda a: a**3, [_t(rng, 6)]),
        Case("exp", T.exp, [_t(rng, 2, 3)]),
        Case("log", T.log, [_t(rng, 2, 3, positive=True)]),
        Case("sqrt", T.sqrt, [_t(rng, 2, 3, positive=True)]),
        Case("abs", T.absolute, [_away_from_zero(rng, 7)]),
        Case("clip_min", lambda a: T.clip_min(a, 0.0), [_away_from_zero(rng, 7)]),
        Case("matmul", lambda a, b: a @ b, [_t(rng, 2, 3, 4), _t(rng, 4, 5)]),
        Case("sum", lambda a: a.sum(axis=1), [_t(rng, 3, 4, 2)]),
        Case("mean", lambda a: a.mean(axis=(0, 2), keepdims=True), [_t(rng, 3, 4, 2)]),
        Case("reshape", lambda a: a.reshape(4, 6), [_t(rng, 2, 3, 4)]),
        Case("transpose", lambda a: a.transpose(2, 0, 1), [_t(rng, 2, 3, 4)]),
        Case("getitem", lambda a: a[1:, ::2], [_t(rng, 3, 5)]),
        Case("take", lambda a: T.take(a, np.array([0, 2, 2, 1]), axis=1), [_t(rng, 2, 3)]),
        Case("concat", lambda a, b: T.concat([a, b], axis=1), [_t(rng, 2, 3), _t(rng, 2, 2)]),
        Case("pad_constant", lambda a: T.pad(a, [(1, 0), (0, 2)]), [_t(rng, 2, 3)]),
        Case("pad_edge", lambda a: T.pad(a, [(0, 1), (1, 1)], mode="edge"), [_t(rng, 2, 3)]),
        Case("roll", lambda a: T.roll(a, (1, -2), (0, 1)), [_t(rng, 3, 4)]),
        Case("where_mask", lambda a: T.where_mask(a, np.array([[True, False, True]])), [_t(rng, 2, 3)]),
        Case("leaky_relu", ops.leaky_relu, [_away_from_zero(rng, 10)]),
        Case("gelu", ops.gelu, [_t(rng, 10)]),
        Case("softmax", ops.softmax_lastaxis, [_t(rng, 3, 5)]),
        Case("layer_norm", ops.layer_norm, [_t(rng, 4, 6), _t(rng, 6), _t(rng, 6)]),
        Case("instance_norm", ops.instance_norm, [_t(rng, 1, 2, 3, 3, 2), _t(rng, 2), _t(rng, 2)]),
        Case("linear", ops.linear, [_t(rng, 4, 3), _t(rng, 5, 3), _t(rng, 5)]),
        Case("conv3d_k3_p1", lambda x, w, b: ops.conv3d(x, w, b, padding=1),
             [_t(rng, 1, 2, 4, 3, 3), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)]),
        Case("conv3d_k3_s2", lambda x, w: ops.conv3d(x, w, stride=2, padding=1),
             [_t(rng, 1, 2, 5, 4, 4), _t(rng, 2, 2, 3, 3, 3)]),
        Case("conv3d_k1", lambda x, w, b: ops.conv3d(x, w, b), [_t(rng, 1, 3, 2, 2, 2), _t(rng, 2, 3, 1, 1, 1), _t(rng, 2)]),
        Case("transposed_conv3d", ops.transposed_conv3d,
             [_t(rng, 1, 3, 2, 2, 2), _t(rng, 3, 2, 2, 2, 2), _t(rng, 2)]),
        Case("trilinear_x2", lambda x: ops.trilinear_upsample(x, 2), [_t(rng, 1, 2, 2, 3, 2)]),
        Case("trilinear_x4", lambda x: ops.trilinear_upsample(x, 4), [_t(rng, 1, 1, 2, 2, 2)]),
    ]

    probs = ops.softmax_lastaxis(Tensor(rng.standard_normal((6, 3)))).data.T.copy()
    target = onehot(rng.integers(0, 3, size=6), 3)
    cases.append(Case("dice_ce_loss", lambda p: dice_ce_loss(p, target), [Tensor(probs, requires_grad=True)]))
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[:2, :2, :2] = True
    tgt = rng.standard_normal((4, 4, 4))
    pred = tgt + np.where(rng.random((4, 4, 4)) < 0.5, 0.3, -0.3)
    cases.append(Case("masked_l1", lambda p: masked_l1(p, tgt, mask), [Tensor(pred, requires_grad=True)]))

    dim, heads, m = 8, 2, 2
    attn = WindowAttention(dim, heads, m, rng)
    attn.bias_table.data = rng.standard_normal(attn.bias_table.shape) * 0.1
    dims = (3, 4, 2)  # padded on the first axis, so pad masking is exercised
    grid_vals = _t(rng, int(np.prod(dims)), dim)
    layer = SwinLayer(dim, heads, m, 2.0, rng, shifted=True)
    layer.attn.bias_table.data = rng.standard_normal(layer.attn.bias_table.shape) * 0.1
    cases.append(Case("swin_layer_shifted", lambda v, *_: layer(TokenGrid(dims, v)).values,
                      [grid_vals] + _grid_params(layer), max_coords=12))
    even = (4, 4, 4)
    wins, rec = window_partition(TokenGrid(even, Tensor(rng.standard_normal((64, dim)))), m)
    cases.append(Case("window_attention_masked",
                      lambda w, *_: attn(w, rec.window, attention_mask(rec, (1, 1, 1))),
                      [Tensor(wins.data, requires_grad=True)] + _grid_params(attn), max_coords=12))
    merger = PatchMerging(dim, rng)
    cases.append(Case("patch_merging", lambda v, *_: merger(TokenGrid((3, 2, 2), v)).values,
                      [_t(rng, 12, dim)] + _grid_params(merger), max_coords=12))
    return cases


def model_cases(seed: int = 0, size: int = 32, coords: int = 2, n_params: int | None = None) -> list[Case]:
    """Both tiny end-to-end models under the deep-supervision loss.

    Inputs are the volume plus every parameter tensor (or ``n_params`` of them
    spread evenly from stem to heads), each probed at ``coords`` seeded coordinates.
    The probe step is 1e-6: with ~10^5 leaky-ReLU units, a 1e-4 step pushes a
    few pre-activations across the kink and the difference quotient picks up
    an O(eps) error.
    """
    from .decoders import DecoderConfig, UNetFormer

    rng = np.random.default_rng(seed + 1)
    volume = rng.standard_normal((1, 1, size, size, size))
    target = onehot(rng.integers(0, 3, size=(size,) * 3), 3)
    out = []
    for variant in ("cnn", "transformer"):
        model = UNetFormer(EncoderConfig.tiny(), DecoderConfig(variant, 3), seed=seed)
        for _, p in model.named_parameters():
            if not np.any(p.data):  # zero-initialised tables: give them signal
                p.data = rng.standard_normal(p.shape) * 0.05
        params = model.parameters()
        if n_params is not None:
            params = [params[i] for i in np.unique(np.linspace(0, len(params) - 1, n_params).round().astype(int))]

        def fn(x, *_, model=model):
            return deep_supervision_loss(model(x), target)

        out.append(Case(f"unetformer_{variant}", fn, [Tensor(volume.copy(), requires_grad=True)] + params,
                        max_coords=coords, eps=1e-6))
    return out


def run_suite(seed: int = 0, include_models: bool = True, tol: float = TOLERANCE,
              report: Callable[[GradReport, float], None] | None = None) -> list[GradReport]:
    cases = op_cases(seed) + (model_cases(seed) if include_models else [])
    results = []
    for case in cases:
        t0 = time.perf_counter()
        r = gradcheck(case.fn, case.inputs, eps=case.eps, op_name=case.name, max_coords=case.max_coords, seed=seed)
        if report:
            report(r, time.perf_counter() - t0)
        results.append(r)
    return results
