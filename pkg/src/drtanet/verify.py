"""64-bit finite-difference gradient suite over every differentiable operation.

Each case builds random float64 inputs, reduces the operation's output to a
scalar through a fixed random weighting, and compares analytic against
central-difference gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import ScopeSpec, TAParams, chva_forward, local_attention, project, temporal_attention_forward
from .core import ParamStore, Tensor, finite_difference_gradcheck, ops, precision
from .network import ChangeNet, ModelConfig, images_to_tensor
from .training import bce_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradcheckResult:
    name: str
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.total(ops.mul(out, Tensor(weights)))


def _store(rng, **shapes) -> ParamStore:
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, Tensor(rng.standard_normal(shape), requires_grad=True))
    return store


def _op_case(rng, fn: Callable, **shapes):
    """Case for ``fn(*inputs)`` with inputs drawn at ``shapes``."""
    store = _store(rng, **shapes)
    tensors = list(store.values())
    probe = fn(*tensors)
    weights = rng.standard_normal(probe.shape)
    return store, lambda: _weighted_sum(fn(*tensors), weights)


def _spread(rng, store: ParamStore, gap: float = 0.05):
    """Rewrite every input so that entries are pairwise distinct by at least ``gap``
    and away from zero (keeps max/relu away from their kinks)."""
    for t in store.values():
        flat = t.data.reshape(-1)
        vals = (np.arange(flat.size) + 1) * gap
        flat[:] = rng.permutation(vals) * rng.choice([-1.0, 1.0], size=flat.size)


def _ta_params(rng, cin, cout, scope, heads) -> TAParams:
    p = TAParams.init(rng, cin, cout, scope, heads)
    p.wk.data[...] = rng.standard_normal(p.wk.shape) / np.sqrt(cin)
    return p


def _attention_case(rng, scope: ScopeSpec, heads: int, H: int = 5, W: int = 4, c: int = 4):
    params = _ta_params(rng, c, c, scope, heads)
    x0 = Tensor(rng.standard_normal((2, c, H, W)), requires_grad=True)
    x1 = Tensor(rng.standard_normal((2, c, H, W)), requires_grad=True)
    store = ParamStore()
    store.add("x_t0", x0)
    store.add("x_t1", x1)
    for name, t in params.tensors().items():
        store.add(name, t)
    weights = rng.standard_normal((2, c, H, W))
    return store, lambda: _weighted_sum(temporal_attention_forward(x0, x1, params, scope, heads), weights)


def _chva_case(rng, K: int = 2, heads: int = 2, c: int = 4):
    ph = _ta_params(rng, c, c, ScopeSpec.hstrip(K), heads)
    pv = ph.sharing_projections(rng, ScopeSpec.vstrip(K), heads)
    x0 = Tensor(rng.standard_normal((1, c, 4, 5)), requires_grad=True)
    x1 = Tensor(rng.standard_normal((1, c, 4, 5)), requires_grad=True)
    store = ParamStore()
    store.add("x_t0", x0)
    store.add("x_t1", x1)
    for name, t in ph.tensors().items():
        store.add(name, t)
    store.add("v.rel_row", pv.rel_row)
    store.add("v.rel_col", pv.rel_col)
    weights = rng.standard_normal((1, c, 4, 5))
    return store, lambda: _weighted_sum(chva_forward(x0, x1, ph, pv, K, heads), weights)


def _bn_case(rng, training: bool):
    store = _store(rng, x=(3, 2, 3, 3), gamma=(2,), beta=(2,))
    x, gamma, beta = store.values()
    weights = rng.standard_normal((3, 2, 3, 3))
    mean0 = rng.standard_normal(2)
    var0 = rng.uniform(0.5, 2.0, 2)

    def f():
        # fresh buffers each call so the running-stat update cannot leak between evaluations
        return _weighted_sum(ops.batch_norm(x, gamma, beta, mean0.copy(), var0.copy(), training), weights)

    return store, f


def _softmax_case(rng):
    store = _store(rng, logits=(3, 5))
    valid = np.ones((3, 5), dtype=bool)
    valid[0, :2] = False
    valid[2, 4] = False
    (logits,) = store.values()
    weights = rng.standard_normal((3, 5))
    return store, lambda: _weighted_sum(ops.masked_softmax(logits, valid, axis=-1), weights)


def _bce_case(rng):
    store = _store(rng, logits=(2, 1, 4, 4))
    target = (rng.random((2, 1, 4, 4)) < 0.4).astype(np.float64)
    (logits,) = store.values()
    return store, lambda: bce_loss(logits, target, pos_weight=2.0)


def _slice_case(rng):
    store = _store(rng, x=(4, 2, 3, 3))
    (x,) = store.values()
    weights = rng.standard_normal((2, 2, 3, 3))
    return store, lambda: _weighted_sum(ops.batch_slice(x, 1, 3), weights)


def tiny_model_case(rng, seed: int = 0):
    """Full network, width 0.125, 32x32 input, batch of 2, training-mode normalization."""
    config = ModelConfig(width_mult=0.125, attention_mode="drtam", chva=True, input_size=(32, 32))
    model = ChangeNet(config, seed=seed)
    for ta in model.ta.values():
        ta.wk.data[...] = rng.standard_normal(ta.wk.shape) / np.sqrt(ta.wk.shape[1])
    imgs = rng.integers(0, 256, size=(4, 32, 32, 3), dtype=np.uint8)
    t0 = images_to_tensor(imgs[:2])
    t1 = images_to_tensor(imgs[2:])
    target = (rng.random((2, 1, 32, 32)) < 0.3).astype(np.float64)
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def f():
        for k, v in buffers.items():
            model.buffers[k][...] = v
        return bce_loss(model(t0, t1), target)

    return model.params, f


def _cases(rng):
    yield "add (broadcast)", lambda: _op_case(rng, ops.add, a=(2, 3, 4), b=(3, 1))
    yield "mul (broadcast)", lambda: _op_case(rng, ops.mul, a=(2, 3, 4), b=(1, 4))
    yield "scale", lambda: _op_case(rng, lambda x: ops.scale(x, -1.7), x=(3, 4))
    yield "mean", lambda: _op_case(rng, ops.mean, x=(3, 4))
    yield "concat_channels", lambda: _op_case(rng, lambda a, b: ops.concat_channels([a, b]), a=(2, 1, 3, 3), b=(2, 3, 3, 3))
    yield "concat_batch", lambda: _op_case(rng, lambda a, b: ops.concat_batch([a, b]), a=(1, 2, 3, 3), b=(2, 2, 3, 3))
    yield "batch_slice", lambda: _slice_case(rng)

    def relu_case():
        store, f = _op_case(rng, ops.relu, x=(2, 3, 4))
        _spread(rng, store)
        return store, f

    yield "relu", relu_case
    yield "conv2d 3x3 s1 p1", lambda: _op_case(rng, lambda x, w: ops.conv2d(x, w, None, 1, 1), x=(2, 3, 5, 6), w=(4, 3, 3, 3))
    yield "conv2d 7x7 s2 p3 + bias", lambda: _op_case(
        rng, lambda x, w, b: ops.conv2d(x, w, b, 2, 3), x=(1, 2, 8, 8), w=(3, 2, 7, 7), b=(3,)
    )
    yield "conv2d 1x1 + bias", lambda: _op_case(rng, lambda x, w, b: ops.conv2d(x, w, b), x=(2, 3, 4, 4), w=(5, 3, 1, 1), b=(5,))
    yield "bilinear_upsample2x", lambda: _op_case(rng, ops.bilinear_upsample2x, x=(1, 2, 3, 4))
    yield "avgpool2x", lambda: _op_case(rng, ops.avgpool2x, x=(1, 2, 4, 6))

    def maxpool_case():
        store, f = _op_case(rng, lambda x: ops.maxpool2d(x, 3, 2, 1), x=(1, 2, 6, 6))
        _spread(rng, store)
        return store, f

    yield "maxpool2d 3x3 s2", maxpool_case
    yield "batch_norm (training)", lambda: _bn_case(rng, True)
    yield "batch_norm (evaluation)", lambda: _bn_case(rng, False)
    yield "masked_softmax", lambda: _softmax_case(rng)
    yield "dot_last", lambda: _op_case(rng, ops.dot_last, x=(2, 3, 4), y=(3, 4))
    yield "projection", lambda: _op_case(rng, project, x=(2, 3, 4, 5), w=(4, 3))

    def local_case(scope, heads):
        def build():
            c = 2 * heads
            store = _store(
                rng,
                q=(2, c, 5, 4),
                k=(2, c, 5, 4),
                v=(2, c, 5, 4),
                rel_row=(heads, scope.row_span, 1),
                rel_col=(heads, scope.col_span, 1),
            )
            q, k, v, rr, rc = store.values()
            weights = rng.standard_normal((2, c, 5, 4))
            return store, lambda: _weighted_sum(local_attention(q, k, v, rr, rc, scope, heads), weights)

        return build

    for scope, heads in ((ScopeSpec.square(3), 2), (ScopeSpec.square(7), 1), (ScopeSpec.hstrip(2), 2), (ScopeSpec.vstrip(1), 1)):
        yield f"local_attention {scope.kind}{scope.extent} heads={heads}", local_case(scope, heads)
    yield "temporal_attention 5x5", lambda: _attention_case(rng, ScopeSpec.square(5), 2)
    yield "temporal_attention 1x1", lambda: _attention_case(rng, ScopeSpec.square(1), 1)
    yield "strip attention (K=2)", lambda: _chva_case(rng)
    yield "bce_loss", lambda: _bce_case(rng)


def gradcheck_suite(seed: int = 0, include_model: bool = True, model_samples: int = 4, log=None) -> list[GradcheckResult]:
    """Run every case in 64-bit mode; returns one result per case."""
    results = []
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        cases = list(_cases(rng))
        if include_model:
            cases.append(("full model (width 0.125, 32x32)", lambda: tiny_model_case(rng, seed)))
        for name, build in cases:
            start = time.perf_counter()
            store, f = build()
            samples = model_samples if name.startswith("full model") else None
            err = finite_difference_gradcheck(f, store, step=STEP, samples_per_param=samples, seed=seed)
            res = GradcheckResult(name, err, time.perf_counter() - start)
            results.append(res)
            if log is not None:
                log(res)
    return results
