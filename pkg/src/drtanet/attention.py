"""Temporal attention between two feature maps over a local neighborhood.

For every pixel (i, j) and head, the query is taken from the t0 features at
(i, j); keys and values are taken from the t1 features at every position
(a, b) of the neighborhood centered on (i, j)::

    A_ij = sum_ab softmax_ab(q_ij . (k_ab + e_ab)) v_ab

where ``e_ab`` is a learned relative-position embedding built by
concatenating a row-offset vector and a column-offset vector (each half the
head width). Neighbors that fall outside the image are excluded from the
softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Tensor, ops, profiling
from .core.tensor import default_dtype, make_result

SCOPE_KINDS = ("square", "hstrip", "vstrip")


@dataclass(frozen=True)
class ScopeSpec:
    """Neighborhood shape: ``square`` k x k, ``hstrip`` 1 x (2K+1), ``vstrip`` (2K+1) x 1."""

    kind: str
    extent: int

    def __post_init__(self):
        if self.kind not in SCOPE_KINDS:
            raise ValueError(f"scope kind must be one of {SCOPE_KINDS}, got {self.kind!r}")
        if self.extent < 1 or self.extent % 2 == 0:
            raise ValueError(f"scope extent must be a positive odd integer, got {self.extent}")

    @classmethod
    def square(cls, k: int) -> "ScopeSpec":
        return cls("square", k)

    @classmethod
    def hstrip(cls, K: int) -> "ScopeSpec":
        return cls("hstrip", 2 * K + 1)

    @classmethod
    def vstrip(cls, K: int) -> "ScopeSpec":
        return cls("vstrip", 2 * K + 1)

    @property
    def radius(self) -> int:
        return (self.extent - 1) // 2

    @property
    def row_span(self) -> int:
        return 1 if self.kind == "hstrip" else self.extent

    @property
    def col_span(self) -> int:
        return 1 if self.kind == "vstrip" else self.extent

    @property
    def size(self) -> int:
        return self.row_span * self.col_span

    def offsets(self) -> list[tuple[int, int]]:
        """(row offset, column offset) pairs in row-major order."""
        rr = (self.row_span - 1) // 2
        cr = (self.col_span - 1) // 2
        return [(da, db) for da in range(-rr, rr + 1) for db in range(-cr, cr + 1)]

    def __str__(self):
        if self.kind == "square":
            return f"{self.extent}x{self.extent}"
        return f"{self.row_span}x{self.col_span}"


def neighborhood(i: int, j: int, scope: ScopeSpec, H: int, W: int) -> tuple[list[tuple[int, int]], list[bool]]:
    """Absolute neighbor positions of (i, j) and whether each lies inside the H x W map."""
    positions = [(i + da, j + db) for da, db in scope.offsets()]
    valid = [0 <= a < H and 0 <= b < W for a, b in positions]
    return positions, valid


@dataclass
class TAParams:
    """Learnable tensors of one temporal-attention layer.

    ``wq``, ``wk``, ``wv`` are (Cout, Cin) 1x1 projections. ``rel_row`` is
    (heads, row_span, d/2) and ``rel_col`` is (heads, col_span, d/2) with
    d = Cout / heads.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    rel_row: Tensor
    rel_col: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cin: int, cout: int, scope: ScopeSpec, heads: int, dtype=None):
        _check_heads(cout, heads)
        dtype = dtype or default_dtype()
        d = cout // heads

        def proj():
            return Tensor(rng.standard_normal((cout, cin)) / math.sqrt(cin), requires_grad=True, dtype=dtype)

        wq = proj()
        wv = proj()
        # keys start equal to queries so the initial logits measure feature similarity
        wk = Tensor(wq.data.copy(), requires_grad=True, dtype=dtype)
        return cls(
            wq=wq,
            wk=wk,
            wv=wv,
            rel_row=Tensor(rng.standard_normal((heads, scope.row_span, d // 2)) / math.sqrt(d), True, dtype),
            rel_col=Tensor(rng.standard_normal((heads, scope.col_span, d // 2)) / math.sqrt(d), True, dtype),
        )

    def sharing_projections(self, rng: np.random.Generator, scope: ScopeSpec, heads: int) -> "TAParams":
        """New parameter set reusing this set's projections with fresh embeddings for ``scope``."""
        d = self.wq.shape[0] // heads
        dtype = self.wq.dtype
        return TAParams(
            wq=self.wq,
            wk=self.wk,
            wv=self.wv,
            rel_row=Tensor(rng.standard_normal((heads, scope.row_span, d // 2)) / math.sqrt(d), True, dtype),
            rel_col=Tensor(rng.standard_normal((heads, scope.col_span, d // 2)) / math.sqrt(d), True, dtype),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "rel_row": self.rel_row, "rel_col": self.rel_col}

    def zero_embeddings(self):
        self.rel_row.data[...] = 0
        self.rel_col.data[...] = 0


def _check_heads(cout: int, heads: int):
    if heads < 1 or cout % heads:
        raise ValueError(f"output channels {cout} not divisible by head count {heads}")
    if (cout // heads) % 2:
        raise ValueError(f"head width {cout // heads} must be even to split row/column embeddings")


def _validate(x_t0: Tensor, x_t1: Tensor, params: TAParams, scope: ScopeSpec, heads: int):
    if x_t0.data.ndim != 4 or x_t0.shape != x_t1.shape:
        raise ValueError(f"temporal attention: input shapes differ ({x_t0.shape} vs {x_t1.shape})")
    cin = x_t0.shape[1]
    for name in ("wq", "wk", "wv"):
        w = getattr(params, name)
        if w.data.ndim != 2 or w.shape[1] != cin:
            raise ValueError(f"temporal attention: {name} shape {w.shape} does not accept {cin} input channels")
    cout = params.wq.shape[0]
    _check_heads(cout, heads)
    d = cout // heads
    want_row = (heads, scope.row_span, d // 2)
    want_col = (heads, scope.col_span, d // 2)
    if params.rel_row.shape != want_row or params.rel_col.shape != want_col:
        raise ValueError(
            f"temporal attention: embedding tables {params.rel_row.shape}/{params.rel_col.shape} "
            f"do not fit scope {scope} with {heads} heads (want {want_row}/{want_col})"
        )


def project(x: Tensor, w: Tensor) -> Tensor:
    """1x1 channel projection: (N, Cin, H, W) with (Cout, Cin) -> (N, Cout, H, W)."""
    n, cin, H, W = x.shape
    if w.data.ndim != 2 or w.shape[1] != cin:
        raise ValueError(f"project: weight shape {w.shape} does not accept input shape {x.shape}")
    xr = x.data.reshape(n, cin, H * W)
    out = np.matmul(w.data, xr)
    profiling.record("projection", n * w.shape[0] * cin * H * W)

    def bw(g):
        g = g.reshape(n, w.shape[0], H * W)
        gx = np.matmul(w.data.T, g).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(g, xr, axes=([0, 2], [0, 2])) if w.requires_grad else None
        return gx, gw

    return make_result(out.reshape(n, w.shape[0], H, W), (x, w), bw, "project")


def local_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    rel_row: Tensor,
    rel_col: Tensor,
    scope: ScopeSpec,
    heads: int,
    return_weights: bool = False,
):
    """Attention of projected queries over projected keys/values in ``scope``.

    ``q``, ``k``, ``v`` are (N, Cout, H, W). Returns (N, Cout, H, W) and,
    with ``return_weights``, the softmax weights (N, heads, S, H, W).
    """
    n, cout, H, W = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ValueError(f"local_attention: q/k/v shapes differ ({q.shape}, {k.shape}, {v.shape})")
    _check_heads(cout, heads)
    d = cout // heads
    half = d // 2
    if rel_row.shape != (heads, scope.row_span, half) or rel_col.shape != (heads, scope.col_span, half):
        raise ValueError(
            f"local_attention: embedding tables {rel_row.shape}/{rel_col.shape} do not fit scope {scope} "
            f"with {heads} heads (want {(heads, scope.row_span, half)}/{(heads, scope.col_span, half)})"
        )
    qd = q.data.reshape(n, heads, d, H, W)
    kd = k.data.reshape(n, heads, d, H, W)
    vd = v.data.reshape(n, heads, d, H, W)

    offsets = scope.offsets()
    S = len(offsets)
    pr = (scope.row_span - 1) // 2
    pc = (scope.col_span - 1) // 2
    pad = ((0, 0), (0, 0), (0, 0), (pr, pr), (pc, pc))
    kp = np.pad(kd, pad)
    vp = np.pad(vd, pad)
    slices = [(slice(pr + da, pr + da + H), slice(pc + db, pc + db + W)) for da, db in offsets]

    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    valid = np.stack(
        [(rows + da >= 0) & (rows + da < H) & (cols + db >= 0) & (cols + db < W) for da, db in offsets]
    )  # (S, H, W)

    row_idx = [da + pr for da, _ in offsets]
    col_idx = [db + pc for _, db in offsets]
    # e[h, :, s] = concat(rel_row[h, row(s)], rel_col[h, col(s)])
    e = np.concatenate([rel_row.data[:, row_idx, :], rel_col.data[:, col_idx, :]], axis=2).transpose(0, 2, 1)

    logits = np.einsum("nhdij,hds->nhsij", qd, e)
    for s, (si, sj) in enumerate(slices):
        logits[:, :, s] += (qd * kp[:, :, :, si, sj]).sum(axis=2)
    logits = np.where(valid[None, None], logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    wts = np.exp(logits)
    wts /= wts.sum(axis=2, keepdims=True)

    out = np.zeros_like(qd)
    for s, (si, sj) in enumerate(slices):
        out += wts[:, :, s, None] * vp[:, :, :, si, sj]
    profiling.record("attention", 2 * n * H * W * heads * S * d)

    def bw(g):
        g = g.reshape(n, heads, d, H, W)
        gw = np.empty_like(wts)
        gvp = np.zeros_like(vp)
        for s, (si, sj) in enumerate(slices):
            gw[:, :, s] = (g * vp[:, :, :, si, sj]).sum(axis=2)
            gvp[:, :, :, si, sj] += wts[:, :, s, None] * g
        gl = wts * (gw - (wts * gw).sum(axis=2, keepdims=True))
        gq = np.einsum("nhsij,hds->nhdij", gl, e)
        gkp = np.zeros_like(kp)
        for s, (si, sj) in enumerate(slices):
            gq += gl[:, :, s, None] * kp[:, :, :, si, sj]
            gkp[:, :, :, si, sj] += gl[:, :, s, None] * qd
        ge = np.einsum("nhsij,nhdij->hds", gl, qd)
        grow = np.zeros_like(rel_row.data)
        gcol = np.zeros_like(rel_col.data)
        for s in range(S):
            grow[:, row_idx[s]] += ge[:, :half, s]
            gcol[:, col_idx[s]] += ge[:, half:, s]
        gk = gkp[:, :, :, pr : pr + H, pc : pc + W].reshape(k.shape)
        gv = gvp[:, :, :, pr : pr + H, pc : pc + W].reshape(v.shape)
        return gq.reshape(q.shape), gk, gv, grow, gcol

    result = make_result(out.reshape(n, cout, H, W), (q, k, v, rel_row, rel_col), bw, f"local_attention[{scope}]")
    if return_weights:
        return result, wts
    return result


def temporal_attention_forward(
    x_t0: Tensor,
    x_t1: Tensor,
    params: TAParams,
    scope: ScopeSpec,
    heads: int,
    query_from: str = "t0",
    return_weights: bool = False,
):
    """Temporal attention map (N, Cout, H, W).

    ``query_from="t1"`` swaps the roles of the two inputs (query from t1,
    keys/values from t0). With ``return_weights=True`` the softmax weights,
    shaped (N, heads, S, H, W) with S the neighborhood size in row-major
    offset order, are returned as a second value.
    """
    _validate(x_t0, x_t1, params, scope, heads)
    xq, xkv = _query_source(x_t0, x_t1, query_from)
    q = project(xq, params.wq)
    k = project(xkv, params.wk)
    v = project(xkv, params.wv)
    return local_attention(q, k, v, params.rel_row, params.rel_col, scope, heads, return_weights)


def _query_source(x_t0, x_t1, query_from):
    if query_from == "t0":
        return x_t0, x_t1
    if query_from == "t1":
        return x_t1, x_t0
    raise ValueError(f"query_from must be 't0' or 't1', got {query_from!r}")


def ta_naive_oracle(
    x_t0,
    x_t1,
    params: TAParams,
    scope: ScopeSpec,
    heads: int,
    query_from: str = "t0",
) -> np.ndarray:
    """Per-pixel loop evaluation of temporal attention, for testing only."""
    a0 = np.asarray(x_t0.data if isinstance(x_t0, Tensor) else x_t0, dtype=np.float64)
    a1 = np.asarray(x_t1.data if isinstance(x_t1, Tensor) else x_t1, dtype=np.float64)
    if query_from == "t1":
        a0, a1 = a1, a0
    Wq = np.asarray(params.wq.data, dtype=np.float64)
    Wk = np.asarray(params.wk.data, dtype=np.float64)
    Wv = np.asarray(params.wv.data, dtype=np.float64)
    R = np.asarray(params.rel_row.data, dtype=np.float64)
    Cc = np.asarray(params.rel_col.data, dtype=np.float64)
    N, _, H, W = a0.shape
    cout = Wq.shape[0]
    d = cout // heads
    if scope.kind == "square":
        rr = cr = (scope.extent - 1) // 2
    elif scope.kind == "hstrip":
        rr, cr = 0, (scope.extent - 1) // 2
    else:
        rr, cr = (scope.extent - 1) // 2, 0

    out = np.zeros((N, cout, H, W))
    for n in range(N):
        for i in range(H):
            for j in range(W):
                q_full = Wq @ a0[n, :, i, j]
                for h in range(heads):
                    q = q_full[h * d : (h + 1) * d]
                    scores = []
                    values = []
                    for da in range(-rr, rr + 1):
                        for db in range(-cr, cr + 1):
                            a, b = i + da, j + db
                            if a < 0 or a >= H or b < 0 or b >= W:
                                continue
                            k = (Wk @ a1[n, :, a, b])[h * d : (h + 1) * d]
                            v = (Wv @ a1[n, :, a, b])[h * d : (h + 1) * d]
                            emb = np.concatenate([R[h, da + rr], Cc[h, db + cr]])
                            score = 0.0
                            for c in range(d):
                                score += q[c] * (k[c] + emb[c])
                            scores.append(score)
                            values.append(v)
                    top = max(scores)
                    exps = [math.exp(s - top) for s in scores]
                    z = sum(exps)
                    acc = np.zeros(d)
                    for wgt, v in zip(exps, values):
                        acc += (wgt / z) * v
                    out[n, h * d : (h + 1) * d, i, j] = acc
    return out


def chva_forward(
    x_t0: Tensor,
    x_t1: Tensor,
    params_h: TAParams,
    params_v: TAParams,
    K: int,
    heads: int,
    query_from: str = "t0",
) -> Tensor:
    """Sum of horizontal (1 x 2K+1) and vertical (2K+1 x 1) strip attention."""
    if K < 0:
        raise ValueError(f"strip half-length K must be >= 0, got {K}")
    horiz = temporal_attention_forward(x_t0, x_t1, params_h, ScopeSpec.hstrip(K), heads, query_from)
    vert = temporal_attention_forward(x_t0, x_t1, params_v, ScopeSpec.vstrip(K), heads, query_from)
    return ops.add(horiz, vert)


def fuse_chva(square_map: Tensor, chva_map: Tensor) -> Tensor:
    if square_map.shape != chva_map.shape:
        raise ValueError(f"fuse_chva: map shapes differ ({square_map.shape} vs {chva_map.shape})")
    return ops.add(square_map, chva_map)


# ---------------------------------------------------------------------------
# heatmap export


def to_heatmap(arr) -> np.ndarray:
    """Min-max normalize a 2-D map to uint8. Constant maps become all zeros."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_attention_heatmaps(
    weights_per_level: list[np.ndarray], scopes: list[ScopeSpec], out_dir, batch_index: int = 0
) -> list[Path]:
    """Write the center-offset attention weight of every level and head as grayscale PNGs.

    The center weight measures how strongly each t0 query attends to the
    same position in t1; low values mark regions that look different.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for level, (wts, scope) in enumerate(zip(weights_per_level, scopes), start=1):
        center = scope.offsets().index((0, 0))
        for h in range(wts.shape[1]):
            path = out_dir / f"level{level}_head{h}.png"
            Image.fromarray(to_heatmap(wts[batch_index, h, center]), mode="L").save(path)
            written.append(path)
    return written
