"""Siamese encoder, temporal-attention stack and decoder.

The encoder is a width-scalable ResNet-18 layout shared by both time points.
Each of its four feature levels (strides 4, 8, 16, 32) feeds one temporal
attention layer; each level's map is fused with the downsampled map of the
level above it. The decoder upsamples from the coarsest fused map back to the
input resolution, taking the fused maps as skip connections.
"""

from __future__ import annotations

import json
import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import ScopeSpec, TAParams, local_attention, project
from .core import ParamStore, Tensor, ops
from .core.tensor import default_dtype

DRTAM_SCHEDULE = (7, 5, 3, 1)
FIXED_SCOPES = (1, 3, 5, 7)
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

_MODE_RE = re.compile(r"^fixed\((\d+)\)$")


@dataclass
class ModelConfig:
    encoder_widths: tuple = (64, 128, 256, 512)
    width_mult: float = 1.0
    attention_mode: str = "drtam"  # "drtam" or "fixed(k)"
    chva: bool = True
    heads: int = 4
    input_size: tuple = (256, 256)
    classifier_channels: int = 1
    query_from: str = "t0"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.encoder_widths) != 4:
            raise ValueError(f"encoder_widths needs 4 entries, got {self.encoder_widths}")
        if self.width_mult <= 0:
            raise ValueError(f"width_mult must be positive, got {self.width_mult}")
        if self.classifier_channels != 1:
            raise ValueError("classifier_channels must be 1 (single change logit)")
        if self.query_from not in ("t0", "t1"):
            raise ValueError(f"query_from must be 't0' or 't1', got {self.query_from!r}")
        self.scopes()  # validates attention_mode
        for s in self.input_size:
            if s % 32:
                raise ValueError(f"input_size {self.input_size} must be divisible by 32")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_mult))) for w in self.encoder_widths)

    def scopes(self) -> tuple[int, int, int, int]:
        """Square scope extent per level."""
        if self.attention_mode == "drtam":
            return DRTAM_SCHEDULE
        m = _MODE_RE.match(self.attention_mode)
        if not m or int(m.group(1)) not in FIXED_SCOPES:
            raise ValueError(
                f"attention_mode must be 'drtam' or 'fixed(k)' with k in {FIXED_SCOPES}, got {self.attention_mode!r}"
            )
        k = int(m.group(1))
        return (k, k, k, k)

    def chva_levels(self) -> tuple[int, ...]:
        """Levels (1-based) that carry strip attention."""
        if not self.chva:
            return ()
        if self.attention_mode == "drtam":
            return (1, 2, 3)
        return (1, 2, 3, 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class ModelStats:
    mac_count: int
    param_count: int
    embedding_param_count: int
    breakdown: "OrderedDict[str, dict]" = field(default_factory=OrderedDict)

    @property
    def non_embedding_param_count(self) -> int:
        return self.param_count - self.embedding_param_count

    def format(self) -> str:
        lines = [f"{'module':<28}{'MACs':>16}{'params':>14}"]
        for name, row in self.breakdown.items():
            lines.append(f"{name:<28}{row['macs']:>16,}{row['params']:>14,}")
        lines.append(f"{'total':<28}{self.mac_count:>16,}{self.param_count:>14,}")
        lines.append(f"MACs (G): {self.mac_count / 1e9:.3f}")
        lines.append(f"#PARAMs (M): {self.param_count / 1e6:.3f}")
        lines.append(f"#PARAMs excluding positional embeddings (M): {self.non_embedding_param_count / 1e6:.3f}")
        return "\n".join(lines)


def is_embedding(name: str) -> bool:
    return name.endswith("rel_row") or name.endswith("rel_col")


def _blocks(widths):
    """(name, cin, cout, stride) for the 8 residual blocks."""
    out = []
    cin = widths[0]
    for li, cout in enumerate(widths, start=1):
        for bi in range(2):
            stride = 2 if (li > 1 and bi == 0) else 1
            out.append((f"layer{li}.{bi}", cin, cout, stride))
            cin = cout
    return out


def _decoder_plan(widths):
    """(name, input channels, output channels, skip level or None) per stage."""
    c1, c2, c3, c4 = widths
    dec = (c4 // 2, c3 // 2, c2 // 2, c1 // 2)
    dec = tuple(max(1, d) for d in dec)
    return [
        ("stage1", c4 + c3, dec[0], 3),
        ("stage2", dec[0] + c2, dec[1], 2),
        ("stage3", dec[1] + c1, dec[2], 1),
        ("stage4", dec[2], dec[3], None),
    ]


class ChangeNet:
    """TANet / DR-TANet change detector.

    Parameters live in ``self.params``; batch-norm running statistics live in
    ``self.buffers``. ``train()``/``eval()`` switch normalization between
    batch statistics and the frozen running statistics.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or default_dtype()).type
        self.params = ParamStore()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.training = True
        self.ta: dict[int, TAParams] = {}
        self.strips: dict[int, tuple[TAParams, TAParams]] = {}
        self._build(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------

    def _param(self, name, array):
        return self.params.add(name, Tensor(array, requires_grad=True, dtype=self.dtype))

    def _conv(self, rng, name, cin, cout, k, bias=False):
        std = math.sqrt(2.0 / (cin * k * k))
        self._param(f"{name}.weight", rng.standard_normal((cout, cin, k, k)) * std)
        if bias:
            self._param(f"{name}.bias", np.zeros(cout))

    def _bn(self, name, c):
        self._param(f"{name}.gamma", np.ones(c))
        self._param(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def _build(self, rng):
        cfg = self.config
        w = cfg.widths
        self._conv(rng, "encoder.stem.conv", 3, w[0], 7)
        self._bn("encoder.stem.bn", w[0])
        for name, cin, cout, stride in _blocks(w):
            p = f"encoder.{name}"
            self._conv(rng, f"{p}.conv1", cin, cout, 3)
            self._bn(f"{p}.bn1", cout)
            self._conv(rng, f"{p}.conv2", cout, cout, 3)
            self._bn(f"{p}.bn2", cout)
            if stride != 1 or cin != cout:
                self._conv(rng, f"{p}.down", cin, cout, 1)
                self._bn(f"{p}.down_bn", cout)

        chva_levels = cfg.chva_levels()
        for lvl, (c, k) in enumerate(zip(w, cfg.scopes()), start=1):
            p = f"attention.level{lvl}"
            scope = ScopeSpec.square(k)
            ta = TAParams.init(rng, c, c, scope, cfg.heads, dtype=self.dtype)
            for key, t in ta.tensors().items():
                self.params.add(f"{p}.{key}", t)
            self.ta[lvl] = ta
            if lvl in chva_levels:
                K = (k - 1) // 2
                th = ta.sharing_projections(rng, ScopeSpec.hstrip(K), cfg.heads)
                tv = ta.sharing_projections(rng, ScopeSpec.vstrip(K), cfg.heads)
                for tag, t in (("hstrip", th), ("vstrip", tv)):
                    self.params.add(f"{p}.{tag}.rel_row", t.rel_row)
                    self.params.add(f"{p}.{tag}.rel_col", t.rel_col)
                self.strips[lvl] = (th, tv)
            if lvl > 1:
                self._conv(rng, f"{p}.proj", w[lvl - 2], c, 1)
                self._conv(rng, f"{p}.fuse", 2 * c, c, 1, bias=True)

        for name, cin, cout, _ in _decoder_plan(w):
            self._conv(rng, f"decoder.{name}.conv", cin, cout, 3)
            self._bn(f"decoder.{name}.bn", cout)
        last = _decoder_plan(w)[-1][2]
        self._conv(rng, "decoder.classifier", last, 1, 1, bias=True)

    # -- mode / state -------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict(self.params.state())
        for name, buf in self.buffers.items():
            state[f"buffer:{name}"] = buf
        return state

    def load_state_dict(self, state):
        self.params.load({k: v for k, v in state.items() if not k.startswith("buffer:")})
        for name in self.buffers:
            key = f"buffer:{name}"
            if key not in state:
                raise KeyError(f"checkpoint lacks buffer {name!r}")
            self.buffers[name][...] = state[key]

    def embedding_tensors(self):
        return [t for n, t in self.params.items() if is_embedding(n)]

    # -- layers ---------------------------------------------------------------

    def _conv_fwd(self, x, name, stride=1, padding=0):
        b = self.params[f"{name}.bias"] if f"{name}.bias" in self.params else None
        return ops.conv2d(x, self.params[f"{name}.weight"], b, stride=stride, padding=padding)

    def _bn_fwd(self, x, name):
        return ops.batch_norm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            self.training,
        )

    def _block(self, x, name, stride):
        p = f"encoder.{name}"
        out = ops.relu(self._bn_fwd(self._conv_fwd(x, f"{p}.conv1", stride, 1), f"{p}.bn1"))
        out = self._bn_fwd(self._conv_fwd(out, f"{p}.conv2", 1, 1), f"{p}.bn2")
        if f"{p}.down.weight" in self.params:
            x = self._bn_fwd(self._conv_fwd(x, f"{p}.down", stride, 0), f"{p}.down_bn")
        return ops.relu(ops.add(out, x))

    # -- public forward pieces ------------------------------------------------

    def encoder_forward(self, x: Tensor) -> list[Tensor]:
        """Features at strides 4, 8, 16, 32."""
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"encoder expects (N, 3, H, W) images, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"image size {x.shape[2]}x{x.shape[3]} must be divisible by 32")
        h = ops.relu(self._bn_fwd(self._conv_fwd(x, "encoder.stem.conv", 2, 3), "encoder.stem.bn"))
        h = ops.maxpool2d(h, 3, 2, 1)
        feats = []
        for name, _, _, stride in _blocks(self.config.widths):
            h = self._block(h, name, stride)
            if name.endswith(".1"):
                feats.append(h)
        return feats

    def attention_level(self, lvl: int, f0: Tensor, f1: Tensor, return_weights: bool = False):
        """Temporal attention (plus strip attention when enabled) at one level."""
        cfg = self.config
        ta = self.ta[lvl]
        xq, xkv = (f0, f1) if cfg.query_from == "t0" else (f1, f0)
        q = project(xq, ta.wq)
        k = project(xkv, ta.wk)
        v = project(xkv, ta.wv)
        scope = ScopeSpec.square(cfg.scopes()[lvl - 1])
        res = local_attention(q, k, v, ta.rel_row, ta.rel_col, scope, cfg.heads, return_weights)
        out, wts = res if return_weights else (res, None)
        if lvl in self.strips:
            K = scope.radius
            th, tv = self.strips[lvl]
            horiz = local_attention(q, k, v, th.rel_row, th.rel_col, ScopeSpec.hstrip(K), cfg.heads)
            vert = local_attention(q, k, v, tv.rel_row, tv.rel_col, ScopeSpec.vstrip(K), cfg.heads)
            out = ops.add(out, ops.add(horiz, vert))
        return (out, wts) if return_weights else out

    def attention_stack_forward(self, feats_t0, feats_t1, return_weights: bool = False):
        if len(feats_t0) != 4 or len(feats_t1) != 4:
            raise ValueError("attention stack needs 4 feature levels per time point")
        maps, weights = [], []
        prev = None
        for lvl, (f0, f1) in enumerate(zip(feats_t0, feats_t1), start=1):
            if f0.shape != f1.shape:
                raise ValueError(f"level {lvl}: feature shapes differ ({f0.shape} vs {f1.shape})")
            a = self.attention_level(lvl, f0, f1, return_weights)
            if return_weights:
                a, wts = a
                weights.append(wts)
            if prev is not None:
                p = f"attention.level{lvl}"
                down = self._conv_fwd(ops.avgpool2x(prev), f"{p}.proj")
                a = self._conv_fwd(ops.concat_channels([a, down]), f"{p}.fuse")
            maps.append(a)
            prev = a
        return (maps, weights) if return_weights else maps

    def decoder_forward(self, maps) -> Tensor:
        if len(maps) != 4:
            raise ValueError("decoder needs 4 attention maps")
        h = maps[3]
        for name, _, _, skip in _decoder_plan(self.config.widths):
            h = ops.bilinear_upsample2x(h)
            if skip is not None:
                s = maps[skip - 1]
                if s.shape[2:] != h.shape[2:]:
                    raise ValueError(f"decoder {name}: skip map {s.shape} does not match upsampled {h.shape}")
                h = ops.concat_channels([h, s])
            h = ops.relu(self._bn_fwd(self._conv_fwd(h, f"decoder.{name}.conv", 1, 1), f"decoder.{name}.bn"))
        # 1x1 conv and bilinear upsampling commute; classify at half resolution.
        logits = self._conv_fwd(h, "decoder.classifier")
        return ops.bilinear_upsample2x(logits)

    def forward(self, img_t0: Tensor, img_t1: Tensor) -> Tensor:
        if img_t0.shape != img_t1.shape:
            raise ValueError(f"image shapes differ ({img_t0.shape} vs {img_t1.shape})")
        f0, f1 = self.encode_pair(img_t0, img_t1)
        return self.decoder_forward(self.attention_stack_forward(f0, f1))

    def encode_pair(self, img_t0: Tensor, img_t1: Tensor):
        """Encode both time points as one batch so that training-mode normalization
        uses statistics shared by t0 and t1."""
        n = img_t0.shape[0]
        feats = self.encoder_forward(ops.concat_batch([img_t0, img_t1]))
        return [ops.batch_slice(f, 0, n) for f in feats], [ops.batch_slice(f, n, 2 * n) for f in feats]

    __call__ = forward


def model_forward(img_t0: Tensor, img_t1: Tensor, model: ChangeNet) -> Tensor:
    return model.forward(img_t0, img_t1)


def images_to_tensor(images: np.ndarray, dtype=None) -> Tensor:
    """uint8 (N, H, W, 3) or (H, W, 3) images -> normalized (N, 3, H, W) tensor."""
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    x = (a.astype(np.float64) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
    return Tensor(x.transpose(0, 3, 1, 2), dtype=dtype)


# ---------------------------------------------------------------------------
# analytic accounting


def count_stats(config: ModelConfig) -> ModelStats:
    """Parameter and multiply-accumulate counts for one forward pass of one image pair.

    Convolutions count kh*kw*Cin*Cout*Hout*Wout MACs. Attention counts the
    three projections plus one MAC per query/key and weight/value product
    over the full scope. Normalization, activations, softmax, pooling and
    interpolation are not counted.
    """
    w = config.widths
    H, W = config.input_size
    heads = config.heads
    rows: OrderedDict[str, dict] = OrderedDict()

    def add(module, params=0, macs=0, emb=0):
        r = rows.setdefault(module, {"params": 0, "macs": 0, "embedding_params": 0})
        r["params"] += params
        r["macs"] += macs
        r["embedding_params"] += emb

    def conv(module, cin, cout, k, hout, wout, bias=False, times=1):
        add(module, cin * cout * k * k + (cout if bias else 0), times * k * k * cin * cout * hout * wout)

    # encoder: parameters counted once (shared), MACs twice (two images)
    h, ww = H // 2, W // 2
    conv("encoder", 3, w[0], 7, h, ww, times=2)
    add("encoder", params=2 * w[0])
    h, ww = h // 2, ww // 2
    for name, cin, cout, stride in _blocks(w):
        ho, wo = h // stride, ww // stride
        conv("encoder", cin, cout, 3, ho, wo, times=2)
        conv("encoder", cout, cout, 3, ho, wo, times=2)
        add("encoder", params=4 * cout)
        if stride != 1 or cin != cout:
            conv("encoder", cin, cout, 1, ho, wo, times=2)
            add("encoder", params=2 * cout)
        h, ww = ho, wo

    chva_levels = config.chva_levels()
    for lvl, (c, k) in enumerate(zip(w, config.scopes()), start=1):
        hl, wl = H // 2 ** (lvl + 1), W // 2 ** (lvl + 1)
        d = c // heads
        mod = f"attention.level{lvl}"
        add(mod, params=3 * c * c, macs=3 * c * c * hl * wl)
        add(mod, macs=2 * hl * wl * heads * k * k * d, emb=heads * 2 * k * (d // 2))
        if lvl in chva_levels:
            strip = 2 * ((k - 1) // 2) + 1
            add(mod, macs=2 * 2 * hl * wl * heads * strip * d, emb=2 * heads * (strip + 1) * (d // 2))
        if lvl > 1:
            conv(mod, w[lvl - 2], c, 1, hl, wl)
            conv(mod, 2 * c, c, 1, hl, wl, bias=True)

    hd, wd = H // 32, W // 32
    for name, cin, cout, _ in _decoder_plan(w):
        hd, wd = hd * 2, wd * 2
        conv("decoder", cin, cout, 3, hd, wd)
        add("decoder", params=2 * cout)
    conv("decoder", _decoder_plan(w)[-1][2], 1, 1, hd, wd, bias=True)

    for r in rows.values():
        r["params"] += r["embedding_params"]
    return ModelStats(
        mac_count=sum(r["macs"] for r in rows.values()),
        param_count=sum(r["params"] for r in rows.values()),
        embedding_param_count=sum(r["embedding_params"] for r in rows.values()),
        breakdown=rows,
    )


def count_params(config: ModelConfig) -> ModelStats:
    return count_stats(config)


def count_macs(config: ModelConfig) -> ModelStats:
    return count_stats(config)
