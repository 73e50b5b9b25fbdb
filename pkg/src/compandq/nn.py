"""Minimal NCHW layer engine with manual forward/backward.

Supports exactly what desk-scale quantization experiments need: conv2d and
fully-connected layers with per-layer learnable quantizers on weights and
activations, batch normalization (whose bias provides the learnable lower
bound in front of unsigned activation quantizers), pooling, residual blocks,
and softmax cross-entropy.  Activation quantizers sit after batch norm and
immediately before the convolution that consumes them.

Training runs at float32; every layer follows its parameters' dtype, so the
gradient-check harness can rebuild the identical graph at float64.  All
reductions happen in a fixed order: two runs from the same seed produce
bit-identical losses.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import lut as lutmod
from ._conv import fold_add, unfold
from .gradients import accumulate_tensor_grads
from .quantizer import (
    CompandingState,
    ContractViolation,
    QuantSpec,
    clip_uniform_quantize,
    identity_state,
    lcq_forward_requant,
    quant_levels,
    quantizer_record,
)
from .weightnorm import lwn_quantize, standardize, weight_stats

__all__ = [
    "Param",
    "QuantizerNode",
    "Conv2d",
    "Linear",
    "BatchNorm",
    "ActQuant",
    "Flatten",
    "GlobalAvgPool",
    "Residual",
    "SoftmaxXent",
    "Model",
    "build_cnn4",
    "build_layer_lut",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class Param:
    """One learnable tensor with its gradient accumulator.

    ``group`` routes the learning rate ('w' for weights/norm params, 'q' for
    quantizer clip/companding parameters); ``decay`` opts into weight decay.
    """

    def __init__(self, name, value, group="w", decay=True, dtype=np.float32):
        self.name = name
        self.val = np.asarray(value, dtype=dtype)
        self.grad = np.zeros_like(self.val)
        self.group = group
        self.decay = decay

    @property
    def dtype(self):
        return self.val.dtype

    def zero_grad(self):
        self.grad[...] = 0.0


class QuantizerNode:
    """Learnable quantizer bound to one role (weight or activation) of one
    layer.  ``method`` is 'lcq' (companding + outer re-quantization) or
    'uniform' (plain clipped quantizer; used for 2-bit weights, where ternary
    levels leave companding nothing to learn, and for the 8-bit edge
    layers)."""

    def __init__(self, name, role, bits, method="lcq", intervals=16, outer_bits=8,
                 alpha_init=None, dtype=np.float32, learn_theta=True):
        if method not in ("lcq", "uniform"):
            raise ContractViolation(f"unknown quantizer method {method!r}")
        self.name = name
        self.role = role
        self.method = method
        signed = role == "weight"
        outer = outer_bits if method == "lcq" else bits + 1  # unused for uniform
        self.spec = QuantSpec(bits, signed=signed, outer_bits=outer,
                              intervals=intervals)
        if alpha_init is None:
            alpha_init = 3.0 if signed else 8.0
        self.alpha = Param(f"{name}.alpha", alpha_init, group="q", decay=False,
                           dtype=dtype)
        self.learn_theta = learn_theta and method == "lcq"
        self.theta = (
            Param(f"{name}.theta", np.zeros(intervals), group="q", decay=False,
                  dtype=dtype)
            if method == "lcq"
            else None
        )

    def params(self):
        ps = [self.alpha]
        if self.theta is not None and self.learn_theta:
            ps.append(self.theta)
        return ps

    def state(self) -> CompandingState:
        theta = (
            self.theta.val.astype(np.float64)
            if self.theta is not None
            else np.zeros(self.spec.intervals)
        )
        return CompandingState.derive(theta, float(self.alpha.val))

    def quantize(self, x, state=None):
        state = state or self.state()
        if self.method == "lcq":
            return lcq_forward_requant(x, state, self.spec)
        return clip_uniform_quantize(x, state.alpha, self.spec)

    def backward_into(self, x, upstream, state=None):
        """Accumulate clip/companding gradients; returns d_input.

        The uniform method shares the companding gradient rules through the
        identity state, where the companding output reduces to the plain
        quantizer bit-exactly.
        """
        state = state or self.state()
        grad_state = (
            state if self.method == "lcq"
            else identity_state(self.spec.intervals, state.alpha)
        )
        d_theta, d_alpha, d_input = accumulate_tensor_grads(
            x, upstream, grad_state, self.spec, role=self.role
        )
        self.alpha.grad += self.alpha.dtype.type(d_alpha)
        if self.theta is not None:
            self.theta.grad += d_theta.astype(self.theta.dtype)
        return d_input

    def levels(self, state=None):
        state = state or self.state()
        if self.method == "lcq":
            return quant_levels(state, self.spec)
        s = self.spec.scale
        mags = np.arange(s + 1, dtype=np.float64) / s * state.alpha
        if not self.spec.signed:
            return mags
        return np.unique(np.concatenate([-mags, mags])) + 0.0

    def lattice_scale(self) -> int:
        """Denominator of the emitted lattice (outer for lcq, own for
        uniform)."""
        if self.method == "lcq":
            return self.spec.outer_scale
        return self.spec.scale

    def record(self, layer_id) -> str:
        return quantizer_record(layer_id, self.role, self.method, self.spec,
                                self.state())


class _Layer:
    def params(self):
        return []

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


def _quantize_weights(w_param, wq, lwn, frozen_stats=None):
    """(w_eff, cache) for a conv/fc weight tensor.

    ``frozen_stats`` pins the normalization statistics; the gradient-check
    harness uses it because backward treats them as constants.
    """
    if wq is None:
        return w_param.val, None
    stats = frozen_stats if frozen_stats is not None else weight_stats(w_param.val)
    state = wq.state()
    wn = standardize(w_param.val, stats)
    w_eff = lwn_quantize(
        w_param.val, state, wq.spec, method=wq.method, restore_sigma=lwn,
        stats=stats,
    ).astype(w_param.dtype)
    return w_eff, (stats, state, wn)


def _weight_backward(w_param, wq, lwn, d_weff, qcache):
    """Route the effective-weight gradient through the quantizer."""
    if wq is None:
        w_param.grad += d_weff
        return
    stats, state, wn = qcache
    sigma = w_param.dtype.type(stats.sigma)
    up = d_weff * sigma if lwn else d_weff
    d_wn = wq.backward_into(wn, up, state)
    w_param.grad += (d_wn / sigma).astype(w_param.dtype)


class Conv2d(_Layer):
    """Convolution with optionally quantized weights (no bias; batch norm
    supplies offsets).  Weight quantization standardizes the tensor first and
    restores its standard deviation afterwards unless ``lwn=False``."""

    def __init__(self, name, c_in, c_out, kernel=3, stride=1, pad=1, rng=None,
                 wq: QuantizerNode | None = None, lwn=True, dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.kernel = kernel
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.w = Param(f"{name}.w", w, group="w", decay=True, dtype=dtype)
        self.wq = wq
        self.lwn = lwn
        self.paired_act: ActQuant | None = None
        self.frozen_stats = None
        self._cache = None

    def params(self):
        ps = [self.w]
        if self.wq is not None:
            ps.extend(self.wq.params())
        return ps

    def effective_weights(self):
        return _quantize_weights(self.w, self.wq, self.lwn, self.frozen_stats)

    def forward(self, x, train=True):
        w_eff, qcache = self.effective_weights()
        f, c, kh, kw = w_eff.shape
        cols = unfold(x, kh, kw, self.stride, self.pad)
        n, _, _, _, ho, wo = cols.shape
        mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)
        y = mat @ w_eff.reshape(f, -1).T
        self._cache = (x.shape, mat, qcache, w_eff, (n, ho, wo, f, c, kh, kw))
        return y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(self, dy):
        x_shape, mat, qcache, w_eff, dims = self._cache
        n, ho, wo, f, c, kh, kw = dims
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        d_weff = (dy_mat.T @ mat).reshape(f, c, kh, kw)
        _weight_backward(self.w, self.wq, self.lwn, d_weff, qcache)
        dcols = (dy_mat @ w_eff.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        dx = fold_add(dcols, x_shape, kh, kw, self.stride, self.pad)
        self._cache = None
        return dx


class Linear(_Layer):
    def __init__(self, name, d_in, d_out, rng=None, wq: QuantizerNode | None = None,
                 lwn=True, bias=True, dtype=np.float32):
        self.name = name
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
        self.w = Param(f"{name}.w", w, group="w", decay=True, dtype=dtype)
        self.b = (
            Param(f"{name}.b", np.zeros(d_out), group="w", decay=False, dtype=dtype)
            if bias
            else None
        )
        self.wq = wq
        self.lwn = lwn
        self.paired_act: ActQuant | None = None
        self.frozen_stats = None
        self._cache = None

    def params(self):
        ps = [self.w] + ([self.b] if self.b is not None else [])
        if self.wq is not None:
            ps.extend(self.wq.params())
        return ps

    def effective_weights(self):
        return _quantize_weights(self.w, self.wq, self.lwn, self.frozen_stats)

    def forward(self, x, train=True):
        w_eff, qcache = self.effective_weights()
        y = x @ w_eff.T
        if self.b is not None:
            y = y + self.b.val
        self._cache = (x, qcache, w_eff)
        return y

    def backward(self, dy):
        x, qcache, w_eff = self._cache
        d_weff = dy.T @ x
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        _weight_backward(self.w, self.wq, self.lwn, d_weff, qcache)
        dx = dy @ w_eff
        self._cache = None
        return dx


class BatchNorm(_Layer):
    """Batch normalization over (N, C) or (N, C, H, W); population variance
    both for the batch statistics and the running ones."""

    def __init__(self, name, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels), group="w",
                           decay=False, dtype=dtype)
        self.beta = Param(f"{name}.beta", np.zeros(channels), group="w",
                          decay=False, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    @staticmethod
    def _axes(x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ContractViolation(f"batchnorm expects 2-d or 4-d input, got {x.ndim}-d")

    def forward(self, x, train=True):
        dt = x.dtype
        axes, bshape = self._axes(x)
        if train:
            mu = x.mean(axis=axes, dtype=dt)
            var = ((x - mu.reshape(bshape)) ** 2).mean(axis=axes, dtype=dt)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1 - m) * self.running_var + m * var).astype(
                self.running_var.dtype
            )
        else:
            mu = self.running_mean.astype(dt)
            var = self.running_var.astype(dt)
        inv = (1.0 / np.sqrt(var + dt.type(self.eps))).astype(dt)
        xhat = (x - mu.reshape(bshape)) * inv.reshape(bshape)
        y = self.gamma.val.reshape(bshape) * xhat + self.beta.val.reshape(bshape)
        self._cache = (xhat, inv, bshape, axes, train, x.shape)
        return y.astype(dt)

    def backward(self, dy):
        xhat, inv, bshape, axes, train, x_shape = self._cache
        dt = dy.dtype
        self.gamma.grad += (dy * xhat).sum(axis=axes).astype(self.gamma.dtype)
        self.beta.grad += dy.sum(axis=axes).astype(self.beta.dtype)
        dxhat = dy * self.gamma.val.reshape(bshape)
        if not train:
            self._cache = None
            return (dxhat * inv.reshape(bshape)).astype(dt)
        m = dt.type(np.prod([x_shape[i] for i in axes]))
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        self._cache = None
        return dx.astype(dt)


class ActQuant(_Layer):
    """Activation stage: a learnable quantizer, a plain ReLU (full-precision
    mode), or the identity."""

    def __init__(self, name, quant: QuantizerNode | None = None, relu=False):
        self.name = name
        self.quant = quant
        self.relu = relu
        self._cache = None

    def params(self):
        return self.quant.params() if self.quant is not None else []

    def forward(self, x, train=True):
        if self.quant is not None:
            state = self.quant.state()
            y = self.quant.quantize(x, state)
            self._cache = (x, state)
            return np.asarray(y, dtype=x.dtype)
        if self.relu:
            self._cache = x > 0
            return np.where(self._cache, x, x.dtype.type(0))
        self._cache = None
        return x

    def backward(self, dy):
        if self.quant is not None:
            x, state = self._cache
            dx = self.quant.backward_into(x, dy, state)
            self._cache = None
            return np.asarray(dx, dtype=dy.dtype)
        if self.relu:
            mask = self._cache
            self._cache = None
            return np.where(mask, dy, dy.dtype.type(0))
        return dy


class Flatten(_Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        shape = self._cache
        self._cache = None
        return dy.reshape(shape)


class GlobalAvgPool(_Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=True):
        self._cache = x.shape
        return x.mean(axis=(2, 3), dtype=x.dtype)

    def backward(self, dy):
        n, c, h, w = self._cache
        self._cache = None
        scale = dy.dtype.type(h * w)
        return (np.broadcast_to(dy[:, :, None, None], (n, c, h, w)) / scale).astype(
            dy.dtype
        )


class Residual(_Layer):
    """Residual block: out = shortcut(x) + body(x); an empty shortcut is the
    identity."""

    def __init__(self, body, shortcut=None):
        self.body = body
        self.shortcut = shortcut or []

    def params(self):
        ps = []
        for layer in self.body + self.shortcut:
            ps.extend(layer.params())
        return ps

    def forward(self, x, train=True):
        main = x
        for layer in self.body:
            main = layer.forward(main, train)
        side = x
        for layer in self.shortcut:
            side = layer.forward(side, train)
        return main + side

    def backward(self, dy):
        d_main = dy
        for layer in reversed(self.body):
            d_main = layer.backward(d_main)
        d_side = dy
        for layer in reversed(self.shortcut):
            d_side = layer.backward(d_side)
        return d_main + d_side


class SoftmaxXent:
    """Mean softmax cross-entropy over the batch."""

    def forward(self, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        n = logits.shape[0]
        self._cache = (np.exp(logp), labels, n)
        return float(-logp[np.arange(n), labels].mean())

    def backward(self):
        p, labels, n = self._cache
        dz = p.copy()
        dz[np.arange(n), labels] -= 1.0
        return (dz / p.dtype.type(n)).astype(p.dtype)


class Model:
    def __init__(self, layers, config=None):
        self.layers = layers
        self.config = dict(config or {})
        self.loss_fn = SoftmaxXent()

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dloss):
        for layer in reversed(self.layers):
            dloss = layer.backward(dloss)
        return dloss

    def loss(self, x, labels, train=True):
        return self.loss_fn.forward(self.forward(x, train), labels)

    def loss_and_grads(self, x, labels):
        self.zero_grads()
        loss = self.loss(x, labels, train=True)
        self.backward(self.loss_fn.backward())
        return loss

    # -- quantizer plumbing --------------------------------------------------

    def _walk(self, layers=None):
        for layer in layers if layers is not None else self.layers:
            if isinstance(layer, Residual):
                yield from self._walk(layer.body)
                yield from self._walk(layer.shortcut)
            else:
                yield layer

    def quantizer_records(self):
        recs = []
        for layer in self._walk():
            if isinstance(layer, (Conv2d, Linear)) and layer.wq is not None:
                recs.append(layer.wq.record(layer.name))
            if isinstance(layer, ActQuant) and layer.quant is not None:
                recs.append(layer.quant.record(layer.name))
        return recs

    def named_params(self):
        return {p.name: p for p in self.params()}

    def alpha_summary(self) -> str:
        parts = []
        for layer in self._walk():
            if isinstance(layer, (Conv2d, Linear)) and layer.wq is not None:
                parts.append(f"{layer.name}:w={float(layer.wq.alpha.val):.4g}")
            if isinstance(layer, ActQuant) and layer.quant is not None:
                parts.append(f"{layer.name}:a={float(layer.quant.alpha.val):.4g}")
        return ";".join(parts)

    # -- integer inference path ----------------------------------------------

    def forward_lut(self, x):
        """Forward pass with every quantized conv/fc whose input comes from a
        quantizer computed through its lookup table.  Layers fed by raw data
        (e.g. the first convolution) run the float path."""
        for layer in self.layers:
            x = self._layer_forward_lut(layer, x)
        return x

    def _layer_forward_lut(self, layer, x):
        if isinstance(layer, Residual):
            main = x
            for sub in layer.body:
                main = self._layer_forward_lut(sub, main)
            side = x
            for sub in layer.shortcut:
                side = self._layer_forward_lut(sub, side)
            return main + side
        if (
            isinstance(layer, (Conv2d, Linear))
            and layer.wq is not None
            and layer.paired_act is not None
            and layer.paired_act.quant is not None
        ):
            pack = build_layer_lut(layer)
            a_enc = pack["cb_a"].encode(x)
            if isinstance(layer, Conv2d):
                y = lutmod.lut_infer_conv2d(pack["w_enc"], a_enc, pack["lut"],
                                            stride=layer.stride, pad=layer.pad)
            else:
                y = lutmod.lut_infer_fc(pack["w_enc"], a_enc, pack["lut"])
                if layer.b is not None:
                    y = y + layer.b.val
            return y.astype(x.dtype)
        return layer.forward(x, train=False)


def build_layer_lut(layer):
    """LUT, weight encoding, and codebooks for one quantized conv/fc layer
    paired with the activation quantizer feeding it."""
    act = layer.paired_act.quant
    wq = layer.wq
    stats = weight_stats(layer.w.val)
    w_state = wq.state()
    w_levels = wq.levels(w_state)
    a_levels = act.levels()
    sigma = stats.sigma if layer.lwn else 1.0
    outer_w = wq.spec.outer_bits if wq.method == "lcq" else wq.spec.bits
    outer_a = act.spec.outer_bits if act.method == "lcq" else act.spec.bits
    lut = lutmod.build_lut(w_levels, a_levels, outer_w, outer_a, sigma_w=sigma)
    cb_w = lutmod.LevelCodebook.from_levels(w_levels, wq.lattice_scale(), signed=True)
    cb_w = dataclasses.replace(cb_w, scale=cb_w.scale * sigma)
    cb_a = lutmod.LevelCodebook.from_levels(a_levels, act.lattice_scale(),
                                            signed=False)
    w_eff, _ = layer.effective_weights()
    w_enc = cb_w.encode(w_eff)
    return {"lut": lut, "cb_w": cb_w, "cb_a": cb_a, "w_enc": w_enc, "stats": stats}


# ---------------------------------------------------------------------------
# model builders and checkpoints

def build_cnn4(config, seed=0, dtype=np.float32) -> Model:
    """Four-layer CNN: conv(8-bit W, raw input) -> two quantized conv stages
    -> global pool -> 8-bit FC.  Hidden stages are BN -> activation quantizer
    -> conv, so the batch-norm bias provides the activation lower bound."""
    cfg = {
        "arch": "cnn4",
        "in_channels": 1,
        "channels": [8, 16, 32],
        "classes": 10,
        "w_bits": 2,
        "a_bits": 2,
        "edge_bits": 8,
        "method": "lcq",  # lcq | uniform | lcq-no-lwn | fp
        "lwn": True,
        "intervals": 16,
        "outer_bits": 8,
        "alpha_w": 3.0,
        "alpha_a": 8.0,
        "pool": "flatten",  # flatten | avg
        "image_hw": 28,
    }
    cfg.update(config or {})
    rng = np.random.default_rng(seed)
    method = cfg["method"]
    fp = method == "fp"
    if method == "lcq-no-lwn":
        method = "lcq"
        use_lwn = False
    else:
        use_lwn = bool(cfg["lwn"])

    # The uniform baseline is the same companding machinery with the
    # companding parameters frozen at zero, so its step-0 forward is
    # bit-identical to the trainable configuration.  Two-bit weights and
    # 8-bit edge layers use the plain clipped quantizer in every mode.
    def wq_node(name, bits):
        if fp:
            return None
        if bits == 2 or bits >= 8:
            m, learn = "uniform", False
        else:
            m, learn = "lcq", method != "uniform"
        return QuantizerNode(name, "weight", bits, method=m,
                             intervals=cfg["intervals"],
                             outer_bits=cfg["outer_bits"],
                             alpha_init=cfg["alpha_w"], dtype=dtype,
                             learn_theta=learn)

    def act_layer(name, bits):
        if fp:
            return ActQuant(name, relu=True)
        if bits >= 8:
            m, learn = "uniform", False
        else:
            m, learn = "lcq", method != "uniform"
        node = QuantizerNode(name, "activation", bits, method=m,
                             intervals=cfg["intervals"],
                             outer_bits=cfg["outer_bits"],
                             alpha_init=cfg["alpha_a"], dtype=dtype,
                             learn_theta=learn)
        return ActQuant(name, quant=node)

    c1, c2, c3 = cfg["channels"]
    wb, ab, eb = cfg["w_bits"], cfg["a_bits"], cfg["edge_bits"]
    conv1 = Conv2d("conv1", cfg["in_channels"], c1, 3, 1, 1, rng,
                   wq=wq_node("conv1.wq", eb), lwn=use_lwn, dtype=dtype)
    bn1 = BatchNorm("bn1", c1, dtype=dtype)
    act2 = act_layer("act2", ab)
    conv2 = Conv2d("conv2", c1, c2, 3, 2, 1, rng, wq=wq_node("conv2.wq", wb),
                   lwn=use_lwn, dtype=dtype)
    bn2 = BatchNorm("bn2", c2, dtype=dtype)
    act3 = act_layer("act3", ab)
    conv3 = Conv2d("conv3", c2, c3, 3, 2, 1, rng, wq=wq_node("conv3.wq", wb),
                   lwn=use_lwn, dtype=dtype)
    bn3 = BatchNorm("bn3", c3, dtype=dtype)
    act4 = act_layer("act4", eb)
    if cfg["pool"] == "avg":
        pool = GlobalAvgPool()
        fc_in = c3
    else:
        pool = Flatten()
        hw = cfg["image_hw"]
        for layer_stride in (1, 2, 2):
            hw = (hw + 2 * 1 - 3) // layer_stride + 1
        fc_in = c3 * hw * hw
    fc = Linear("fc", fc_in, cfg["classes"], rng, wq=wq_node("fc.wq", eb),
                lwn=use_lwn, dtype=dtype)
    conv2.paired_act = act2
    conv3.paired_act = act3
    fc.paired_act = act4
    layers = [conv1, bn1, act2, conv2, bn2, act3, conv3, bn3, act4, pool, fc]
    return Model(layers, cfg)


_BUILDERS = {"cnn4": build_cnn4}


def save_checkpoint(path, model: Model, optimizer_state=None, epoch=0):
    arrays = {}
    for name, p in model.named_params().items():
        arrays["param/" + name] = p.val
    for layer in model._walk():
        if isinstance(layer, BatchNorm):
            arrays[f"buffer/{layer.name}.running_mean"] = layer.running_mean
            arrays[f"buffer/{layer.name}.running_var"] = layer.running_var
    if optimizer_state:
        for name, v in optimizer_state.items():
            arrays["opt/" + name] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "config": model.config,
        "records": model.quantizer_records(),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path, model: Model | None = None):
    """Rebuild (or refresh) a model from a checkpoint.  Returns
    (model, optimizer_state, epoch)."""
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ContractViolation(
                f"unsupported checkpoint version {meta['version']}"
            )
        if model is None:
            arch = meta["config"].get("arch", "cnn4")
            model = _BUILDERS[arch](meta["config"])
        named = model.named_params()
        opt_state = {}
        for key in zf.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                if name not in named:
                    raise ContractViolation(f"checkpoint param {name} not in model")
                named[name].val = zf[key].astype(named[name].dtype)
                named[name].grad = np.zeros_like(named[name].val)
            elif key.startswith("buffer/"):
                name = key[len("buffer/"):]
                lname, attr = name.rsplit(".", 1)
                for layer in model._walk():
                    if getattr(layer, "name", None) == lname:
                        setattr(layer, attr, zf[key])
            elif key.startswith("opt/"):
                opt_state[key[len("opt/"):]] = zf[key]
    return model, opt_state, meta["epoch"]
