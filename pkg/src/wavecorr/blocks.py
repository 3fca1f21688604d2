"""Network building blocks: causal convolutions, the Corr layer, the
correlational layer of the CS-PPN architecture (kept as a counterexample),
activations and asset permutations.

Tensor-level functions (``conv``, ``corr``, ``zhang_corr``, ...) take weights
as :class:`Tensor3` so they can sit on a gradient tape. The ``*Spec``
dataclasses bundle concrete numpy weights for direct evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import DimensionError, Tensor3, apply, const

# ---------------------------------------------------------------------------
# initialisation


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolutions


@dataclass
class ConvSpec:
    """Per-asset (1 x kernel_time) causal convolution.

    ``weight`` is (out_channels, in_channels, kernel_time); the last tap reads
    the current time step, tap ``k`` reads ``(kernel_time - 1 - k) * dilation``
    steps into the past.
    """

    weight: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 3:
            raise DimensionError("conv weight must be (out, in, kernel_time)")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError("conv bias must have one entry per output channel")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_time(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, rng, in_channels, out_channels, kernel_time, dilation=1) -> "ConvSpec":
        fan_in = in_channels * kernel_time
        w = kaiming_uniform(rng, (out_channels, in_channels, kernel_time), fan_in)
        return cls(w, np.zeros(out_channels), dilation)

    @classmethod
    def identity(cls, channels: int) -> "ConvSpec":
        return cls(np.eye(channels)[:, :, None], np.zeros(channels), 1)


def conv(x: Tensor3, weight: Tensor3, bias: Tensor3, dilation: int = 1, start: int = 0) -> Tensor3:
    """Causal convolution along time with left zero padding.

    Outputs time steps ``start .. L-1`` of the padded convolution, so
    ``start=0`` keeps the input length and ``start=L-1`` returns the last step.
    """
    W = weight.data
    if W.shape[1] != x.shape[2]:
        raise DimensionError(f"conv expects {W.shape[1]} input channels, got {x.shape[2]}")
    if bias.shape != (1, 1, W.shape[0]):
        raise DimensionError(f"conv bias shape {bias.shape} != (1, 1, {W.shape[0]})")
    if not 0 <= start < x.shape[1]:
        raise DimensionError(f"conv start {start} outside input length {x.shape[1]}")
    xd = x.data
    out = kernels.conv_forward(xd, W, bias.data.reshape(-1), dilation, start)

    def vjp(g):
        gx, gW, gb = kernels.conv_backward(g, xd, W, dilation, start)
        return gx, gW, gb.reshape(1, 1, -1)

    return apply("conv", out, (x, weight, bias), vjp)


def _conv_spec_apply(spec: ConvSpec, x: Tensor3, start: int) -> Tensor3:
    return conv(x, const(spec.weight), const(spec.bias.reshape(1, 1, -1)), spec.dilation, start)


def dilated_causal_conv(spec: ConvSpec, x: Tensor3) -> Tensor3:
    """Length-preserving dilated causal convolution."""
    return _conv_spec_apply(spec, x, 0)


def causal_conv_fullspan(spec: ConvSpec, x: Tensor3) -> Tensor3:
    """Unpadded causal convolution whose kernel spans the tail of the input,
    leaving a single output time step."""
    h = x.shape[1]
    span = (spec.kernel_time - 1) * spec.dilation + 1
    if span > h:
        raise DimensionError(f"kernel spans {span} steps but input has {h}")
    return _conv_spec_apply(spec, x, h - 1)


# ---------------------------------------------------------------------------
# Corr layer


@dataclass
class CorrSpec:
    """Weights of the (m+1) x 1 Corr kernel.

    ``weight[0]`` multiplies the asset's own row, ``weight[j]`` (j >= 1) the
    row of the asset stored at position ``j - 1``.
    """

    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] < 2:
            raise DimensionError("Corr weight must be (m + 1, d) with m >= 1")
        self.bias = float(self.bias)

    @property
    def m(self) -> int:
        return self.weight.shape[0] - 1

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng, m: int, d: int) -> "CorrSpec":
        return cls(kaiming_uniform(rng, (m + 1, d), (m + 1) * d), 0.0)


def _check_corr(x_shape, m, d):
    if x_shape[0] != m or x_shape[2] != d:
        raise DimensionError(f"Corr sized for (m={m}, d={d}) got input {x_shape}")


def corr(x: Tensor3, weight: Tensor3, bias: Tensor3) -> Tensor3:
    """Tape-aware Corr layer; ``weight`` is (m + 1, 1, d), ``bias`` (1, 1, 1)."""
    w = weight.data[:, 0, :]
    _check_corr(x.shape, w.shape[0] - 1, w.shape[1])
    xd = x.data
    out = kernels.corr_forward(xd, w, bias.data[0, 0, 0])[:, :, None]

    def vjp(g):
        gx, gw, gb = kernels.corr_backward(g[:, :, 0], xd, w)
        return gx, gw[:, None, :], np.full((1, 1, 1), gb)

    return apply("corr", out, (x, weight, bias), vjp)


def _cc(stacked: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    # (m+1) x 1 convolution of one stacked tensor -> (h,)
    acc = (stacked[0] * w[0]).sum(axis=1)
    for r in range(1, stacked.shape[0]):
        acc = acc + (stacked[r] * w[r]).sum(axis=1)
    return acc + b


def corr_layer_loop(spec: CorrSpec, x) -> np.ndarray:
    """Corr layer by the stacking procedure: for each asset, put its row on top
    of the whole tensor and apply one shared (m+1) x 1 convolution."""
    xd = x.data if isinstance(x, Tensor3) else np.asarray(x, dtype=np.float64)
    _check_corr(xd.shape, spec.m, spec.d)
    out = np.empty((0, xd.shape[1], 1))
    for i in range(xd.shape[0]):
        stacked = np.concatenate([xd[i:i + 1], xd], axis=0)
        out = np.concatenate([out, _cc(stacked, spec.weight, spec.bias)[None, :, None]], axis=0)
    return out


def corr_layer_closed(spec: CorrSpec, x) -> np.ndarray:
    """Corr layer by its closed form (own-row term plus a shared cross sum)."""
    xd = x.data if isinstance(x, Tensor3) else np.asarray(x, dtype=np.float64)
    _check_corr(xd.shape, spec.m, spec.d)
    w = spec.weight
    acc = (xd * w[0]).sum(axis=2)
    for j in range(xd.shape[0]):
        acc = acc + (xd[j] * w[j + 1]).sum(axis=1)[None, :]
    return (acc + spec.bias)[:, :, None]


def corr_layer(spec: CorrSpec, x: Tensor3, method: str = "kernel") -> Tensor3:
    if method == "loop":
        return Tensor3(corr_layer_loop(spec, x))
    if method == "closed":
        return Tensor3(corr_layer_closed(spec, x))
    return corr(x, const(spec.weight[:, None, :]), const(np.full((1, 1, 1), spec.bias)))


# ---------------------------------------------------------------------------
# correlational layer of CS-PPN (not permutation invariant)


@dataclass
class ZhangCorrSpec:
    """Centred m x 1 convolution across assets with zero padding.

    ``weight`` is (m, d_out, d_in); ``weight[l]`` multiplies the row at offset
    ``l - (m - 1) // 2`` from the output row. Requires odd ``m``.
    """

    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 3:
            raise DimensionError("Zhang weight must be (m, d_out, d_in)")
        if self.weight.shape[0] % 2 == 0:
            raise ValueError("Zhang correlational layer needs an odd asset count")
        self.bias = float(self.bias)

    @property
    def m(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, m: int, d_in: int, d_out: int = 1) -> "ZhangCorrSpec":
        return cls(kaiming_uniform(rng, (m, d_out, d_in), m * d_in), 0.0)


def zhang_corr(x: Tensor3, weight: Tensor3, bias: Tensor3) -> Tensor3:
    """Tape-aware Zhang layer; ``weight`` (m, d_out, d_in), ``bias`` (1, 1, 1)."""
    W = weight.data
    m, h, d_in = x.shape
    if W.shape[0] != m or W.shape[2] != d_in:
        raise DimensionError(f"Zhang kernel {W.shape} does not fit input {x.shape}")
    if m % 2 == 0:
        raise ValueError("Zhang correlational layer needs an odd asset count")
    half = (m - 1) // 2
    xp = np.zeros((m + 2 * half, h, d_in))
    xp[half:half + m] = x.data
    out = np.full((m, h, W.shape[1]), bias.data[0, 0, 0])
    for l in range(m):
        out += xp[l:l + m] @ W[l].T

    def vjp(g):
        gxp = np.zeros_like(xp)
        gW = np.empty_like(W)
        for l in range(m):
            gxp[l:l + m] += g @ W[l]
            gW[l] = np.einsum("ijk,ijc->kc", g, xp[l:l + m])
        return gxp[half:half + m], gW, np.full((1, 1, 1), g.sum())

    return apply("zhang_corr", out, (x, weight, bias), vjp)


def zhang_corr_layer(spec: ZhangCorrSpec, x: Tensor3) -> Tensor3:
    return zhang_corr(x, const(spec.weight), const(np.full((1, 1, 1), spec.bias)))


def zhang_corr_oracle(spec: ZhangCorrSpec, x) -> np.ndarray:
    """Index-by-index evaluation with 1-based offsets, kept as a reference loop."""
    xd = x.data if isinstance(x, Tensor3) else np.asarray(x, dtype=np.float64)
    m, h, d_in = xd.shape
    W = spec.weight
    out = np.zeros((m, h, W.shape[1]))
    for i in range(1, m + 1):
        for j in range(h):
            for k in range(W.shape[1]):
                acc = 0.0
                for l in range(1, m + 1):
                    row = i - (m + 1) // 2 + l
                    if not 1 <= row <= m:
                        continue
                    for kp in range(d_in):
                        acc += xd[row - 1, j, kp] * W[l - 1, k, kp]
                out[i - 1, j, k] = acc + spec.bias
    return out


# ---------------------------------------------------------------------------
# activations and reshaping


def dropout(x: Tensor3, rate: float, rng: np.random.Generator | None = None,
            train: bool = False, mask: np.ndarray | None = None) -> Tensor3:
    """Inverted dropout. Identity in eval mode."""
    if not train or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or a mask")
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return apply("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def softmax_over_assets(x: Tensor3) -> Tensor3:
    if x.shape[2] != 1:
        raise DimensionError(f"softmax over assets needs a single channel, got {x.shape[2]}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    # summing in sorted order makes the result independent of asset order, bit for bit
    y = e / _ordered_sum(e)
    return apply("softmax", y, (x,), lambda g: (y * (g - _ordered_sum(g * y)),))


def _ordered_sum(a: np.ndarray) -> np.ndarray:
    return np.sort(a, axis=0).sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# asset permutations


@dataclass(frozen=True)
class AssetPermutation:
    """Relabelling of assets: ``permute(x)[i] = x[pi[i]]`` (0-based)."""

    pi: np.ndarray
    inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.int64)
        if pi.ndim != 1 or sorted(pi.tolist()) != list(range(len(pi))):
            raise ValueError(f"not a permutation: {self.pi!r}")
        inv = np.empty_like(pi)
        inv[pi] = np.arange(len(pi))
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "inverse", inv)

    @property
    def m(self) -> int:
        return len(self.pi)

    @classmethod
    def identity(cls, m: int) -> "AssetPermutation":
        return cls(np.arange(m))

    @classmethod
    def swap(cls, m: int, a: int, b: int) -> "AssetPermutation":
        pi = np.arange(m)
        pi[a], pi[b] = b, a
        return cls(pi)

    @classmethod
    def random(cls, m: int, rng: np.random.Generator) -> "AssetPermutation":
        return cls(rng.permutation(m))

    def after(self, inner: "AssetPermutation") -> "AssetPermutation":
        """Operator ``self o inner`` (apply ``inner`` first)."""
        return AssetPermutation(inner.pi[self.pi])

    def __eq__(self, other):
        return isinstance(other, AssetPermutation) and np.array_equal(self.pi, other.pi)

    def __hash__(self):
        return hash(tuple(self.pi.tolist()))


def _check_perm(sigma: AssetPermutation, m: int):
    if sigma.m != m:
        raise DimensionError(f"permutation over {sigma.m} assets applied to {m}")


def permute_assets(sigma: AssetPermutation, x: Tensor3) -> Tensor3:
    _check_perm(sigma, x.shape[0])
    pi, inv = sigma.pi, sigma.inverse
    return apply("permute", x.data[pi], (x,), lambda g: (g[inv],))


def unpermute_assets(sigma: AssetPermutation, x: Tensor3) -> Tensor3:
    _check_perm(sigma, x.shape[0])
    pi, inv = sigma.pi, sigma.inverse
    return apply("unpermute", x.data[inv], (x,), lambda g: (g[pi],))


def corr_weight_witness(spec: CorrSpec, sigma: AssetPermutation) -> CorrSpec:
    """Parameters that make the Corr layer on permuted input reproduce the
    original layer once the output is un-permuted."""
    _check_perm(sigma, spec.m)
    return CorrSpec(permute_corr_weight(spec.weight, sigma), spec.bias)


def permute_corr_weight(weight: np.ndarray, sigma: AssetPermutation) -> np.ndarray:
    """Reorder the asset rows (1..m) of a Corr weight array; row 0 stays."""
    w = np.array(weight, copy=True)
    w[1:] = weight[1:][sigma.pi]
    return w
