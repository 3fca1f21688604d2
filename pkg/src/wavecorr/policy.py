"""WaveCorr portfolio policy network.

Layout (default channel plan 8/16/16, dilations 1/2/4)::

    input (m, h, d)
      -> 3 x residual block:
             conv(1x3, dil r) -> relu -> dropout -> conv(1x3, dil r) -> relu -> dropout
             -> corr -> relu ;  concat(conv path, corr) + 1x1 conv(input)
      -> causal conv (1 x (h-28)) -> relu            (m, 1, 16)
      -> concat previous weights as channel 17       (m, 1, 17)
      -> 1x1 conv -> softmax over assets             (m,)

The dilated stack sees 29 steps; the final causal kernel covers the remaining
``h - 28`` so the receptive field is exactly ``h``. Left zero padding therefore
never reaches the output, which is what lets the multi-period pass reuse one
trunk evaluation for all ``T`` actions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blocks
from .blocks import AssetPermutation, conv, dropout, permute_corr_weight
from .env import drift_tensor
from .tensor import DimensionError, ParamStore, Tensor3, concat_channels, relu, seed_rng, tensor_add, time_slice

CHECKPOINT_FORMAT = "wavecorr-checkpoint"
CHECKPOINT_VERSION = 1
KERNEL_TIME = 3


@dataclass(frozen=True)
class PolicySpec:
    m: int
    h: int = 32
    d: int = 1
    channels: tuple = (8, 16, 16)
    dilations: tuple = (1, 2, 4)
    head_channels: int = 16
    dropout: float = 0.5
    corr: str = "wavecorr"  # or "zhang"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dilations", tuple(int(r) for r in self.dilations))
        if len(self.channels) != len(self.dilations):
            raise ValueError("one channel width per dilation")
        if self.corr not in ("wavecorr", "zhang"):
            raise ValueError(f"unknown corr layer kind {self.corr!r}")
        if self.corr == "zhang" and self.m % 2 == 0:
            raise ValueError("the Zhang variant needs an odd asset count")
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be positive")
        if self.final_kernel < 1:
            raise ValueError(f"h={self.h} is shorter than the dilated receptive field {self.trunk_field}")

    @property
    def trunk_field(self) -> int:
        return 1 + 2 * (KERNEL_TIME - 1) * sum(self.dilations)

    @property
    def final_kernel(self) -> int:
        return self.h - self.trunk_field + 1

    @property
    def receptive_field(self) -> int:
        return self.trunk_field + self.final_kernel - 1

    def block_io(self) -> list[tuple[int, int]]:
        """(input, output) channel counts of every residual block."""
        out, c_in = [], self.d
        for c in self.channels:
            out.append((c_in, c + 1))
            c_in = c + 1
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dilations"] = list(self.dilations)
        return d


@dataclass
class PolicyParams:
    spec: PolicySpec
    store: ParamStore
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.spec, self.store.copy(), self.seed, dict(self.meta))


def parameter_count(spec: PolicySpec) -> int:
    """Closed-form number of scalar parameters."""
    total = 0
    for (c_in, c_out), c in zip(spec.block_io(), spec.channels):
        total += c * c_in * KERNEL_TIME + c
        total += c * c * KERNEL_TIME + c
        rows = spec.m + 1 if spec.corr == "wavecorr" else spec.m
        total += rows * c + 1
        total += c_out * c_in + c_out
    trunk_out = spec.block_io()[-1][1]
    total += spec.head_channels * trunk_out * spec.final_kernel + spec.head_channels
    total += spec.head_channels + 1 + 1
    return total


def init_params(spec: PolicySpec, seed: int) -> PolicyParams:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    rng = seed_rng(seed)
    store = ParamStore()
    for k, ((c_in, c_out), c, r) in enumerate(zip(spec.block_io(), spec.channels, spec.dilations)):
        p = f"block{k}."
        for name, cin in (("conv1", c_in), ("conv2", c)):
            cs = blocks.ConvSpec.init(rng, cin, c, KERNEL_TIME, r)
            store.add(p + name + ".weight", cs.weight)
            store.add(p + name + ".bias", cs.bias.reshape(1, 1, -1))
        if spec.corr == "wavecorr":
            cw = blocks.CorrSpec.init(rng, spec.m, c).weight[:, None, :]
        else:
            cw = blocks.ZhangCorrSpec.init(rng, spec.m, c, 1).weight
        store.add(p + "corr.weight", cw)
        store.add(p + "corr.bias", np.zeros((1, 1, 1)))
        rs = blocks.ConvSpec.init(rng, c_in, c_out, 1)
        store.add(p + "res.weight", rs.weight)
        store.add(p + "res.bias", rs.bias.reshape(1, 1, -1))
    trunk_out = spec.block_io()[-1][1]
    cs = blocks.ConvSpec.init(rng, trunk_out, spec.head_channels, spec.final_kernel)
    store.add("causal.weight", cs.weight)
    store.add("causal.bias", cs.bias.reshape(1, 1, -1))
    hs = blocks.ConvSpec.init(rng, spec.head_channels + 1, 1, 1)
    store.add("head.weight", hs.weight)
    store.add("head.bias", hs.bias.reshape(1, 1, -1))
    return PolicyParams(spec, store, seed)


# ---------------------------------------------------------------------------
# forward passes


def _check_input(spec: PolicySpec, x: Tensor3, length: int):
    if x.shape != (spec.m, length, spec.d):
        raise DimensionError(f"expected input {(spec.m, length, spec.d)}, got {x.shape}")


def _dropout_masks(spec: PolicySpec, length: int, rng, noise_rows=None) -> list:
    # noise_rows[p] picks the mask row drawn for the asset at position p
    masks = []
    keep = 1.0 - spec.dropout
    for c in spec.channels:
        for _ in range(2):
            mk = (rng.random((spec.m, length, c)) >= spec.dropout) / keep
            masks.append(mk if noise_rows is None else mk[noise_rows])
    return masks


def trunk(spec: PolicySpec, P: dict, x: Tensor3, train: bool = False, rng=None, start: int | None = None,
          noise_rows=None) -> Tensor3:
    """Residual blocks plus the final causal conv.

    Returns relu(causal conv) at time steps ``start .. L-1`` (default: the
    last step only). ``noise_rows`` reassigns dropout-mask rows to asset
    positions so the noise can follow asset identity rather than order.
    """
    L = x.shape[1]
    masks = _dropout_masks(spec, L, rng, noise_rows) if (train and spec.dropout > 0) else None
    y = x
    for k, r in enumerate(spec.dilations):
        p = f"block{k}."
        inp = y
        z = relu(conv(inp, P[p + "conv1.weight"], P[p + "conv1.bias"], r))
        if masks:
            z = dropout(z, spec.dropout, train=True, mask=masks[2 * k])
        z = relu(conv(z, P[p + "conv2.weight"], P[p + "conv2.bias"], r))
        if masks:
            z = dropout(z, spec.dropout, train=True, mask=masks[2 * k + 1])
        if spec.corr == "wavecorr":
            c = blocks.corr(z, P[p + "corr.weight"], P[p + "corr.bias"])
        else:
            c = blocks.zhang_corr(z, P[p + "corr.weight"], P[p + "corr.bias"])
        main = concat_channels([z, relu(c)])
        y = tensor_add(main, conv(inp, P[p + "res.weight"], P[p + "res.bias"], 1))
    if start is None:
        start = L - 1
    return relu(conv(y, P["causal.weight"], P["causal.bias"], 1, start))


def head(P: dict, features: Tensor3, prev_weights: Tensor3) -> Tensor3:
    """(m, 1, c) features + previous weights channel -> allocation (m, 1, 1)."""
    z = concat_channels([features, prev_weights])
    return blocks.softmax_over_assets(conv(z, P["head.weight"], P["head.bias"], 1))


def _weights_tensor(w, m: int) -> Tensor3:
    if isinstance(w, Tensor3):
        if w.shape != (m, 1, 1):
            raise DimensionError(f"weights tensor must be ({m}, 1, 1), got {w.shape}")
        return w
    arr = np.asarray(w, dtype=np.float64).reshape(-1)
    if arr.shape != (m,):
        raise DimensionError(f"expected {m} weights, got {arr.shape}")
    if np.any(arr < -1e-9) or abs(arr.sum() - 1.0) > 1e-9:
        raise ValueError("previous weights are not on the simplex")
    return Tensor3(arr.reshape(m, 1, 1))


def forward_policy(params: PolicyParams, state, prev_weights, train: bool = False, rng=None) -> np.ndarray:
    """Allocation for one (m, h, d) state; returns an m-vector on the simplex."""
    return forward_policy_tensor(params.spec, params.store.constants(), state, prev_weights, train, rng).data.reshape(-1)


def forward_policy_tensor(spec: PolicySpec, P: dict, state, prev_weights, train=False, rng=None) -> Tensor3:
    x = state if isinstance(state, Tensor3) else Tensor3(state)
    _check_input(spec, x, spec.h)
    feats = trunk(spec, P, x, train, rng)
    out = head(P, feats, _weights_tensor(prev_weights, spec.m))
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite policy output")
    return out


def rollout(spec: PolicySpec, P: dict, traj, w_prev0, relatives, train=False, rng=None, noise_rows=None):
    """Multi-period pass over a trajectory of ``h + T - 1`` columns.

    ``relatives`` holds the raw gross relatives aligned with ``traj`` columns,
    shape (m, h + T - 1); the drift into step ``t`` uses column ``h - 1 + t``.
    Returns ``(actions, prev_weights)``: lists of T tensors of shape (m, 1, 1).
    """
    x = traj if isinstance(traj, Tensor3) else Tensor3(traj)
    L = x.shape[1]
    T = L - spec.h + 1
    if T < 1:
        raise DimensionError(f"trajectory of {L} columns is shorter than h={spec.h}")
    _check_input(spec, x, L)
    rel = np.asarray(relatives, dtype=np.float64)
    if rel.shape != (spec.m, L):
        raise DimensionError(f"relatives must be {(spec.m, L)}, got {rel.shape}")
    feats = trunk(spec, P, x, train, rng, start=spec.h - 1, noise_rows=noise_rows)
    w_prev = _weights_tensor(w_prev0, spec.m)
    actions, prevs = [], []
    for t in range(T):
        if t > 0:
            w_prev = drift_tensor(actions[-1], rel[:, spec.h - 1 + t])
        prevs.append(w_prev)
        actions.append(head(P, time_slice(feats, t, t + 1), w_prev))
    return actions, prevs


def forward_augmented(params: PolicyParams, traj, initial_prev_weights, relatives, train=False, rng=None) -> np.ndarray:
    """All T actions of a trajectory in one pass; returns a (T, m) array."""
    actions, _ = rollout(params.spec, params.store.constants(), traj, initial_prev_weights, relatives, train, rng)
    return np.stack([a.data.reshape(-1) for a in actions])


def forward_sequential(params: PolicyParams, traj, initial_prev_weights, relatives) -> np.ndarray:
    """Reference for :func:`forward_augmented`: one full policy call per step."""
    spec = params.spec
    x = traj.data if isinstance(traj, Tensor3) else np.asarray(traj, dtype=np.float64)
    rel = np.asarray(relatives, dtype=np.float64)
    T = x.shape[1] - spec.h + 1
    w_prev = np.asarray(initial_prev_weights, dtype=np.float64).reshape(-1)
    out = []
    for t in range(T):
        if t > 0:
            v = rel[:, spec.h - 1 + t] * out[-1]
            w_prev = v / v.sum()
        out.append(forward_policy(params, x[:, t:t + spec.h, :], w_prev))
    return np.stack(out)


# ---------------------------------------------------------------------------
# permutation witness


def network_witness(params: PolicyParams, sigma: AssetPermutation) -> PolicyParams:
    """Parameters whose network, run on sigma-permuted inputs and un-permuted,
    reproduces ``params`` exactly. Only the Corr rows move."""
    spec = params.spec
    if spec.corr != "wavecorr":
        raise ValueError("no permutation witness exists for the Zhang correlational layer")
    if sigma.m != spec.m:
        raise DimensionError(f"permutation over {sigma.m} assets, network has {spec.m}")
    out = params.copy()
    for k in range(len(spec.channels)):
        name = f"block{k}.corr.weight"
        w = params.store[name][:, 0, :]
        out.store[name] = permute_corr_weight(w, sigma)[:, None, :]
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: PolicyParams, path) -> None:
    """JSON manifest; floats are written with repr precision so a reload is
    bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "seed": params.seed,
        "meta": params.meta,
        "slots": [
            {"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in params.store.items()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = PolicySpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["spec"].items()})
    store = ParamStore()
    for slot in doc["slots"]:
        store.add(slot["name"], np.array(slot["data"], dtype=np.float64).reshape(slot["shape"]))
    expected = init_params(spec, 0).store
    if store.names() != expected.names():
        raise ValueError(f"{path}: slot layout does not match the spec")
    return PolicyParams(spec, store, doc.get("seed"), doc.get("meta", {}))
