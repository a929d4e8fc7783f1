"""Network specs, flat parameter vectors, and forward evaluation.

Two architectures cover every learned component: plain MLPs (environment
encoder, dynamics heads, neural policies) and a 1-D CNN with an MLP head
(the history-to-latent module). Parameters are stored as a single flat
float64 vector so optimizers, checkpoints and finite-difference oracles
all see one canonical layout: per layer, weight matrix (fan_in x fan_out,
row-major) followed by bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected net; empty ``hidden_dims`` gives a plain affine map."""

    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("dims must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def param_count(self) -> int:
        dims = self.layer_dims
        return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))


@dataclass(frozen=True)
class Conv1dSpec:
    """1-D CNN over a (channels_in, window) input, flattened into an MLP head.

    ``conv_layers`` is a tuple of (filters, kernel, stride). The receptive
    field may not exceed the window.
    """

    channels_in: int
    window: int
    conv_layers: tuple = ((32, 5, 1), (32, 5, 1))
    head_dims: tuple = (64,)
    output_dim: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(
            self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers)
        )
        object.__setattr__(self, "head_dims", tuple(int(h) for h in self.head_dims))
        if self.flatten_dim() < 1:
            raise ValueError("convolution receptive field exceeds the window")

    def conv_output_lengths(self):
        t = self.window
        lengths = []
        for _, kernel, stride in self.conv_layers:
            t = (t - kernel) // stride + 1
            lengths.append(t)
        return tuple(lengths)

    def flatten_dim(self) -> int:
        t = self.window
        c = self.channels_in
        for filters, kernel, stride in self.conv_layers:
            t = (t - kernel) // stride + 1
            c = filters
        return c * t if t >= 1 else 0

    def param_count(self) -> int:
        total = 0
        c = self.channels_in
        for filters, kernel, _ in self.conv_layers:
            total += filters * c * kernel + filters
            c = filters
        dims = (self.flatten_dim(), *self.head_dims, self.output_dim)
        total += sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))
        return total


@dataclass
class NetworkParams:
    """A spec plus its flat parameter vector."""

    spec: object
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = self.spec.param_count()
        if self.theta.shape != (expected,):
            raise ValueError(
                f"theta has {self.theta.shape} entries, spec implies ({expected},)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite parameters")

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, self.theta.copy())


def init_params(spec, rng: np.random.Generator, weight_scale: float = 1.0) -> NetworkParams:
    """Fan-in scaled Gaussian weights, zero biases."""
    chunks = []
    if isinstance(spec, MlpSpec):
        dims = spec.layer_dims
        for i in range(len(dims) - 1):
            std = weight_scale / np.sqrt(dims[i])
            chunks.append(rng.normal(0.0, std, size=dims[i] * dims[i + 1]))
            chunks.append(np.zeros(dims[i + 1]))
    elif isinstance(spec, Conv1dSpec):
        c = spec.channels_in
        for filters, kernel, _ in spec.conv_layers:
            std = weight_scale / np.sqrt(c * kernel)
            chunks.append(rng.normal(0.0, std, size=filters * c * kernel))
            chunks.append(np.zeros(filters))
            c = filters
        dims = (spec.flatten_dim(), *spec.head_dims, spec.output_dim)
        for i in range(len(dims) - 1):
            std = weight_scale / np.sqrt(dims[i])
            chunks.append(rng.normal(0.0, std, size=dims[i] * dims[i + 1]))
            chunks.append(np.zeros(dims[i + 1]))
    else:
        raise TypeError(f"unknown spec type {type(spec).__name__}")
    return NetworkParams(spec, np.concatenate(chunks))


def _mlp_layout(spec: MlpSpec):
    dims = spec.layer_dims
    offset = 0
    layout = []
    for i in range(len(dims) - 1):
        w_size = dims[i] * dims[i + 1]
        layout.append((offset, offset + w_size, (dims[i], dims[i + 1])))
        offset += w_size + dims[i + 1]
    return layout


def mlp_matrices(params: NetworkParams):
    """Split a flat MLP parameter vector into [(W, b), ...] views."""
    spec = params.spec
    dims = spec.layer_dims
    out = []
    offset = 0
    for i in range(len(dims) - 1):
        w_size = dims[i] * dims[i + 1]
        w = params.theta[offset : offset + w_size].reshape(dims[i], dims[i + 1])
        b = params.theta[offset + w_size : offset + w_size + dims[i + 1]]
        out.append((w, b))
        offset += w_size + dims[i + 1]
    return out


def conv_matrices(params: NetworkParams):
    """Split a flat CNN parameter vector into conv [(W, b), ...] and head [(W, b), ...]."""
    spec = params.spec
    convs = []
    offset = 0
    c = spec.channels_in
    for filters, kernel, _ in spec.conv_layers:
        w_size = filters * c * kernel
        w = params.theta[offset : offset + w_size].reshape(filters, c, kernel)
        b = params.theta[offset + w_size : offset + w_size + filters]
        convs.append((w, b))
        offset += w_size + filters
        c = filters
    head = []
    dims = (spec.flatten_dim(), *spec.head_dims, spec.output_dim)
    for i in range(len(dims) - 1):
        w_size = dims[i] * dims[i + 1]
        w = params.theta[offset : offset + w_size].reshape(dims[i], dims[i + 1])
        b = params.theta[offset + w_size : offset + w_size + dims[i + 1]]
        head.append((w, b))
        offset += w_size + dims[i + 1]
    return convs, head


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


def forward_mlp(params: NetworkParams, x) -> np.ndarray:
    """Evaluate the MLP; accepts a single input vector or a (batch, in) matrix."""
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != spec.input_dim {spec.input_dim}")
    layers = mlp_matrices(params)
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = _activate(spec.activation, h)
    return h[0] if single else h


def forward_conv1d(params: NetworkParams, window) -> np.ndarray:
    """Evaluate the CNN; accepts (channels, T) or (batch, channels, T)."""
    spec = params.spec
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None, :, :]
    if x.shape[1] != spec.channels_in or x.shape[2] != spec.window:
        raise ValueError(
            f"window shape {x.shape[1:]} != (channels_in, window) "
            f"({spec.channels_in}, {spec.window})"
        )
    convs, head = conv_matrices(params)
    h = x
    for (w, b), (_, _, stride) in zip(convs, spec.conv_layers):
        out, _ = ad.conv1d_forward(h, w, stride)
        h = _activate(spec.activation, out + b[None, :, None])
    h = h.reshape(h.shape[0], -1)
    for i, (w, b) in enumerate(head):
        h = h @ w + b
        if i < len(head) - 1:
            h = _activate(spec.activation, h)
    return h[0] if single else h


# ---------------------------------------------------------------------------
# Tape-side evaluation. Leaves mirror the flat layout so gradients can be
# flattened back into optimizer-ready vectors.
# ---------------------------------------------------------------------------


def make_leaves(params: NetworkParams):
    """Create tape leaves (one per weight matrix / bias) for a parameter vector."""
    if isinstance(params.spec, MlpSpec):
        return [
            ad.leaf(m) for pair in mlp_matrices(params) for m in pair
        ]
    convs, head = conv_matrices(params)
    return [ad.leaf(m) for pair in convs + head for m in pair]


def collect_gradient(params: NetworkParams, leaves) -> np.ndarray:
    """Flatten per-leaf gradients back into the canonical flat layout."""
    grad = np.zeros_like(params.theta)
    offset = 0
    for v in leaves:
        size = v.value.size
        if v.grad is not None:
            grad[offset : offset + size] = np.asarray(v.grad).ravel()
        offset += size
    if offset != params.theta.size:
        raise AssertionError("leaf layout does not cover the parameter vector")
    return grad


def _act_var(name: str, x: "ad.Var") -> "ad.Var":
    return ad.tanh(x) if name == "tanh" else ad.relu(x)


def mlp_apply(spec: MlpSpec, leaves, x) -> "ad.Var":
    """Tape-side MLP forward; ``x`` is a Var or array of shape (batch, in)."""
    h = ad.lift(x)
    n_layers = len(spec.layer_dims) - 1
    for i in range(n_layers):
        w, b = leaves[2 * i], leaves[2 * i + 1]
        h = ad.add(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = _act_var(spec.activation, h)
    return h


def conv1d_apply(spec: Conv1dSpec, leaves, x) -> "ad.Var":
    """Tape-side CNN forward; ``x`` is a Var or array of shape (batch, channels, T)."""
    h = ad.lift(x)
    idx = 0
    for _, _, stride in spec.conv_layers:
        w, b = leaves[idx], leaves[idx + 1]
        idx += 2
        pre = ad.conv1d(h, w, stride=stride)
        bias = ad.reshape(b, (1, b.value.size, 1))
        h = _act_var(spec.activation, ad.add(pre, bias))
    h = ad.reshape(h, (h.value.shape[0], -1))
    head_layers = len(spec.head_dims) + 1
    for i in range(head_layers):
        w, b = leaves[idx], leaves[idx + 1]
        idx += 2
        h = ad.add(ad.matmul(h, w), b)
        if i < head_layers - 1:
            h = _act_var(spec.activation, h)
    return h


def gradient(loss_fn, params: NetworkParams) -> np.ndarray:
    """Reverse-mode gradient of ``loss_fn(leaves)`` w.r.t. the flat vector.

    ``loss_fn`` receives the tape leaves for ``params`` (alternating weight
    and bias Vars, layer by layer) and must return a scalar Var.
    """
    leaves = make_leaves(params)
    loss = loss_fn(leaves)
    ad.backward(loss)
    return collect_gradient(params, leaves)


def mlp_lipschitz_bound(params: NetworkParams, input_slice: slice | None = None) -> float:
    """Certified Lipschitz upper bound w.r.t. the 1-norm.

    Product of per-layer induced 1-norms, with the first layer optionally
    restricted to a block of input coordinates. Valid for tanh/relu since
    both have slope at most 1.
    """
    layers = mlp_matrices(params)
    bound = 1.0
    for i, (w, _) in enumerate(layers):
        mat = w
        if i == 0 and input_slice is not None:
            mat = w[input_slice, :]
            if mat.size == 0:
                return 0.0
        # W is stored (fan_in, fan_out); the induced 1-norm of x -> x @ W
        # is the max absolute row sum.
        bound *= float(np.max(np.sum(np.abs(mat), axis=1))) if mat.size else 0.0
    return bound
