"""Dense tanh networks with two-scale input and exact spatial derivatives.

A network sees the augmented input ``(x, s*(x - x_c), s)`` with
``s = eps**gamma``.  Spatial derivatives are pushed forward through the
layers as tangent streams: one stream per coordinate axis for the gradient
and a single stream for the Laplacian.  The Laplacian recursion is linear in
the incoming second-order tangent, so the per-axis second tangents can be
summed before propagation.  Parameter gradients come from reverse-mode
accumulation over that propagation (torch autograd).

Flattening layout (version 1): layer-major; within a layer the weight
matrix in row-major order (``n_l x n_{l-1}``) followed by the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DomainError, LoadError, NumericError

DTYPE = torch.float64
FLATTEN_VERSION = 1
ACTIVATIONS = ("tanh",)


def _check_layer_sizes(layer_sizes) -> tuple[int, ...]:
    sizes = tuple(int(n) for n in layer_sizes)
    if len(sizes) < 2:
        raise ConfigError(f"need at least an input and an output layer, got {list(sizes)}")
    if any(n < 1 for n in sizes):
        raise ConfigError(f"layer sizes must be positive, got {list(sizes)}")
    return sizes


@dataclass
class MlpParams:
    """Weights ``W^l`` (shape ``n_l x n_{l-1}``) and biases ``b^l`` of one network."""

    layer_sizes: tuple[int, ...]
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = _check_layer_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or len(self.weights) != self.n_layers:
            raise ConfigError("weights/biases do not match the layer count")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if tuple(W.shape) != shape or tuple(b.shape) != (shape[0],):
                raise ConfigError(
                    f"layer {l + 1}: expected W{shape} and b({shape[0]},), "
                    f"got W{tuple(W.shape)} and b{tuple(b.shape)}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return param_count(self.layer_sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.detach().reshape(-1))
            parts.append(b.detach())
        return torch.cat(parts).numpy().astype(np.float64, copy=True)

    @classmethod
    def from_flat(cls, layer_sizes, flat, activation: str = "tanh") -> "MlpParams":
        """Rebuild from a flat vector.  Torch input yields differentiable views."""
        sizes = _check_layer_sizes(layer_sizes)
        if not isinstance(flat, torch.Tensor):
            flat = torch.as_tensor(np.asarray(flat, dtype=np.float64))
        if flat.ndim != 1 or flat.shape[0] != param_count(sizes):
            raise ConfigError(
                f"flat vector has {tuple(flat.shape)} entries, layout needs {param_count(sizes)}"
            )
        weights, biases, k = [], [], 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[k:k + n_out * n_in].reshape(n_out, n_in))
            k += n_out * n_in
            biases.append(flat[k:k + n_out])
            k += n_out
        return cls(sizes, weights, biases, activation)

    def copy(self) -> "MlpParams":
        return MlpParams.from_flat(self.layer_sizes, self.flatten().copy(), self.activation)


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum(n_out * n_in + n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


def layer_sizes_for(dim: int, hidden: Sequence[int]) -> tuple[int, ...]:
    """Layer sizes of a two-scale network on a ``dim``-dimensional domain."""
    return (2 * dim + 1, *hidden, 1)


def init_params(layer_sizes: Sequence[int], seed: int) -> MlpParams:
    """Glorot-normal weights, zero biases; deterministic in ``seed``."""
    sizes = _check_layer_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / (n_in + n_out))
        weights.append(torch.from_numpy(rng.normal(0.0, std, size=(n_out, n_in))))
        biases.append(torch.zeros(n_out, dtype=DTYPE))
    return MlpParams(sizes, weights, biases)


@dataclass(frozen=True)
class TwoScaleConfig:
    """Stretch exponent ``gamma < 0`` and center ``x_c`` of the rescaled channel."""

    center: tuple[float, ...]
    gamma: float = -1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.gamma < 0:
            raise ConfigError(f"gamma must be negative, got {self.gamma}")

    @property
    def dim(self) -> int:
        return len(self.center)


@dataclass
class NetEval:
    """Value, spatial gradient and Laplacian at one or many points.

    For a batch of ``n`` points: ``value`` (n,), ``grad`` (n, d),
    ``laplacian`` (n,).  Derivatives are total derivatives in the physical
    coordinates.
    """

    value: object
    grad: object
    laplacian: object

    def detach(self) -> "NetEval":
        return NetEval(*(_to_numpy(v) for v in (self.value, self.grad, self.laplacian)))


def _to_numpy(v):
    return v.detach().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)


def _check_eps(eps):
    e = float(eps.detach()) if isinstance(eps, torch.Tensor) else float(eps)
    if not e > 0:
        raise DomainError(f"eps must be positive, got {e}")


def _as_batch(x):
    """Return (tensor batch (n, d), was_torch, was_single)."""
    was_torch = isinstance(x, torch.Tensor)
    t = x if was_torch else torch.as_tensor(np.asarray(x, dtype=np.float64))
    single = t.ndim == 1
    return (t.reshape(1, -1) if single else t), was_torch, single


def _restore(v, was_torch, single):
    if single:
        v = v[0]
    if was_torch:
        return v
    v = v.detach().numpy()
    return float(v) if v.ndim == 0 else v


def two_scale_features(x, eps, cfg: TwoScaleConfig):
    """``[x, eps**gamma * (x - x_c), eps**gamma]`` for one point or a batch."""
    _check_eps(eps)
    xb, was_torch, single = _as_batch(x)
    if xb.shape[1] != cfg.dim:
        raise ConfigError(f"point has dimension {xb.shape[1]}, center has {cfg.dim}")
    s = eps ** cfg.gamma
    center = torch.tensor(cfg.center, dtype=xb.dtype)
    feats = torch.cat([xb, s * (xb - center), torch.ones_like(xb[:, :1]) * s], dim=1)
    if single:
        feats = feats[0]
    return feats if was_torch else feats.detach().numpy()


def forward(params: MlpParams, features):
    """Plain network output: tanh hidden layers, affine output layer."""
    fb, was_torch, single = _as_batch(features)
    if fb.shape[1] != params.input_dim:
        raise ConfigError(f"feature length {fb.shape[1]} != input layer size {params.input_dim}")
    a = fb
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        a = torch.tanh(a @ W.T + b)
    out = (a @ params.weights[-1].T + params.biases[-1])[:, 0]
    return _restore(out, was_torch, single)


def propagate(weights, biases, x, eps, cfg: TwoScaleConfig, derivatives: bool = True):
    """Core tangent propagation on a torch batch ``x`` of shape (n, d).

    Returns ``(value, grad, laplacian)`` with grad of shape (n, d); grad and
    laplacian are ``None`` when ``derivatives`` is false.  ``eps`` may be a
    float or a 0-d tensor.  No validation: this is the hot path.
    """
    d = x.shape[1]
    s = eps ** cfg.gamma
    center = torch.tensor(cfg.center, dtype=x.dtype)
    feats = torch.cat([x, s * (x - center), torch.ones_like(x[:, :1]) * s], dim=1)
    W = weights[0]
    z = feats @ W.T + biases[0]
    if not derivatives:
        a = z
        for W, b in zip(weights[1:], biases[1:]):
            a = torch.tanh(a) @ W.T + b
        return a[:, 0], None, None
    # d feats / d x_j = e_j + s e_{d+j}; features are affine so second tangents start at 0
    n = x.shape[0]
    g = W[:, :d] + s * W[:, d:2 * d]  # (n1, d)
    if len(weights) == 1:
        return z[:, 0], g[0].expand(n, d), torch.zeros(n, dtype=x.dtype)
    dz = [g[:, j] for j in range(d)]  # broadcast over points in the first layer
    lz = None
    for W, b in zip(weights[1:], biases[1:]):
        a = torch.tanh(z)
        # sech^2 without the cancellation of 1 - tanh^2 in saturated units
        e = torch.exp(-2.0 * z.abs())
        sp = 4.0 * e / ((1.0 + e) * (1.0 + e))
        sq = dz[0] * dz[0]
        for t in dz[1:]:
            sq = sq + t * t
        lap = -2.0 * a * sp * sq
        if lz is not None:
            lap = lap + sp * lz
        z = a @ W.T + b
        dz = [(sp * t) @ W.T for t in dz]
        lz = lap @ W.T
    return z[:, 0], torch.stack([t[:, 0] for t in dz], dim=1), lz[:, 0]


def eval_net(params: MlpParams, cfg: TwoScaleConfig, x, eps) -> NetEval:
    """Value, gradient and Laplacian of ``forward(params, two_scale_features(x))``."""
    _check_eps(eps)
    xb, was_torch, single = _as_batch(x)
    if xb.shape[1] != cfg.dim or params.input_dim != 2 * cfg.dim + 1:
        raise ConfigError(
            f"point dimension {xb.shape[1]} incompatible with center dim {cfg.dim} "
            f"and input layer {params.input_dim}"
        )
    v, g, lap = propagate(params.weights, params.biases, xb, eps, cfg)
    return NetEval(
        _restore(v, was_torch, single), _restore(g, was_torch, single), _restore(lap, was_torch, single)
    )


def net_value(params: MlpParams, cfg: TwoScaleConfig, x, eps):
    """Network value only (no derivative streams)."""
    _check_eps(eps)
    xb, was_torch, single = _as_batch(x)
    with torch.set_grad_enabled(was_torch and torch.is_grad_enabled()):
        v, _, _ = propagate(params.weights, params.biases, xb, eps, cfg, derivatives=False)
    return _restore(v, was_torch, single)


def loss_param_gradient(
    loss: Callable[[MlpParams, MlpParams], torch.Tensor],
    params_y: MlpParams,
    params_w: MlpParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of a scalar coupled loss w.r.t. both parameter sets.

    ``loss`` receives differentiable :class:`MlpParams` views and must return
    a 0-d torch tensor.  Gradients use the flattening layout of
    :meth:`MlpParams.flatten`; a loss that ignores one network yields zeros
    for it.
    """
    theta_y = torch.tensor(params_y.flatten(), requires_grad=True)
    theta_w = torch.tensor(params_w.flatten(), requires_grad=True)
    py = MlpParams.from_flat(params_y.layer_sizes, theta_y, params_y.activation)
    pw = MlpParams.from_flat(params_w.layer_sizes, theta_w, params_w.activation)
    value = loss(py, pw)
    if not torch.isfinite(value):
        raise NumericError(f"loss is not finite ({float(value.detach())})")
    gy, gw = torch.autograd.grad(value, (theta_y, theta_w), allow_unused=True)
    gy = np.zeros(theta_y.shape[0]) if gy is None else gy.numpy()
    gw = np.zeros(theta_w.shape[0]) if gw is None else gw.numpy()
    return gy, gw


_MAGIC = "twoscale-mlp"


def save_params(params: MlpParams, path) -> None:
    """Text header followed by a little-endian float64 blob."""
    header = "\n".join([
        _MAGIC,
        f"version {FLATTEN_VERSION}",
        f"activation {params.activation}",
        "layer_sizes " + " ".join(str(n) for n in params.layer_sizes),
        f"n_params {params.n_params}",
        "layout layer-major, W row-major then b",
        "end",
        "",
    ])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_params(path) -> MlpParams:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(_MAGIC.encode()) or cut < 0:
        raise LoadError(f"{path}: not a parameter file")
    meta = {}
    for line in raw[:cut].decode("ascii").splitlines()[1:]:
        key, _, val = line.partition(" ")
        meta[key] = val
    if int(meta.get("version", -1)) != FLATTEN_VERSION:
        raise LoadError(f"{path}: unsupported layout version {meta.get('version')}")
    sizes = tuple(int(n) for n in meta["layer_sizes"].split())
    flat = np.frombuffer(raw[cut + len(marker):], dtype="<f8").astype(np.float64)
    if flat.shape[0] != param_count(sizes):
        raise LoadError(f"{path}: expected {param_count(sizes)} values, found {flat.shape[0]}")
    return MlpParams.from_flat(sizes, flat, meta.get("activation", "tanh"))
