"""Perceptron builders for the three network roles.

A Network is an immutable layer spec plus one flat float64 parameter
vector (per linear layer: weights row-major, then biases). The feature
extractor maps inputs to a scalar logit, the environment-inference net
maps an auxiliary variable to simplex weights over inferred environments,
and the penalty-strength net maps the feature extractor's parameter
vector to a non-negative scalar through a softplus head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T

CHECKPOINT_FORMAT = "oodtv-net-v1"

ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid, "softplus": T.softplus, "softmax": T.softmax}


@dataclass(frozen=True)
class Layer:
    kind: str  # linear | relu | sigmoid | softplus | softmax
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("spec needs at least one layer")
        prev = None
        for i, layer in enumerate(self.layers):
            if layer.kind not in ("linear",) and layer.kind not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind != "linear" and layer.in_dim != layer.out_dim:
                raise ValueError(f"layer {i}: activation must keep its dimension")
            if prev is not None and layer.in_dim != prev:
                raise ValueError(
                    f"layer {i}: in_dim {layer.in_dim} does not chain from previous out_dim {prev}"
                )
            prev = layer.out_dim

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def param_count(self) -> int:
        return sum(l.in_dim * l.out_dim + l.out_dim for l in self.layers if l.kind == "linear")


def spec(*layers) -> NetworkSpec:
    """Build a NetworkSpec from ('kind', in_dim, out_dim) triples."""
    return NetworkSpec(tuple(Layer(*l) for l in layers))


def mlp_spec(dims, activations, head=None) -> NetworkSpec:
    """Linear stack dims[0]->dims[1]->... with an activation after each
    hidden linear layer and an optional head activation."""
    layers = []
    for i in range(len(dims) - 1):
        layers.append(Layer("linear", dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(Layer(activations, dims[i + 1], dims[i + 1]))
    if head is not None:
        layers.append(Layer(head, dims[-1], dims[-1]))
    return NetworkSpec(tuple(layers))


def simulation_phi_spec(n_features: int = 15) -> NetworkSpec:
    """Feature extractor for the synthetic-shift task: a single linear map."""
    return spec(("linear", n_features, 1))


def simulation_rho_spec() -> NetworkSpec:
    """Environment inference head: 1 -> 16 -> 1 with a sigmoid output."""
    return mlp_spec([1, 16, 1], "relu", head="sigmoid")


def simulation_lambda_spec(phi_param_count: int) -> NetworkSpec:
    """Penalty-strength net: phi params -> 1 -> 1 with a softplus output.

    The input width is the actual flattened size of the feature
    extractor's parameter vector.
    """
    return mlp_spec([phi_param_count, 1, 1], "relu", head="softplus")


@dataclass(frozen=True)
class Network:
    spec: NetworkSpec
    params: np.ndarray  # flat float64, length spec.param_count

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "params", p)
        if p.size != self.spec.param_count:
            raise ValueError(
                f"parameter vector has {p.size} entries, spec needs {self.spec.param_count}"
            )

    def with_params(self, params: np.ndarray) -> "Network":
        return replace(self, params=np.asarray(params, dtype=np.float64).reshape(-1))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Eager forward pass on a throwaway tape."""
        tape = T.Tape()
        out = forward(self.spec, tape.const(self.params), tape.const(np.atleast_2d(x)))
        return out.data


def build(net_spec: NetworkSpec, init_seed: int) -> Network:
    """Deterministically initialized network.

    Each linear layer draws weights and biases uniformly from
    [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    """
    rng = np.random.default_rng(init_seed)
    chunks = []
    for layer in net_spec.layers:
        if layer.kind != "linear":
            continue
        bound = 1.0 / np.sqrt(layer.in_dim)
        chunks.append(rng.uniform(-bound, bound, layer.in_dim * layer.out_dim))
        chunks.append(rng.uniform(-bound, bound, layer.out_dim))
    return Network(net_spec, np.concatenate(chunks))


def unflatten(net_spec: NetworkSpec, params: np.ndarray):
    """Split a flat parameter vector into per-layer (W, b) pairs."""
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    out, offset = [], 0
    for layer in net_spec.layers:
        if layer.kind != "linear":
            continue
        n_w = layer.in_dim * layer.out_dim
        w = params[offset : offset + n_w].reshape(layer.in_dim, layer.out_dim)
        b = params[offset + n_w : offset + n_w + layer.out_dim]
        out.append((w, b))
        offset += n_w + layer.out_dim
    if offset != params.size:
        raise ValueError(f"parameter vector length {params.size}, expected {offset}")
    return out


def flatten(pairs) -> np.ndarray:
    """Inverse of unflatten."""
    return np.concatenate([np.concatenate([w.reshape(-1), b.reshape(-1)]) for w, b in pairs])


def forward(net_spec: NetworkSpec, params: T.Tensor, x: T.Tensor) -> T.Tensor:
    """Batched forward pass recorded on the params/x tape.

    ``params`` is the flat parameter tensor; ``x`` has the first layer's
    in_dim as its column count.
    """
    if x.data.ndim != 2 or x.data.shape[1] != net_spec.in_dim:
        raise T.ShapeMismatchError("forward", x.data.shape, (-1, net_spec.in_dim))
    h = x
    offset = 0
    for layer in net_spec.layers:
        if layer.kind == "linear":
            n_w = layer.in_dim * layer.out_dim
            w = T.reshape(T.segment(params, offset, offset + n_w), (layer.in_dim, layer.out_dim))
            b = T.segment(params, offset + n_w, offset + n_w + layer.out_dim)
            h = T.add(T.matmul(h, w), b)
            offset += n_w + layer.out_dim
        else:
            h = ACTIVATIONS[layer.kind](h)
    return h


def evaluate(net: Network, x: np.ndarray) -> np.ndarray:
    """Forward pass as plain arrays."""
    return net.apply(x)


def lambda_expr(lambda_spec: NetworkSpec, psi: T.Tensor, phi_vec: T.Tensor) -> T.Tensor:
    """Penalty strength as a scalar tape expression of both psi and phi."""
    if phi_vec.data.size != lambda_spec.in_dim:
        raise T.ShapeMismatchError("lambda_value", phi_vec.data.shape, (lambda_spec.in_dim,))
    out = forward(lambda_spec, psi, T.reshape(phi_vec, (1, lambda_spec.in_dim)))
    return T.mean(out)


def lambda_value(lambda_net: Network, phi_params: np.ndarray) -> float:
    """Penalty strength lambda(psi, phi) as a plain scalar, always >= 0."""
    tape = T.Tape()
    expr = lambda_expr(
        lambda_net.spec,
        tape.const(lambda_net.params),
        tape.const(np.asarray(phi_params, dtype=np.float64).reshape(-1)),
    )
    return expr.item()


def rho_expr(rho_spec: NetworkSpec, theta: T.Tensor, aux: T.Tensor) -> T.Tensor:
    """Per-sample environment weights on the simplex, as a tape expression.

    A sigmoid head with scalar output s expands to the two-environment row
    [s, 1-s]; a softmax head passes through.
    """
    out = forward(rho_spec, theta, aux)
    head = rho_spec.layers[-1].kind
    if head == "sigmoid" and out.data.shape[1] == 1:
        return T.hstack(out, T.sub(1.0, out))
    if head == "softmax":
        return out
    raise ValueError(f"rho head must be sigmoid (scalar) or softmax, got {head!r}")


def rho_weights(rho_net: Network, aux: np.ndarray) -> np.ndarray:
    """Environment weight rows for each auxiliary value, as plain arrays."""
    tape = T.Tape()
    aux2d = np.atleast_2d(np.asarray(aux, dtype=np.float64))
    if aux2d.shape[0] == 1 and aux2d.shape[1] != rho_net.spec.in_dim:
        aux2d = aux2d.T
    return rho_expr(rho_net.spec, tape.const(rho_net.params), tape.const(aux2d)).data


def n_environments(rho_spec: NetworkSpec) -> int:
    head = rho_spec.layers[-1].kind
    if head == "sigmoid" and rho_spec.out_dim == 1:
        return 2
    return rho_spec.out_dim


def calibrate_head_bias(net: Network, inputs: np.ndarray, target: float) -> Network:
    """Shift the last linear layer's bias so the scalar output equals
    ``target`` at ``inputs``. Requires a softplus head and target > 0."""
    if net.spec.layers[-1].kind != "softplus" or net.spec.out_dim != 1:
        raise ValueError("calibration needs a scalar softplus head")
    if target <= 0.0:
        raise ValueError("softplus output target must be positive")
    current = net.apply(np.asarray(inputs, dtype=np.float64).reshape(1, -1)).item()
    # invert softplus at both points and move the bias by the difference
    z_now = _inv_softplus(current)
    z_target = _inv_softplus(target)
    params = net.params.copy()
    params[-1] += z_target - z_now
    return net.with_params(params)


def _inv_softplus(y: float) -> float:
    if y <= 0.0:
        raise ValueError("softplus outputs are positive")
    # log(exp(y) - 1), stable for large y
    if y > 30.0:
        return y
    return float(np.log(np.expm1(y)))


# ---------------------------------------------------------------------------
# checkpoints


def save_network(net: Network, path) -> None:
    """Write a versioned JSON checkpoint (spec + flat params)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "layers": [[l.kind, l.in_dim, l.out_dim] for l in net.spec.layers],
        "params": net.params.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    layers = tuple(Layer(str(k), int(i), int(o)) for k, i, o in payload["layers"])
    return Network(NetworkSpec(layers), np.asarray(payload["params"], dtype=np.float64))
