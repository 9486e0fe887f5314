"""Bijections built from stacked affine coupling layers.

Each layer splits the coordinates into a kept block and a transformed
block; the transformed block is scaled by ``exp(s(kept))`` and shifted by
``t(kept)``, where ``s`` and ``t`` are one-hidden-layer tanh networks.
Layers come in pairs with swapped partitions so every coordinate gets
transformed. The map is invertible in closed form, its input Jacobian is
computed exactly by carrying directional derivatives through the stack,
and parameter gradients of any expression involving the map and its
Jacobian are produced by tracing that derivative-carrying computation with
the reverse-mode tape (`stableflow.autodiff`). Mixed second derivatives
(d2 y / dx dtheta) therefore come out of the tape without any hand-derived
formulas.

Flat parameter order (used by `flatten_params` / `unflatten_params` and by
all gradient vectors): layers in stack order; within a layer the scale net
before the shift net; within a net ``w1`` (row-major), ``b1``, ``w2``
(row-major), ``b2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError

# bound on the log-scale output; keeps exp() sane during exploratory
# optimizer steps far from the init
SCALE_BOUND = 3.0


@dataclass(frozen=True)
class NetParams:
    """Weights of a one-hidden-layer dense network (tanh activation)."""

    w1: np.ndarray  # [n_hidden, n_in]
    b1: np.ndarray  # [n_hidden]
    w2: np.ndarray  # [n_out, n_hidden]
    b2: np.ndarray  # [n_out]

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass(frozen=True)
class CouplingLayerParams:
    """One affine coupling layer.

    ``partition_index`` is the size of the kept coordinate block; whether
    the kept block sits at the front or the back of the coordinate vector
    is decided by the layer's position in the stack (even layers keep the
    leading block, odd layers the trailing one).
    """

    partition_index: int
    s_net: NetParams
    t_net: NetParams


@dataclass(frozen=True)
class FlowParams:
    """A stack of coupling layers acting on R^dim."""

    layers: tuple
    dim: int

    def __post_init__(self):
        d = self.dim
        if len(self.layers) % 2 != 0:
            raise ShapeError("coupling layers must come in swapped pairs")
        for i, layer in enumerate(self.layers):
            p = layer.partition_index
            if not 0 < p < d:
                raise ShapeError(f"layer {i}: partition_index {p} not in (0, {d})")
            if i % 2 == 1 and p != d - self.layers[i - 1].partition_index:
                raise ShapeError(
                    f"layers {i - 1},{i}: partitions are not complementary"
                )
            n_out = d - p
            for name, net in (("s_net", layer.s_net), ("t_net", layer.t_net)):
                w1, b1, w2, b2 = net.arrays()
                if w1.shape[1] != p or w2.shape != (n_out, w1.shape[0]):
                    raise ShapeError(f"layer {i} {name}: weight shapes mismatch")
                if b1.shape != (w1.shape[0],) or b2.shape != (n_out,):
                    raise ShapeError(f"layer {i} {name}: bias shapes mismatch")
        for layer in self.layers:
            if layer.s_net.w1.shape != layer.t_net.w1.shape:
                raise ShapeError("s_net and t_net must share layer shapes")

    @property
    def n_flow(self):
        return len(self.layers) // 2

    @property
    def n_hidden(self):
        return self.layers[0].s_net.w1.shape[0]

    def param_arrays(self):
        """All weight arrays in the documented flat order."""
        out = []
        for layer in self.layers:
            out.extend(layer.s_net.arrays())
            out.extend(layer.t_net.arrays())
        return out


def _make_net(n_in, n_hidden, n_out, rng=None, init_std=0.1):
    if rng is None:
        w1 = np.zeros((n_hidden, n_in))
        w2 = np.zeros((n_out, n_hidden))
    else:
        w1 = rng.normal(0.0, init_std, (n_hidden, n_in))
        w2 = rng.normal(0.0, init_std, (n_out, n_hidden))
    return NetParams(w1, np.zeros(n_hidden), w2, np.zeros(n_out))


def _partition_sizes(dim, n_layers):
    """Kept-block size per layer: dim//2, alternating with its complement."""
    base = dim // 2
    return [base if i % 2 == 0 else dim - base for i in range(n_layers)]


def random_flow(dim, n_flow, n_hidden, rng, init_std=0.1):
    """Gaussian-initialized stack; small init keeps the map near identity."""
    layers = []
    for i, p in enumerate(_partition_sizes(dim, 2 * n_flow)):
        layers.append(
            CouplingLayerParams(
                partition_index=p,
                s_net=_make_net(p, n_hidden, dim - p, rng, init_std),
                t_net=_make_net(p, n_hidden, dim - p, rng, init_std),
            )
        )
    return FlowParams(tuple(layers), dim)


def identity_flow(dim, n_flow, n_hidden):
    """All-zero weights: the stack is exactly the identity map."""
    layers = []
    for i, p in enumerate(_partition_sizes(dim, 2 * n_flow)):
        layers.append(
            CouplingLayerParams(
                partition_index=p,
                s_net=_make_net(p, n_hidden, dim - p),
                t_net=_make_net(p, n_hidden, dim - p),
            )
        )
    return FlowParams(tuple(layers), dim)


@lru_cache(maxsize=None)
def _partition(dim, p, odd):
    """(keep, trans, inverse-permutation) index arrays for one layer."""
    if odd:
        keep = np.arange(dim - p, dim)
        trans = np.arange(0, dim - p)
    else:
        keep = np.arange(0, p)
        trans = np.arange(p, dim)
    inv_perm = np.argsort(np.concatenate([keep, trans]))
    for arr in (keep, trans, inv_perm):
        arr.flags.writeable = False
    return keep, trans, inv_perm


def _materialize(params, lift=False):
    """Per-layer (keep, trans, inv_perm, s_arrays, t_arrays) tuples.

    With ``lift=True`` the weight arrays are wrapped as tape leaves and the
    leaf list (in flat parameter order) is returned alongside.
    """
    mat = []
    leaves = []
    for i, layer in enumerate(params.layers):
        keep, trans, inv_perm = _partition(
            params.dim, layer.partition_index, i % 2 == 1
        )
        nets = []
        for net in (layer.s_net, layer.t_net):
            arrays = net.arrays()
            if lift:
                arrays = tuple(ad.Tensor(a) for a in arrays)
                leaves.extend(arrays)
            nets.append(arrays)
        mat.append((keep, trans, inv_perm, nets[0], nets[1]))
    return (mat, leaves) if lift else mat


def materialize_stacked(params_list):
    """Stack same-architecture flows along a leading axis for sweep runs.

    The returned structure drives `stack_apply`/`pullback_control` on
    inputs of shape [F, B, dim]: weight matrices become [F, 1, out, in]
    (the singleton broadcasts over the per-flow batch), biases [F, 1, out].
    """
    first = params_list[0]
    for p in params_list[1:]:
        if (
            p.dim != first.dim
            or len(p.layers) != len(first.layers)
            or p.n_hidden != first.n_hidden
        ):
            raise ShapeError("stacked flows must share one architecture")
    mat = []
    for i in range(len(first.layers)):
        keep, trans, inv_perm = _partition(
            first.dim, first.layers[i].partition_index, i % 2 == 1
        )
        nets = []
        for pick in (lambda l: l.s_net, lambda l: l.t_net):
            arrays = []
            for j in range(4):
                stacked = np.stack([pick(p.layers[i]).arrays()[j] for p in params_list])
                arrays.append(stacked[:, None])
            nets.append(tuple(arrays))
        mat.append((keep, trans, inv_perm, nets[0], nets[1]))
    return mat


def _net_apply(arrays, z, tangent, squash):
    """One-hidden-layer net; optionally carries input-directional derivatives.

    ``tangent`` has one more trailing axis than ``z`` (the seed directions);
    its propagation uses only tape-friendly primitives so a reverse pass
    over the result yields exact mixed parameter/input derivatives. Weight
    stacks with extra leading axes (see `materialize_stacked`) broadcast
    through unchanged.
    """
    w1, b1, w2, b2 = arrays
    h_pre = ad.matvec(w1, z) + b1
    h = ad.tanh(h_pre)
    out = ad.matvec(w2, h) + b2
    out_tan = None
    if tangent is not None:
        h_tan = ad.expand_last(1.0 - h * h) * ad.matmul(w1, tangent)
        out_tan = ad.matmul(w2, h_tan)
    if squash:
        th = ad.tanh(out / SCALE_BOUND)
        out = SCALE_BOUND * th
        if tangent is not None:
            out_tan = ad.expand_last(1.0 - th * th) * out_tan
    return out, out_tan


def _check_finite(value, layer_index):
    data = value.data if isinstance(value, ad.Tensor) else value
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output at coupling layer {layer_index}")


def stack_apply(mat, x, tangent=None, check=True):
    """Run the stack forward; ``tangent`` carries d(x)/d(seed) alongside."""
    for i, (keep, trans, inv_perm, s_arrays, t_arrays) in enumerate(mat):
        xk = ad.take(x, keep, axis=-1)
        xt = ad.take(x, trans, axis=-1)
        tk = tt = None
        if tangent is not None:
            tk = ad.take(tangent, keep, axis=-2)
            tt = ad.take(tangent, trans, axis=-2)
        s, s_tan = _net_apply(s_arrays, xk, tk, squash=True)
        t, t_tan = _net_apply(t_arrays, xk, tk, squash=False)
        es = ad.exp(s)
        yt = xt * es + t
        x = ad.take(ad.concat([xk, yt], axis=-1), inv_perm, axis=-1)
        if tangent is not None:
            yt_tan = (
                tt * ad.expand_last(es)
                + ad.expand_last(xt * es) * s_tan
                + t_tan
            )
            tangent = ad.take(ad.concat([tk, yt_tan], axis=-2), inv_perm, axis=-2)
        if check:
            _check_finite(x, i)
    return x, tangent


def stack_inverse(mat, y):
    """Algebraic inverse: layers run backwards, each solved in closed form."""
    for i, (keep, trans, inv_perm, s_arrays, t_arrays) in reversed(
        list(enumerate(mat))
    ):
        yk = ad.take(y, keep, axis=-1)
        yt = ad.take(y, trans, axis=-1)
        s, _ = _net_apply(s_arrays, yk, None, squash=True)
        t, _ = _net_apply(t_arrays, yk, None, squash=False)
        xt = (yt - t) * ad.exp(-s)
        y = ad.take(ad.concat([yk, xt], axis=-1), inv_perm, axis=-1)
        _check_finite(y, i)
    return y


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != params.dim:
        raise ShapeError(
            f"input has trailing dimension {x.shape[-1] if x.ndim else 0}, "
            f"flow expects {params.dim}"
        )
    return x


def _eye_like(x, dim):
    return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim))


def flow_forward(params, x):
    """y = phi(x). Accepts any leading batch shape."""
    x = _check_input(params, x)
    y, _ = stack_apply(_materialize(params), x)
    return y


def flow_inverse(params, y):
    """x = phi^{-1}(y), exact up to floating point."""
    y = _check_input(params, y)
    return stack_inverse(_materialize(params), y)


def flow_jacobian(params, x):
    """J(x) = d phi / d x, shape [..., dim, dim]; det J > 0 always."""
    x = _check_input(params, x)
    _, jac = stack_apply(_materialize(params), x, tangent=_eye_like(x, params.dim))
    return jac


def flow_forward_jacobian(params, x):
    """(phi(x), J(x)) in one pass."""
    x = _check_input(params, x)
    return stack_apply(_materialize(params), x, tangent=_eye_like(x, params.dim))


# -- flat parameter vector ------------------------------------------------


def flatten_params(params):
    """Concatenate all weights into one vector (documented order)."""
    return np.concatenate([a.ravel() for a in params.param_arrays()])


def param_count(params):
    return sum(a.size for a in params.param_arrays())


def unflatten_params(template, vector):
    """Rebuild a FlowParams shaped like ``template`` from a flat vector."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (param_count(template),):
        raise ShapeError(
            f"flat vector has {vector.shape}, expected ({param_count(template)},)"
        )
    layers = []
    pos = 0
    for layer in template.layers:
        nets = []
        for net in (layer.s_net, layer.t_net):
            arrays = []
            for a in net.arrays():
                chunk = vector[pos : pos + a.size].reshape(a.shape)
                arrays.append(chunk.copy())
                pos += a.size
            nets.append(NetParams(*arrays))
        layers.append(CouplingLayerParams(layer.partition_index, nets[0], nets[1]))
    return FlowParams(tuple(layers), template.dim)


# -- controller-mean core and its parameter gradient -----------------------


def pullback_control(mat, S, D, x, xdot, x_ref, y_ref=None):
    """u = -J^T S (phi(x) - phi(x_ref)) - J^T D J xdot, batched.

    ``mat`` is a materialized stack (plain arrays or tape leaves); S, D are
    constant matrices. Runs on the tape when ``mat`` holds tensors. Pass a
    precomputed ``y_ref`` to skip the reference transform (closed-loop
    simulation evaluates it thousands of times against a fixed goal).
    """
    y, jac = stack_apply(mat, x, tangent=_eye_like(np.asarray(x), x.shape[-1]))
    if y_ref is None:
        y_ref, _ = stack_apply(mat, x_ref)
    dy = y - y_ref
    jac_t = ad.transpose(jac)
    spring = ad.matvec(jac_t, ad.matvec(S, dy))
    damping = ad.matvec(jac_t, ad.matvec(D, ad.matvec(jac, xdot)))
    return -(spring + damping)


def grad_through_flow(params, x, xdot, x_ref, gains):
    """Control force and its exact derivative w.r.t. every flow weight.

    Returns ``(u, du_dtheta)`` with ``du_dtheta`` of shape [dim, P] in flat
    parameter order. The derivative accounts for the parameter dependence
    of both phi and its Jacobian: the directional-derivative carry of
    `stack_apply` is itself traced by the reverse-mode tape, so the mixed
    second derivatives need no symbolic derivation.
    """
    x = np.atleast_2d(_check_input(params, x))
    xdot = np.atleast_2d(np.asarray(xdot, dtype=np.float64))
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=np.float64))
    if xdot.shape != x.shape or x_ref.shape[-1] != x.shape[-1]:
        raise ShapeError("x, xdot, x_ref trailing dimensions disagree")
    mat, leaves = _materialize(params, lift=True)
    u = pullback_control(mat, np.asarray(gains.S), np.asarray(gains.D), x, xdot, x_ref)
    d = params.dim
    rows = np.empty((d, param_count(params)))
    for i in range(d):
        seed = np.zeros_like(u.data)
        seed[..., i] = 1.0
        u.backward(seed)
        rows[i] = np.concatenate([leaf.grad.ravel() for leaf in leaves])
    return u.data[0], rows


# -- serialization ----------------------------------------------------------


def flow_to_dict(params):
    """JSON-ready document: {dim, n_flow, n_h, layers: [...]}"""

    def net_doc(net):
        return {
            "W1": net.w1.tolist(),
            "b1": net.b1.tolist(),
            "W2": net.w2.tolist(),
            "b2": net.b2.tolist(),
        }

    return {
        "dim": params.dim,
        "n_flow": params.n_flow,
        "n_h": params.n_hidden,
        "layers": [
            {
                "partition_index": layer.partition_index,
                "s_net": net_doc(layer.s_net),
                "t_net": net_doc(layer.t_net),
            }
            for layer in params.layers
        ],
    }


def flow_from_dict(doc):
    def net_from(doc_net):
        return NetParams(
            np.asarray(doc_net["W1"], dtype=np.float64),
            np.asarray(doc_net["b1"], dtype=np.float64),
            np.asarray(doc_net["W2"], dtype=np.float64),
            np.asarray(doc_net["b2"], dtype=np.float64),
        )

    layers = tuple(
        CouplingLayerParams(
            int(layer["partition_index"]),
            net_from(layer["s_net"]),
            net_from(layer["t_net"]),
        )
        for layer in doc["layers"]
    )
    return FlowParams(layers, int(doc["dim"]))
