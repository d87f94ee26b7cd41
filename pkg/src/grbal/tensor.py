"""Dense numerical kernels with hand-derived gradients.

Parameters always live in a flat float64 vector (``theta``) in a fixed
canonical order; network objects only describe the architecture. This keeps
the adapted parameters of the inner step a plain vector expression
``theta - psi * grad`` and lets every operation be a pure function.

Canonical order (version 1): for each layer, the weight matrix of shape
(in, out) in row-major order followed by the bias of length out. Weights act
on row vectors, ``y = x @ W + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ArtifactError, DimensionError, NumericError

ORDERING_VERSION = 1
_MAGIC = b"GRBALCK1"


def _as_batch(x, dim, what):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(what, f"(*, {dim})", arr.shape)
    return arr, single


def _split(theta, shapes):
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(theta[offset:offset + size].reshape(shape))
        offset += size
    return out


@dataclass(frozen=True)
class Mlp:
    """ReLU multilayer perceptron with an identity output layer."""

    in_dim: int
    hidden_dims: tuple[int, ...]
    out_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ArgumentError(f"layer widths must be positive: {self.dims}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden_dims, self.out_dim)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for din, dout in zip(self.dims[:-1], self.dims[1:]):
            shapes.append((din, dout))
            shapes.append((dout,))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(din * dout + dout for din, dout in zip(self.dims[:-1], self.dims[1:]))

    def unpack(self, theta) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError("Mlp parameter vector", (self.n_params,), theta.shape)
        parts = _split(theta, self.param_shapes)
        return [(parts[2 * i], parts[2 * i + 1]) for i in range(self.n_layers)]

    def pack(self, layers) -> np.ndarray:
        if len(layers) != self.n_layers:
            raise DimensionError("Mlp layer count", self.n_layers, len(layers))
        flat = []
        for i, (W, b) in enumerate(layers):
            din, dout = self.dims[i], self.dims[i + 1]
            W = np.asarray(W, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if W.shape != (din, dout) or b.shape != (dout,):
                raise DimensionError(f"layer {i}", ((din, dout), (dout,)), (W.shape, b.shape))
            flat.append(W.ravel())
            flat.append(b)
        return np.concatenate(flat)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """He-uniform weights, zero biases."""
        layers = []
        for din, dout in zip(self.dims[:-1], self.dims[1:]):
            bound = np.sqrt(6.0 / din)
            layers.append((rng.uniform(-bound, bound, size=(din, dout)), np.zeros(dout)))
        # a small output layer keeps initial predictions near the delta mean
        W, b = layers[-1]
        layers[-1] = (W * 0.1, b)
        return self.pack(layers)

    def to_dict(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "hidden_dims": list(self.hidden_dims),
                "out_dim": self.out_dim}


def _check_finite(arrays, what):
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {what} at layer {i}")


def _mlp_forward_cache(net: Mlp, theta, X):
    layers = net.unpack(theta)
    acts = [X]
    pre = []
    h = X
    last = net.n_layers - 1
    # overflow is reported below as a NumericError naming the layer
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
    if not np.all(np.isfinite(h)):
        _check_finite(pre, "mlp forward")
    return layers, acts, pre


def _mlp_backward(layers, acts, pre, dY, want_input_grad=False):
    """Gradient of sum(dY * Y) w.r.t. all parameters (and optionally the input)."""
    grads = [None] * (2 * len(layers))
    delta = dY
    dX = None
    for i in range(len(layers) - 1, -1, -1):
        W = layers[i][0]
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0.0)
        elif want_input_grad:
            dX = delta @ W.T
    flat = np.concatenate([g.ravel() for g in grads])
    return flat, dX


def mlp_forward(net: Mlp, theta, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (batch, in_dim) matrix."""
    X, single = _as_batch(x, net.in_dim, "mlp input")
    _, acts, _ = _mlp_forward_cache(net, theta, X)
    y = acts[-1]
    return y[0] if single else y


def _batch_pairs(net, X, T):
    X, _ = _as_batch(X, net.in_dim, "mlp input")
    T, _ = _as_batch(T, net.out_dim, "mlp target")
    if X.shape[0] == 0:
        raise ArgumentError("empty batch")
    if X.shape[0] != T.shape[0]:
        raise DimensionError("target rows", X.shape[0], T.shape[0])
    return X, T


def mlp_loss_grad(net: Mlp, theta, X, T, want_input_grad=False):
    """Mean squared error (over batch rows and output dims) and its gradient.

    Returns ``(loss, grad)``, or ``(loss, grad, dX)`` with ``want_input_grad``.
    """
    X, T = _batch_pairs(net, X, T)
    layers, acts, pre = _mlp_forward_cache(net, theta, X)
    resid = acts[-1] - T
    scale = 1.0 / resid.size
    loss = float(np.sum(resid * resid) * scale)
    grad, dX = _mlp_backward(layers, acts, pre, 2.0 * scale * resid, want_input_grad)
    if want_input_grad:
        return loss, grad, dX
    return loss, grad


def mlp_loss(net: Mlp, theta, X, T) -> float:
    X, T = _batch_pairs(net, X, T)
    _, acts, _ = _mlp_forward_cache(net, theta, X)
    resid = acts[-1] - T
    return float(np.mean(resid * resid))


def mlp_grad(net: Mlp, theta, X, T) -> np.ndarray:
    """Exact MSE gradient for a batch given as input rows ``X`` and target rows ``T``."""
    return mlp_loss_grad(net, theta, X, T)[1]


def mlp_hvp(net: Mlp, theta, X, T, v) -> np.ndarray:
    """Hessian of the batch MSE times a direction ``v`` (Pearlmutter R-operator).

    ReLU has zero second derivative away from the kink, so only the bilinear
    terms of the forward and backward passes contribute.
    """
    X, T = _batch_pairs(net, X, T)
    layers, acts, pre = _mlp_forward_cache(net, theta, X)
    dlayers = net.unpack(v)
    n = len(layers)
    masks = [(z > 0.0).astype(np.float64) for z in pre[:-1]]

    r_acts = [None]
    r_act = None
    for i, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
        rz = acts[i] @ dW + db
        if r_act is not None:
            rz = rz + r_act @ W
        r_act = rz * masks[i] if i < n - 1 else rz
        r_acts.append(r_act)

    scale = 2.0 / acts[-1].size
    delta = scale * (acts[-1] - T)
    r_delta = scale * r_acts[-1]
    out = [None] * (2 * n)
    for i in range(n - 1, -1, -1):
        W, dW = layers[i][0], dlayers[i][0]
        rgW = acts[i].T @ r_delta
        if r_acts[i] is not None:
            rgW = rgW + r_acts[i].T @ delta
        out[2 * i] = rgW
        out[2 * i + 1] = r_delta.sum(axis=0)
        if i > 0:
            r_delta = (r_delta @ W.T + delta @ dW.T) * masks[i - 1]
            delta = (delta @ W.T) * masks[i - 1]
    return np.concatenate([o.ravel() for o in out])


def inner_step(net: Mlp, theta, psi, X, T):
    """One gradient step on the batch MSE with per-parameter (or scalar) rates."""
    loss, g = mlp_loss_grad(net, theta, X, T)
    theta_prime = theta - psi * g
    if not np.all(np.isfinite(theta_prime)):
        raise NumericError("non-finite adapted parameters after inner step")
    return theta_prime, g, loss


def mlp_grad_through_update(net: Mlp, theta, psi, inner_X, inner_T, outer_X, outer_T):
    """Meta-gradient of the outer MSE after one inner gradient step.

    With ``theta' = theta - psi * g(theta)`` and ``v = dL_outer/dtheta'``:

        dL/dtheta = v - H_inner(theta) (psi * v)
        dL/dpsi   = -g * v            (summed to a scalar when psi is scalar)

    Returns ``(outer_loss, grad_theta, grad_psi)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    scalar_psi = np.ndim(psi) == 0
    psi = np.float64(psi) if scalar_psi else np.asarray(psi, dtype=np.float64)
    if not scalar_psi and psi.shape != theta.shape:
        raise DimensionError("psi", theta.shape, psi.shape)
    theta_prime, g, _ = inner_step(net, theta, psi, inner_X, inner_T)
    loss, v = mlp_loss_grad(net, theta_prime, outer_X, outer_T)
    grad_theta = v - mlp_hvp(net, theta, inner_X, inner_T, psi * v)
    grad_psi = -(g * v)
    if scalar_psi:
        grad_psi = float(np.sum(grad_psi))
    return loss, grad_theta, grad_psi


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class RecurrentCell:
    """Gated recurrent unit with a linear readout.

    Parameter order: (W_z, U_z, b_z, W_r, U_r, b_r, W_n, U_n, b_n, W_o, b_o)
    with input weights (in, hidden), recurrent weights (hidden, hidden) and
    readout (hidden, out).
    """

    in_dim: int
    hidden_dim: int
    out_dim: int

    @property
    def param_shapes(self):
        i, h, o = self.in_dim, self.hidden_dim, self.out_dim
        gate = [(i, h), (h, h), (h,)]
        return gate * 3 + [(h, o), (o,)]

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes))

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError("RecurrentCell parameter vector", (self.n_params,), theta.shape)
        return _split(theta, self.param_shapes)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for shape in self.param_shapes:
            if len(shape) == 1:
                parts.append(np.zeros(shape))
            else:
                bound = 1.0 / np.sqrt(shape[0])
                parts.append(rng.uniform(-bound, bound, size=shape))
        return np.concatenate([p.ravel() for p in parts])

    def to_dict(self) -> dict:
        return {"kind": "gru", "in_dim": self.in_dim, "hidden_dim": self.hidden_dim,
                "out_dim": self.out_dim}


def _gru_forward(cell: RecurrentCell, theta, inputs, h0):
    """Batched unroll. ``inputs`` is (steps, batch, in_dim), ``h0`` is (batch, hidden)."""
    Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn, Wo, bo = cell.unpack(theta)
    h = h0
    cache = []
    outputs = np.empty((inputs.shape[0], inputs.shape[1], cell.out_dim))
    for t in range(inputs.shape[0]):
        x = inputs[t]
        z = _sigmoid(x @ Wz + h @ Uz + bz)
        r = _sigmoid(x @ Wr + h @ Ur + br)
        hr = r * h
        n = np.tanh(x @ Wn + hr @ Un + bn)
        h_new = (1.0 - z) * n + z * h
        cache.append((x, h, z, r, hr, n, h_new))
        outputs[t] = h_new @ Wo + bo
        h = h_new
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite hidden state in recurrent unroll")
    return outputs, h, cache


def _gru_backward(cell: RecurrentCell, theta, cache, d_outputs, d_hT):
    """Backpropagation through time. Returns (flat grad, d_inputs, d_h0)."""
    Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn, Wo, bo = cell.unpack(theta)
    g = [np.zeros_like(p) for p in (Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn, Wo, bo)]
    gWz, gUz, gbz, gWr, gUr, gbr, gWn, gUn, gbn, gWo, gbo = g
    steps = len(cache)
    batch = d_hT.shape[0]
    d_inputs = np.zeros((steps, batch, cell.in_dim))
    dh = d_hT.copy()
    for t in range(steps - 1, -1, -1):
        x, h_prev, z, r, hr, n, h_new = cache[t]
        if d_outputs is not None:
            dy = d_outputs[t]
            gWo += h_new.T @ dy
            gbo += dy.sum(axis=0)
            dh = dh + dy @ Wo.T
        dn = dh * (1.0 - z) * (1.0 - n * n)
        dz = dh * (h_prev - n) * z * (1.0 - z)
        dh_prev = dh * z
        gWn += x.T @ dn
        gUn += hr.T @ dn
        gbn += dn.sum(axis=0)
        dhr = dn @ Un.T
        dh_prev += dhr * r
        dr = dhr * h_prev * r * (1.0 - r)
        gWr += x.T @ dr
        gUr += h_prev.T @ dr
        gbr += dr.sum(axis=0)
        gWz += x.T @ dz
        gUz += h_prev.T @ dz
        gbz += dz.sum(axis=0)
        dh_prev += dr @ Ur.T + dz @ Uz.T
        d_inputs[t] = dn @ Wn.T + dr @ Wr.T + dz @ Wz.T
        dh = dh_prev
    return np.concatenate([a.ravel() for a in g]), d_inputs, dh


def recurrent_forward(cell: RecurrentCell, theta, inputs, h0=None):
    """Unroll over a sequence of input vectors. Returns ``(outputs, h_final)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    h0 = np.zeros(cell.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    if h0.shape != (cell.hidden_dim,):
        raise DimensionError("initial hidden state", (cell.hidden_dim,), h0.shape)
    if inputs.size == 0:
        return np.zeros((0, cell.out_dim)), h0.copy()
    if inputs.ndim != 2 or inputs.shape[1] != cell.in_dim:
        raise DimensionError("recurrent inputs", f"(steps, {cell.in_dim})", inputs.shape)
    outputs, h, _ = _gru_forward(cell, theta, inputs[:, None, :], h0[None, :])
    return outputs[:, 0, :], h[0]


def recurrent_loss_grad(cell: RecurrentCell, theta, sequences):
    """Per-step MSE of the readout averaged over every step of every sequence.

    ``sequences`` is an iterable of ``(inputs, targets)`` pairs, each unrolled
    from a zero hidden state.
    """
    sequences = list(sequences)
    if not sequences:
        raise ArgumentError("empty sequence batch")
    total = 0
    for inputs, targets in sequences:
        total += np.asarray(targets).size
    if total == 0:
        raise ArgumentError("sequences contain no steps")
    grad = np.zeros(cell.n_params)
    loss = 0.0
    for inputs, targets in sequences:
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if inputs.shape[0] == 0:
            continue
        if inputs.ndim != 2 or inputs.shape[1] != cell.in_dim:
            raise DimensionError("recurrent inputs", f"(steps, {cell.in_dim})", inputs.shape)
        if targets.shape != (inputs.shape[0], cell.out_dim):
            raise DimensionError("recurrent targets", (inputs.shape[0], cell.out_dim), targets.shape)
        h0 = np.zeros((1, cell.hidden_dim))
        out, _, cache = _gru_forward(cell, theta, inputs[:, None, :], h0)
        resid = out[:, 0, :] - targets
        loss += float(np.sum(resid * resid))
        g, _, _ = _gru_backward(cell, theta, cache, (2.0 / total) * resid[:, None, :],
                                np.zeros((1, cell.hidden_dim)))
        grad += g
    return loss / total, grad


def recurrent_grad(cell: RecurrentCell, theta, sequences) -> np.ndarray:
    return recurrent_loss_grad(cell, theta, sequences)[1]


def save_checkpoint(path, blocks: dict, header: dict | None = None) -> None:
    """Write named float64 blocks as one little-endian array behind a JSON header.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, raw data.
    """
    header = dict(header or {})
    header["ordering_version"] = ORDERING_VERSION
    header["blocks"] = []
    payload = []
    offset = 0
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8").ravel()
        header["blocks"].append({"name": name, "offset": offset, "length": int(arr.size)})
        payload.append(arr)
        offset += arr.size
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    data = np.concatenate(payload) if payload else np.zeros(0, dtype="<f8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(data.astype("<f8").tobytes())
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ArtifactError(f"not a checkpoint file: {path}")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path):
    """Returns ``(header, {name: array})``."""
    path = Path(path)
    header = read_checkpoint_header(path)
    with open(path, "rb") as fh:
        fh.seek(8)
        (n,) = struct.unpack("<Q", fh.read(8))
        fh.seek(16 + n)
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if header.get("ordering_version") != ORDERING_VERSION:
        raise ArtifactError(f"unsupported parameter ordering {header.get('ordering_version')}")
    blocks = {}
    for b in header["blocks"]:
        blocks[b["name"]] = data[b["offset"]:b["offset"] + b["length"]].copy()
    return header, blocks
