"""Networks, analytic gradients, plain gradient-descent training and checkpoints.

Row-vector convention throughout: a batch of inputs has shape ``(N, n_in)``
and ``y = x @ w1 @ w2`` for the linear net. The loss is the mean squared
error over samples and outputs, ``L = sum((yhat - y)**2) / (N * D)``, and
errors are ``y - yhat``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envs import LinearDims, TaskDims
from .errors import DimensionError, NumericFailure, ScheduleError, UnsupportedArchitecture

TASK_BIAS = -2.0
INIT_RANGE = 0.1
LARGE_FACTOR = 10.0


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ------------------------------------------------------------------ networks


@dataclass
class LinearNet:
    w1: np.ndarray
    w2: np.ndarray

    arch = "linear"
    param_names = ("w1", "w2")

    @property
    def dims(self) -> LinearDims:
        return LinearDims(*self.w1.shape, self.w2.shape[1])

    def copy(self) -> "LinearNet":
        return LinearNet(self.w1.copy(), self.w2.copy())

    @property
    def w_eff(self) -> np.ndarray:
        return self.w1 @ self.w2


@dataclass
class TaskNet:
    """Two-layer sigmoid net with task cues feeding both layers.

    ``h = sigmoid(x1 @ w1 + x2 @ w2 + b1)`` and
    ``y = sigmoid(h @ v1 + x2 @ v2 + b2)``, with the biases held fixed.
    """

    w1: np.ndarray
    w2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    b1: float = TASK_BIAS
    b2: float = TASK_BIAS

    arch = "task"
    param_names = ("w1", "w2", "v1", "v2")

    @property
    def dims(self) -> TaskDims:
        n_stim, hidden = self.w1.shape
        n_tasks, n_out = self.v2.shape
        for m in range(1, n_stim + 1):
            g1, g2 = n_stim // m, n_out // m
            if g1 * m == n_stim and g2 * m == n_out and g1 * g2 == n_tasks:
                return TaskDims(g1, g2, m, hidden)
        raise DimensionError("weight shapes match no pooled task layout")

    def copy(self) -> "TaskNet":
        return TaskNet(self.w1.copy(), self.w2.copy(), self.v1.copy(), self.v2.copy(),
                       self.b1, self.b2)


def _check_net(net):
    if not isinstance(net, (LinearNet, TaskNet)):
        raise UnsupportedArchitecture(f"unsupported network type {type(net).__name__}")


@dataclass(frozen=True)
class ParamLayout:
    """Fixed ordering of all trainable scalars: each matrix row-major, in ``param_names`` order."""

    entries: tuple

    @classmethod
    def of(cls, net) -> "ParamLayout":
        _check_net(net)
        return cls(tuple((n, getattr(net, n).shape) for n in net.param_names))

    @property
    def size(self) -> int:
        return sum(r * c for _, (r, c) in self.entries)

    def slices(self) -> dict:
        out, off = {}, 0
        for name, (r, c) in self.entries:
            out[name] = slice(off, off + r * c)
            off += r * c
        return out

    def flatten(self, params) -> np.ndarray:
        get = params.get if isinstance(params, dict) else lambda n: getattr(params, n)
        return np.concatenate([np.asarray(get(n), dtype=np.float64).ravel() for n, _ in self.entries])

    def unflatten(self, vec) -> dict:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise DimensionError(f"expected a vector of length {self.size}, got {vec.shape}")
        sl = self.slices()
        return {n: vec[sl[n]].reshape(shape) for n, shape in self.entries}

    def index(self, name: str, row: int, col: int) -> int:
        shape = dict(self.entries)[name]
        return self.slices()[name].start + int(np.ravel_multi_index((row, col), shape))

    def locate(self, idx: int) -> tuple:
        for name, (r, c) in self.entries:
            if idx < r * c:
                i, j = divmod(idx, c)
                return name, i, j
            idx -= r * c
        raise IndexError("parameter index out of range")


def flatten(net) -> np.ndarray:
    return ParamLayout.of(net).flatten(net)


def with_params(net, vec):
    """Copy of ``net`` whose trainable weights are replaced by ``vec``."""
    new = net.copy()
    for name, value in ParamLayout.of(net).unflatten(vec).items():
        setattr(new, name, value.copy())
    return new


# ------------------------------------------------------------ initialisation


def init_linear(dims: LinearDims = LinearDims(), seed: int = 0, scale: float = 1e-3) -> LinearNet:
    """Small Gaussian weights, so that modes are learned one after another."""
    rng = np.random.default_rng(seed)
    return LinearNet(
        scale * rng.standard_normal((dims.n_in, dims.n_hid)),
        scale * rng.standard_normal((dims.n_hid, dims.n_out)),
    )


def init_standard(dims: TaskDims = TaskDims(), seed: int = 0) -> TaskNet:
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
    return TaskNet(
        u(dims.n_stim, dims.hidden),
        u(dims.n_tasks, dims.hidden),
        u(dims.hidden, dims.n_out),
        u(dims.n_tasks, dims.n_out),
    )


def init_pair(dims: TaskDims = TaskDims(), seed: int = 0, scope: str = "layer1",
              factor: float = LARGE_FACTOR) -> tuple:
    """Standard and large initialisations sharing one draw.

    ``scope="layer1"`` scales only the input-to-hidden weights; ``"all"``
    scales every trainable matrix.
    """
    std = init_standard(dims, seed)
    large = std.copy()
    names = {"layer1": ("w1", "w2"), "all": TaskNet.param_names}.get(scope)
    if names is None:
        raise ValueError(f"unknown scope {scope!r}")
    for n in names:
        setattr(large, n, factor * getattr(large, n))
    return std, large


def init_large(dims: TaskDims = TaskDims(), seed: int = 0, scope: str = "layer1") -> TaskNet:
    return init_pair(dims, seed, scope)[1]


# ------------------------------------------------------------ forward pass


def _batch(a) -> tuple:
    a = np.asarray(a, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def forward_linear(net: LinearNet, x) -> tuple:
    """Hidden layer and output; accepts one sample or a batch."""
    xb, single = _batch(x)
    if xb.shape[1] != net.w1.shape[0]:
        raise DimensionError(f"input width {xb.shape[1]} != {net.w1.shape[0]}")
    h = xb @ net.w1
    y = h @ net.w2
    return (h[0], y[0]) if single else (h, y)


def forward_task(net: TaskNet, x1, x2) -> tuple:
    b1, single = _batch(x1)
    b2, _ = _batch(x2)
    if b1.shape[1] != net.w1.shape[0] or b2.shape[1] != net.w2.shape[0] or len(b1) != len(b2):
        raise DimensionError(f"input shapes {b1.shape}, {b2.shape} do not fit the network")
    h = sigmoid(b1 @ net.w1 + b2 @ net.w2 + net.b1)
    y = sigmoid(h @ net.v1 + b2 @ net.v2 + net.b2)
    return (h[0], y[0]) if single else (h, y)


def forward(net, inputs) -> tuple:
    """``(hidden, output)`` for either network; task-net inputs are ``(stimuli, cues)``."""
    if isinstance(net, LinearNet):
        return forward_linear(net, inputs)
    if isinstance(net, TaskNet):
        return forward_task(net, *inputs)
    _check_net(net)


def predict(net, inputs) -> np.ndarray:
    return forward(net, inputs)[1]


def mse(pred, target) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


# ------------------------------------------------------------ gradients


def jacobian(net, inputs) -> np.ndarray:
    """Per-sample output Jacobian, shape ``(N, D, P)`` in :class:`ParamLayout` order."""
    if isinstance(net, LinearNet):
        x, _ = _batch(inputs)
        h, _ = forward_linear(net, x)
        n, d = len(x), net.w2.shape[1]
        # dy_o / dw1[i, j] = x_i w2[j, o];  dy_o / dw2[j, o'] = delta(o, o') h_j
        jw1 = np.einsum("ni,jo->noij", x, net.w2).reshape(n, d, -1)
        jw2 = np.einsum("nj,op->nojp", h, np.eye(d)).reshape(n, d, -1)
        return np.concatenate([jw1, jw2], axis=2)
    if isinstance(net, TaskNet):
        x1, _ = _batch(inputs[0])
        x2, _ = _batch(inputs[1])
        h, y = forward_task(net, x1, x2)
        s = y * (1 - y)
        g = h * (1 - h)
        d = y.shape[1]
        eye = np.eye(d)
        back = s[:, :, None] * net.v1.T[None] * g[:, None, :]  # (N, D, H)
        n = len(x1)
        jw1 = np.einsum("ni,noj->noij", x1, back).reshape(n, d, -1)
        jw2 = np.einsum("nt,noj->notj", x2, back).reshape(n, d, -1)
        jv1 = np.einsum("no,nj,op->nojp", s, h, eye).reshape(n, d, -1)
        jv2 = np.einsum("no,nt,op->notp", s, x2, eye).reshape(n, d, -1)
        return np.concatenate([jw1, jw2, jv1, jv2], axis=2)
    _check_net(net)


def per_output_grad(net, inputs) -> np.ndarray:
    """Gradient of every output unit for one sample, shape ``(D, P)``."""
    if isinstance(net, TaskNet):
        x1, x2 = inputs
        if np.ndim(x1) != 1:
            raise DimensionError("per_output_grad takes a single sample")
        return jacobian(net, (x1, x2))[0]
    if np.ndim(inputs) != 1:
        raise DimensionError("per_output_grad takes a single sample")
    return jacobian(net, inputs)[0]


def loss_and_grad(net, inputs, targets) -> tuple:
    """Loss, gradient dict, errors and hidden activity for a full batch."""
    targets = np.asarray(targets, dtype=np.float64)
    h, y = forward(net, inputs)
    if y.shape != targets.shape:
        raise DimensionError(f"targets {targets.shape} vs outputs {y.shape}")
    err = targets - y
    n, d = err.shape
    loss = float(np.mean(err**2))
    gy = -2.0 / (n * d) * err
    if isinstance(net, LinearNet):
        x = np.asarray(inputs, dtype=np.float64)
        grads = {"w1": x.T @ (gy @ net.w2.T), "w2": h.T @ gy}
    else:
        x1, x2 = inputs
        gz = gy * y * (1 - y)
        gh = (gz @ net.v1.T) * h * (1 - h)
        grads = {"w1": x1.T @ gh, "w2": x2.T @ gh, "v1": h.T @ gz, "v2": x2.T @ gz}
    return loss, grads, err, h


# ------------------------------------------------------------ training


Hook = Callable[[int, object, np.ndarray], None]


@dataclass
class TrainingTrace:
    """Loss curves, parameter checkpoints and group-averaged hidden activity.

    ``loss[k]`` is the training loss before update ``k``; the final entry is
    measured after the last update, so curves have ``epochs + 1`` points when
    recorded every epoch.
    """

    epochs: np.ndarray
    loss: np.ndarray
    test_loss: np.ndarray | None
    checkpoints: dict
    activation_epochs: np.ndarray
    activations: dict
    final: object
    lr: float = 0.0
    extras: dict = field(default_factory=dict)

    def checkpoint(self, epoch: int):
        if epoch not in self.checkpoints:
            raise ScheduleError(f"epoch {epoch} was not checkpointed")
        return with_params(self.final, self.checkpoints[epoch])


def _expand(epochs: int, every: int | None, extra: Sequence[int] = ()) -> set:
    out = set(int(e) for e in extra if 0 <= e <= epochs)
    if every:
        out.update(range(0, epochs + 1, every))
        out.add(epochs)
    return out


def sgd_train(
    net,
    data,
    lr: float,
    epochs: int,
    *,
    hooks: Sequence[Hook] = (),
    test=None,
    record_every: int = 1,
    checkpoint_epochs: Sequence[int] = (),
    probes: dict | None = None,
    activation_every: int | None = None,
    activation_at: Sequence[int] = (),
    batch_size: int | None = None,
    seed: int = 0,
) -> TrainingTrace:
    """Gradient descent on the mean squared error; biases stay fixed.

    ``data`` and the optional ``test`` set are anything with ``inputs`` and
    ``targets`` attributes (:class:`~pntk.envs.TrialSet`, ``Data``, ...).
    Each hook is called as ``hook(epoch, net, errors)`` just before the update,
    where ``errors`` is ``(N, D)`` over the full training set. With minibatches
    the errors outside the batch are zero and those inside are scaled by
    ``N / B``, so that ``lr * 2 / (N * D) * J^T errors`` is still the exact
    update. ``probes`` maps a name to an averaging matrix ``(G, N)`` applied to
    the hidden activity at every ``activation_every``-th epoch and at the
    epochs in ``activation_at``. The input network is not modified.
    """
    _check_net(net)
    if lr < 0 or epochs < 0:
        raise ValueError("lr and epochs must be non-negative")
    net = net.copy()
    layout = ParamLayout.of(net)
    inputs = data.inputs
    targets = np.asarray(data.targets, dtype=np.float64)
    n = len(targets)
    rec = _expand(epochs, record_every)
    ckpt = set(int(e) for e in checkpoint_epochs)
    act = _expand(epochs, activation_every, activation_at) if probes else set()
    rng = np.random.default_rng(seed)

    rec_epochs, losses, tests, acts_at = [], [], [], []
    acts = {k: [] for k in (probes or {})}
    checkpoints = {}

    def take(sub, idx):
        if isinstance(net, TaskNet):
            return (sub[0][idx], sub[1][idx])
        return np.asarray(sub)[idx]

    for epoch in range(epochs + 1):
        loss, grads, err, h = loss_and_grad(net, inputs, targets)
        if not np.isfinite(loss):
            raise NumericFailure(f"loss became {loss} at epoch {epoch} (lr={lr})")
        if epoch in rec:
            rec_epochs.append(epoch)
            losses.append(loss)
            if test is not None:
                tests.append(mse(predict(net, test.inputs), test.targets))
        if epoch in ckpt:
            checkpoints[epoch] = layout.flatten(net)
        if epoch in act:
            acts_at.append(epoch)
            for k, m in probes.items():
                acts[k].append(m @ h)
        if epoch == epochs:
            break
        if batch_size is None or batch_size >= n:
            for hook in hooks:
                hook(epoch, net, err)
            for name in net.param_names:
                setattr(net, name, getattr(net, name) - lr * grads[name])
            continue
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g_b, e_b, _ = loss_and_grad(net, take(inputs, idx), targets[idx])
            if hooks:
                full = np.zeros_like(targets)
                full[idx] = e_b * (n / len(idx))
                for hook in hooks:
                    hook(epoch, net, full)
            for name in net.param_names:
                setattr(net, name, getattr(net, name) - lr * g_b[name])

    return TrainingTrace(
        epochs=np.array(rec_epochs),
        loss=np.array(losses),
        test_loss=np.array(tests) if test is not None else None,
        checkpoints=checkpoints,
        activation_epochs=np.array(acts_at),
        activations={k: np.array(v) for k, v in acts.items()},
        final=net,
        lr=lr,
    )


# ------------------------------------------------------------ checkpoints


def net_to_dict(net) -> dict:
    _check_net(net)
    out = {
        "arch": net.arch,
        "layout": [[n, list(s)] for n, s in ParamLayout.of(net).entries],
        "theta": flatten(net).tolist(),
    }
    if isinstance(net, TaskNet):
        out["b1"], out["b2"] = net.b1, net.b2
    return out


def net_from_dict(d: dict):
    shapes = {n: tuple(s) for n, s in d["layout"]}
    if d["arch"] == "linear":
        net = LinearNet(np.zeros(shapes["w1"]), np.zeros(shapes["w2"]))
    elif d["arch"] == "task":
        net = TaskNet(*(np.zeros(shapes[n]) for n in TaskNet.param_names), d["b1"], d["b2"])
    else:
        raise UnsupportedArchitecture(f"unknown architecture {d['arch']!r}")
    return with_params(net, np.array(d["theta"], dtype=np.float64))


def save_checkpoint(path, net) -> None:
    """JSON with shortest round-trip float repr, so reloading is bit-identical."""
    with open(path, "w") as fh:
        json.dump(net_to_dict(net), fh)


def load_checkpoint(path):
    with open(path) as fh:
        return net_from_dict(json.load(fh))
