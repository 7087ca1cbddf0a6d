"""Tangent kernels, their loss-weighted path integral and the per-input-dimension split.

Conventions follow :mod:`pntk.model`: errors are ``y - yhat`` and one
gradient step moves the outputs by

    dyhat_a[o] = lr * 2 / (N * D) * sum_b sum_o' K_oo'(a, b) * err_b[o']

to first order, where ``K_oo'(a, b)`` is the dot product of the parameter
gradients of output ``o`` at sample ``a`` and output ``o'`` at sample ``b``.
The per-output kernel ``K_o`` is the diagonal block ``K_oo``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, UnsupportedArchitecture
from .model import LinearNet, TaskNet, forward, jacobian, predict


@dataclass
class KernelMatrix:
    output_unit: int
    t: int
    entries: np.ndarray


def _fwd(net, inputs):
    h, y = forward(net, inputs)
    if h.ndim == 1:
        raise DimensionError("kernel routines take batches of samples")
    return h, y


def _xx(net, xa, xb):
    """Input Gram term shared by every first-layer weight."""
    if isinstance(net, LinearNet):
        return np.asarray(xa) @ np.asarray(xb).T
    return xa[0] @ xb[0].T + xa[1] @ xb[1].T


# ------------------------------------------------------------ per-output NTK


def ntk_all(net, xa, xb=None) -> np.ndarray:
    """Per-output NTKs ``K_o(a, b)`` stacked into shape ``(D, Na, Nb)``."""
    xb = xa if xb is None else xb
    ha, ya = _fwd(net, xa)
    hb, yb = _fwd(net, xb)
    xx = _xx(net, xa, xb)
    if isinstance(net, LinearNet):
        w2sq = np.sum(net.w2**2, axis=0)
        return (ha @ hb.T)[None] + w2sq[:, None, None] * xx[None]
    if isinstance(net, TaskNet):
        sa, sb = ya * (1 - ya), yb * (1 - yb)
        ga, gb = ha * (1 - ha), hb * (1 - hb)
        top = ha @ hb.T + xa[1] @ xb[1].T
        out = np.empty((ya.shape[1], len(ga), len(gb)))
        for o in range(ya.shape[1]):
            v = net.v1[:, o]
            out[o] = np.outer(sa[:, o], sb[:, o]) * (top + ((ga * v) @ (gb * v).T) * xx)
        return out
    raise UnsupportedArchitecture(f"no kernel for {type(net).__name__}")


def ntk(net, x_test, x_train=None, output_unit: int = 0, t: int = 0) -> KernelMatrix:
    return KernelMatrix(output_unit, t, ntk_all(net, x_test, x_train)[output_unit])


def ntk_jacobian(net, xa, xb=None) -> np.ndarray:
    """Full cross-output kernel ``(D, D, Na, Nb)`` from explicit Jacobians (reference route)."""
    ja = jacobian(net, xa)
    jb = ja if xb is None else jacobian(net, xb)
    return np.einsum("aop,bqp->oqab", ja, jb)


def weighted_kernel(net, xa, xb, errors) -> np.ndarray:
    """Error-weighted kernel ``P_o(a, b) = sum_o' K_oo'(a, b) err_b[o']``, shape ``(D, Na, Nb)``.

    Summing over ``b`` and scaling by ``lr * 2 / (N * D)`` gives the first-order
    change of every output under one full-batch step.
    """
    errors = np.asarray(errors, dtype=np.float64)
    ha, ya = _fwd(net, xa)
    hb, yb = _fwd(net, xb)
    if errors.shape != yb.shape:
        raise DimensionError(f"errors {errors.shape} vs outputs {yb.shape}")
    xx = _xx(net, xa, xb)
    if isinstance(net, LinearNet):
        hh = ha @ hb.T
        mix = (net.w2.T @ net.w2 @ errors.T)  # (D, Nb)
        return hh[None] * errors.T[:, None, :] + xx[None] * mix[:, None, :]
    if isinstance(net, TaskNet):
        sa, sb = ya * (1 - ya), yb * (1 - yb)
        ga, gb = ha * (1 - ha), hb * (1 - hb)
        top = ha @ hb.T + xa[1] @ xb[1].T
        back = gb * ((sb * errors) @ net.v1.T)  # (Nb, H)
        out = np.empty((ya.shape[1], len(ga), len(gb)))
        for o in range(ya.shape[1]):
            out[o] = sa[:, o, None] * (
                top * (sb[:, o] * errors[:, o])[None] + ((ga * net.v1[:, o]) @ back.T) * xx
            )
        return out
    raise UnsupportedArchitecture(f"no kernel for {type(net).__name__}")


def ntk_one_step_predict(net, data, x_test, lr: float) -> np.ndarray:
    """Kernel prediction of the test-output change caused by one full-batch step."""
    err = np.asarray(data.targets) - predict(net, data.inputs)
    n, d = err.shape
    p = weighted_kernel(net, x_test, data.inputs, err)
    return lr * 2.0 / (n * d) * p.sum(axis=2).T


# ------------------------------------------------------------ path integral


@dataclass
class PNTKAccumulator:
    """Running loss-weighted kernel sum for a registered test set.

    ``entries[o, a, b]`` holds the contribution of training sample ``b`` to
    the change of output ``o`` at test sample ``a``. With ``stride > 1`` the
    kernel is evaluated every ``stride`` steps and scaled by ``stride``.
    """

    x_test: object
    x_train: object
    lr: float
    stride: int = 1
    entries: np.ndarray | None = None
    steps: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.stride < 1:
            raise ConfigError("accumulator needs lr > 0 and stride >= 1")

    def hook(self, epoch: int, net, errors) -> None:
        if epoch % self.stride == 0:
            pntk_step(self, net, errors, self.lr, weight=self.stride)

    def total(self) -> np.ndarray:
        """Predicted output change on the test set, ``(Nt, D)``."""
        if self.entries is None:
            return 0.0
        return self.entries.sum(axis=2).T


def pntk_step(acc: PNTKAccumulator, net, errors, lr: float, weight: float = 1.0) -> PNTKAccumulator:
    if lr != acc.lr:
        raise ConfigError(f"step lr {lr} differs from accumulator lr {acc.lr}")
    errors = np.asarray(errors, dtype=np.float64)
    n, d = errors.shape
    contrib = (weight * lr * 2.0 / (n * d)) * weighted_kernel(net, acc.x_test, acc.x_train, errors)
    acc.entries = contrib if acc.entries is None else acc.entries + contrib
    acc.steps += 1
    return acc


def output_range(y) -> float:
    y = np.asarray(y)
    r = float(y.max() - y.min())
    return r if r > 0 else 1.0


def pntk_identity_check(acc: PNTKAccumulator, net0, net_final, x_test=None) -> float:
    """Largest ``|yhat_final - yhat_0 - sum_b P|`` over the test set, relative to the output range."""
    x_test = acc.x_test if x_test is None else x_test
    y0 = predict(net0, x_test)
    y1 = predict(net_final, x_test)
    resid = y1 - y0 - acc.total()
    return float(np.max(np.abs(resid)) / output_range(y1))


# ------------------------------------------------------------ linear split


def ntk_decomposed(net, x_train, x_test, errors) -> np.ndarray:
    """Per-input-dimension split of the weighted kernel for the linear net.

    Returns ``D[i, j, k, l]`` with the test input masked to its ``i``-th
    coordinate, so that ``sum_i D[i, j, k, l] == P_l(k, j)`` and
    ``sum_j D[i, j, k, l] / x_k[i]`` is the same for every test point ``k``.
    """
    if not isinstance(net, LinearNet):
        raise UnsupportedArchitecture("the per-dimension split needs a linear network")
    xj = np.asarray(x_train, dtype=np.float64)
    xk = np.asarray(x_test, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    hj = xj @ net.w1
    a = xj[:, :, None] * (e @ net.w2.T @ net.w2)[:, None, :]  # (j, i, l)
    b = (hj @ net.w1.T)[:, :, None] * e[:, None, :]  # (j, i, l)
    return np.einsum("ki,jil->ijkl", xk, a + b)


@dataclass
class DecomposedAccumulator:
    """Running sum of :func:`ntk_decomposed` steps, indexed ``[i, j, k, l]``."""

    x_test: np.ndarray
    x_train: np.ndarray
    lr: float
    n_out: int = 5
    entries: np.ndarray = None
    steps: int = 0

    def __post_init__(self):
        n_in = np.shape(self.x_test)[1]
        self.entries = np.zeros((n_in, len(self.x_train), len(self.x_test), self.n_out))

    def hook(self, epoch: int, net, errors) -> None:
        errors = np.asarray(errors)
        n, d = errors.shape
        self.entries += (self.lr * 2.0 / (n * d)) * ntk_decomposed(net, self.x_train, self.x_test, errors)
        self.steps += 1


def delta_w_from_pntk(dec, x_test, k: int = 0) -> np.ndarray:
    """Estimated change of ``w1 @ w2`` read off test point ``k``."""
    x_test = np.asarray(x_test, dtype=np.float64)
    entries = dec.entries if isinstance(dec, DecomposedAccumulator) else np.asarray(dec)
    xk = x_test[k]
    if np.any(np.abs(xk) < 1e-8):
        raise DegenerateInputError(f"test point {k} has a near-zero coordinate")
    return entries[:, :, k, :].sum(axis=1) / xk[:, None]


# ------------------------------------------------------------ snapshots


@dataclass
class SnapshotMeta:
    output_unit: int
    epoch: int
    order: list = field(default_factory=list)
    sort_key: str = "none"


def save_kernel_snapshot(path, km: KernelMatrix, order=None, sort_key: str = "none") -> str:
    """Write the matrix as CSV and a JSON sidecar next to it; returns the sidecar path."""
    rows, cols = km.entries.shape
    order = list(range(rows)) if order is None else [int(i) for i in order]
    # a self-kernel is permuted on both axes, a test-by-train block on its rows only
    mat = km.entries[np.ix_(order, order)] if rows == cols else km.entries[order]
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")
    side = str(path).rsplit(".", 1)[0] + ".json"
    with open(side, "w") as fh:
        json.dump({"output_unit": km.output_unit, "epoch": km.t, "order": order,
                   "sort_key": sort_key, "shape": list(km.entries.shape)}, fh, sort_keys=True)
    return side


def load_kernel_snapshot(path) -> tuple:
    entries = np.loadtxt(path, delimiter=",", ndmin=2)
    side = str(path).rsplit(".", 1)[0] + ".json"
    with open(side) as fh:
        meta = json.load(fh)
    return KernelMatrix(meta["output_unit"], meta["epoch"], entries), SnapshotMeta(
        meta["output_unit"], meta["epoch"], meta["order"], meta["sort_key"])


@dataclass
class SnapshotRecorder:
    """Training hook recording kernel views of a registered test set at chosen epochs.

    ``ntk[e]`` is the one-step kernel prediction of the test-output change at
    epoch ``e`` and ``pntk[e]`` the accumulated path integral up to (not
    including) that step, both ``(Nt, D)``.
    """

    acc: PNTKAccumulator
    epochs: frozenset
    ntk: dict = field(default_factory=dict)
    pntk: dict = field(default_factory=dict)

    @classmethod
    def create(cls, x_test, x_train, lr, epochs, stride: int = 1) -> "SnapshotRecorder":
        return cls(PNTKAccumulator(x_test, x_train, lr, stride), frozenset(int(e) for e in epochs))

    def hook(self, epoch: int, net, errors) -> None:
        if epoch in self.epochs:
            errors = np.asarray(errors)
            n, d = errors.shape
            p = weighted_kernel(net, self.acc.x_test, self.acc.x_train, errors)
            self.ntk[epoch] = self.acc.lr * 2.0 / (n * d) * p.sum(axis=2).T
            total = self.acc.total()
            self.pntk[epoch] = np.zeros_like(self.ntk[epoch]) + total
        self.acc.hook(epoch, net, errors)
