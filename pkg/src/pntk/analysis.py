"""Analyses built on kernels and training traces.

Singular-mode tracking for the linear task, eigenvector views and grouping
predictions at initialisation, hidden-layer clustering over training and the
silhouette versus performance correlation study.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import TaskDims, TrialSet, group_membership, group_truth
from .errors import DegenerateInputError, InsufficientTrials, ScheduleError
from .kernel import ntk_all, weighted_kernel
from .model import predict
from .numerics import Partition, adjusted_rand, kmeans, pearson, silhouette, svd, sym_eig

TIE_GAP = 1e-6


# ------------------------------------------------------------ singular modes


@dataclass(frozen=True)
class ModeOverlap:
    epoch: int
    mode: int
    rank: int
    overlap: float
    source: str = "ntk"


def target_projections(w_target, x) -> tuple:
    """Unit-norm projections of the inputs onto each left singular vector of the target map.

    Returns ``(columns, singular_values)``; column ``r`` is ``x @ u_r`` normalised.
    """
    res = svd(np.asarray(w_target))
    p = np.asarray(x) @ res.u
    norms = np.linalg.norm(p, axis=0)
    return p / np.where(norms > 0, norms, 1.0), res.s


def _tie_groups(s) -> list:
    """Indices of target modes whose singular values coincide within a relative gap."""
    groups, cur = [], [0]
    for r in range(1, len(s)):
        if abs(s[r - 1] - s[r]) <= TIE_GAP * max(abs(s[0]), 1e-300):
            cur.append(r)
        else:
            groups.append(cur)
            cur = [r]
    groups.append(cur)
    return groups


def _overlap_matrix(vecs, proj, s) -> np.ndarray:
    """``|cos|`` of each vector with each mode, or with its tied subspace when modes coincide."""
    out = np.empty((vecs.shape[1], proj.shape[1]))
    for g in _tie_groups(s):
        q, _ = np.linalg.qr(proj[:, g])
        norms = np.linalg.norm(q.T @ vecs, axis=0)
        for r in g:
            out[:, r] = norms
    return np.clip(out, 0.0, 1.0)


def mode_overlap_track(snapshots: dict, w_target, x_test, ranks=(1, 2), epochs=None,
                       source: str = "ntk") -> np.ndarray:
    """Overlap of the leading left singular vectors of each snapshot with the target modes.

    ``snapshots`` maps an epoch to a ``(Nt, D)`` matrix of kernel-predicted
    output changes on ``x_test``. Returns an array ``(n_epochs, len(ranks), n_modes)``.
    """
    epochs = sorted(snapshots) if epochs is None else list(epochs)
    missing = [e for e in epochs if e not in snapshots]
    if missing:
        raise ScheduleError(f"no kernel snapshot at epochs {missing[:5]}")
    proj, s = target_projections(w_target, x_test)
    idx = [r - 1 for r in ranks]
    out = np.zeros((len(epochs), len(ranks), proj.shape[1]))
    for t, e in enumerate(epochs):
        m = np.asarray(snapshots[e])
        if not np.any(m):
            continue
        u = svd(m).u
        out[t] = _overlap_matrix(u[:, idx], proj, s)
    return out


def overlap_records(track: np.ndarray, epochs, ranks=(1, 2), source: str = "ntk") -> list:
    return [
        ModeOverlap(int(e), mode, rank, float(track[t, i, mode]), source)
        for t, e in enumerate(epochs)
        for i, rank in enumerate(ranks)
        for mode in range(track.shape[2])
    ]


def first_crossing(track: np.ndarray, epochs, rank_index: int, mode: int, level: float = 0.9):
    """First epoch at which the given rank overlaps ``mode`` at least ``level``, or ``None``."""
    hit = np.flatnonzero(track[:, rank_index, mode] >= level)
    return int(np.asarray(epochs)[hit[0]]) if hit.size else None


@dataclass
class SwitchReport:
    primary: list
    secondary: list
    paired: list = field(default_factory=list)


def _switches(series, epochs, level: float) -> list:
    """Changes of the locked mode; a mode locks once its overlap reaches ``level``."""
    out, cur = [], None
    for t in range(len(series)):
        m = int(np.argmax(series[t]))
        if series[t, m] >= level and m != cur:
            if cur is not None:
                out.append((int(epochs[t]), cur, m))
            cur = m
    return out


def secondary_switch_detect(track: np.ndarray, epochs, level: float = 0.9,
                            window: float = 0.1) -> SwitchReport:
    """Epochs where the primary and secondary directions lock onto a new target mode.

    Each entry is ``(epoch, old_mode, new_mode)``. A secondary switch is
    ``paired`` when a primary switch lies within ``window`` times the run length.
    """
    epochs = np.asarray(epochs)
    prim = _switches(track[:, 0], epochs, level)
    sec = _switches(track[:, 1], epochs, level) if track.shape[1] > 1 else []
    span = window * max(int(epochs[-1] - epochs[0]), 1)
    paired = [any(abs(e - p[0]) <= span for p in prim) for e, _, _ in sec]
    return SwitchReport(prim, sec, paired)


def lock_epochs(track: np.ndarray, epochs, rank_index: int = 0, level: float = 0.9) -> list:
    """Epochs at which a rank first locks onto each new mode, the initial lock included."""
    out, cur = [], None
    for t, e in enumerate(epochs):
        m = int(np.argmax(track[t, rank_index]))
        if track[t, rank_index, m] >= level and m != cur:
            out.append(int(e))
            cur = m
    return out


def subspace_overlap(snapshot, w_target, x_test, r: int = 3) -> np.ndarray:
    """Norm of each target-mode projection inside the top-``r`` left singular subspace of a snapshot."""
    proj, _ = target_projections(w_target, x_test)
    u = svd(np.asarray(snapshot)).u[:, :r]
    return np.clip(np.linalg.norm(u.T @ proj, axis=0), 0.0, 1.0)


def drops_follow_rises(windows, rises, span: float, lag: float = 0.1) -> list:
    """For each loss-drop window, whether an overlap rise falls inside it or at most ``lag * span`` before it."""
    return [any(a - lag * span <= e <= b for e in rises) for a, b in windows]


# ------------------------------------------------------------ loss tiers


@dataclass
class Tier:
    plateau_start: int
    drop_start: int
    drop_end: int


def detect_tiers(loss, epochs=None, threshold: float = 0.2, min_plateau: float = 0.02,
                 smooth: int = 5) -> list:
    """Plateau-then-drop segments of a loss curve.

    Works on the slope of ``log(loss)``. A drop is a maximal run where the
    decay rate exceeds ``threshold`` times its peak; it counts as a tier when
    the preceding stretch of slow decay lasts at least ``min_plateau`` of the
    run. Drops separated by short gaps are merged.
    """
    loss = np.asarray(loss, dtype=np.float64)
    epochs = np.arange(len(loss)) if epochs is None else np.asarray(epochs)
    if len(loss) < 3:
        return []
    rate = -np.gradient(np.log(np.maximum(loss, 1e-300)), epochs)
    if smooth > 1:
        rate = np.convolve(rate, np.ones(smooth) / smooth, mode="same")
    peak = rate.max()
    if peak <= 0:
        return []
    fast = rate > threshold * peak
    span = epochs[-1] - epochs[0]
    runs, start = [], None
    for i, f in enumerate(fast):
        if f and start is None:
            start = i
        if not f and start is not None:
            runs.append([start, i - 1])
            start = None
    if start is not None:
        runs.append([start, len(fast) - 1])
    merged = []
    for r in runs:
        if merged and epochs[r[0]] - epochs[merged[-1][1]] < min_plateau * span:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    tiers, prev_end = [], 0
    for a, b in merged:
        if epochs[a] - epochs[prev_end] >= min_plateau * span:
            tiers.append(Tier(int(epochs[prev_end]), int(epochs[a]), int(epochs[b])))
        prev_end = b
    return tiers


def drop_windows(loss, epochs, quantile: float = 0.75) -> list:
    """Epoch intervals where the log-loss decays in its top quartile of speed."""
    epochs = np.asarray(epochs)
    rate = -np.gradient(np.log(np.maximum(np.asarray(loss, dtype=float), 1e-300)), epochs)
    fast = rate >= np.quantile(rate, quantile)
    out, start = [], None
    for i, f in enumerate(fast):
        if f and start is None:
            start = i
        if (not f or i == len(fast) - 1) and start is not None:
            end = i if f else i - 1
            out.append((int(epochs[start]), int(epochs[end])))
            start = None
    return out


# ------------------------------------------------------------ eigenvector views


SORT_KEYS = ("by_task", "by_input", "by_stimulus", "none")


def sort_labels(trials: TrialSet, sort: str) -> np.ndarray:
    """Group label of every sample under a sort key.

    ``by_input`` uses the within-pool feature of the task-relevant pool and
    ``by_stimulus`` the full stimulus pattern. ``none`` cuts the unsorted
    sample order into consecutive blocks with the same sizes as the task
    groups, which is the control view.
    """
    task = trials.primary_task
    if sort == "by_task":
        return task
    if sort == "by_input":
        return trials.relevant_feature()
    if sort == "by_stimulus":
        m = trials.dims.m
        return trials.features @ (m ** np.arange(trials.features.shape[1]))
    if sort == "none":
        sizes = np.bincount(task, minlength=trials.dims.n_tasks)
        return np.repeat(np.arange(len(sizes)), sizes)
    raise ValueError(f"unknown sort key {sort!r}")


@dataclass
class GroupedView:
    order: np.ndarray
    entries: np.ndarray
    boundaries: list
    group_means: np.ndarray
    quality: float
    null_mean: float
    null_sd: float
    degenerate: bool = False


def _quality(v, labels) -> float:
    return silhouette(v[:, None], Partition.from_labels(labels))


def eigvec_grouped_view(kernel, trials: TrialSet, sort: str, n_null: int = 100,
                        seed: int = 0, vector: int = 0) -> GroupedView:
    """Leading eigenvector of a self-kernel, ordered and scored by a grouping.

    The score is the silhouette of the 1-D eigenvector entries under the
    grouping; ``null_mean`` and ``null_sd`` come from shuffled labels.
    """
    k = getattr(kernel, "entries", kernel)
    labels = sort_labels(trials, sort)
    v = sym_eig(k).vectors[:, vector]
    order = np.lexsort((np.arange(len(labels)), labels))
    lab_sorted = labels[order]
    bounds = [int(i) for i in np.flatnonzero(np.diff(lab_sorted)) + 1]
    uniq = np.unique(labels)
    means = np.array([v[labels == g].mean() for g in uniq])
    if np.ptp(v) <= 1e-12 * max(np.max(np.abs(v)), 1e-300):
        return GroupedView(order, v[order], bounds, means, float("nan"), float("nan"),
                           float("nan"), degenerate=True)
    rng = np.random.default_rng(seed)
    null = [_quality(v, rng.permutation(labels)) for _ in range(n_null)]
    return GroupedView(order, v[order], bounds, means, _quality(v, labels),
                       float(np.mean(null)), float(np.std(null)))


@dataclass
class QualityReport:
    quality: float
    null_mean: float
    null_sd: float
    per_output: np.ndarray

    @property
    def z(self) -> float:
        return (self.quality - self.null_mean) / self.null_sd if self.null_sd > 0 else float("nan")


def grouped_quality(kernels, trials: TrialSet, sort: str, n_null: int = 100, seed: int = 0,
                    vector: int = 0, vectors=None) -> QualityReport:
    """Grouping quality averaged over per-output kernels, with a shuffle null for that average.

    Each null draw permutes the labels once and scores every output under the
    same permutation. Precomputed eigenvectors may be passed as ``vectors``.
    """
    labels = sort_labels(trials, sort)
    vecs = vectors if vectors is not None else [
        sym_eig(getattr(k, "entries", k)).vectors[:, vector] for k in kernels]
    per = np.array([_quality(v, labels) for v in vecs])
    rng = np.random.default_rng(seed)
    null = []
    for _ in range(n_null):
        perm = rng.permutation(labels)
        null.append(np.mean([_quality(v, perm) for v in vecs]))
    return QualityReport(float(per.mean()), float(np.mean(null)), float(np.std(null)), per)


# ------------------------------------------------------------ grouping predictions


@dataclass
class GroupingPrediction:
    scheme: str
    labels: np.ndarray
    k: int
    source: str = "one_step"

    @property
    def partition(self) -> Partition:
        return Partition.from_labels(self.labels)


def one_step_change(net, trials: TrialSet) -> np.ndarray:
    """Loss-weighted one-step kernel prediction of every training output, ``(N, D)``.

    Up to the factor ``lr * 2 / (N * D)`` this is the path-integrated kernel
    after its first step.
    """
    err = trials.targets - predict(net, trials.inputs)
    return weighted_kernel(net, trials.inputs, trials.inputs, err).sum(axis=2).T


def _task_features(delta, trials):
    return group_membership(trials, "task") @ delta


def _input_features(delta, trials):
    """Contrast of each stimulus unit within the output pool of every task that reads it."""
    d = trials.dims
    task = trials.primary_task
    feat = trials.relevant_feature()
    out = np.zeros((d.n_stim, d.n_out))
    for t in range(d.n_tasks):
        ip, op = divmod(t, d.g2)
        cols = slice(op * d.m, (op + 1) * d.m)
        sel = task == t
        if not np.any(sel):
            continue
        base = delta[sel][:, cols].mean(axis=0)
        for f in range(d.m):
            cell = sel & (feat == f)
            if np.any(cell):
                out[ip * d.m + f, cols] = delta[cell][:, cols].mean(axis=0) - base
    return out


def _vote(sample_labels, item_of_sample, n_items):
    out = np.zeros(n_items, dtype=np.int64)
    for i in range(n_items):
        sel = sample_labels[item_of_sample == i]
        out[i] = np.bincount(sel).argmax() if sel.size else 0
    return out


def grouping_predict(trials: TrialSet, scheme: str, *, delta=None, kernels=None,
                     method: str = "aggregate", top_k: int = 3, seed: int = 0) -> GroupingPrediction:
    """Predict how tasks (``by_task``) or stimulus units (``by_input``) group.

    ``method="aggregate"`` averages the one-step prediction ``delta`` over the
    samples of each item and clusters the items. ``method="sample_vote"``
    clusters samples on the top ``top_k`` eigenvectors of every per-output
    kernel and maps sample clusters to items by majority vote.
    """
    d = trials.dims
    if scheme == "by_task":
        k, n_items = d.g2, d.n_tasks
        item = trials.primary_task
    elif scheme == "by_input":
        k, n_items = d.m, d.n_stim
        item = (trials.primary_task // d.g2) * d.m + trials.relevant_feature()
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if method == "aggregate":
        if delta is None:
            raise ValueError("aggregate prediction needs the one-step change")
        f = _task_features(delta, trials) if scheme == "by_task" else _input_features(delta, trials)
        labels = kmeans(f, k, seed=seed).labels
    elif method == "sample_vote":
        if kernels is None:
            raise ValueError("sample_vote prediction needs the per-output kernels")
        f = kernel_features(kernels, top_k)
        labels = _vote(kmeans(f, k, seed=seed).labels, item, n_items)
    else:
        raise ValueError(f"unknown method {method!r}")
    return GroupingPrediction(scheme, Partition.from_labels(labels).labels, k, method)


def hidden_analogue(pred: GroupingPrediction, dims: TaskDims, min_ari: float = 0.9) -> np.ndarray:
    """Partition the hidden layer is expected to show for a given prediction.

    Hidden units never see output pools, so a task grouping that follows the
    output pools maps to the grouping of tasks by input pool. Stimulus-unit
    predictions carry over unchanged.
    """
    if pred.scheme == "by_input":
        return pred.labels
    ari = adjusted_rand(pred.labels, group_truth(dims, "task", "output_pool"))
    if ari < min_ari:
        raise DegenerateInputError(f"task prediction does not follow output pools (ARI {ari:.2f})")
    return group_truth(dims, "task", "input_pool")


def kernel_features(kernels, top_k: int = 3) -> np.ndarray:
    """Per-sample features: the leading ``top_k`` eigenvector entries of every per-output kernel."""
    return np.hstack([sym_eig(k).vectors[:, :top_k] for k in kernels])


def t0_silhouette(net, trials: TrialSet, k: int = 12, top_k: int = 3, seed: int = 0) -> float:
    """Clustering quality of the initial kernel: k-means silhouette on :func:`kernel_features`."""
    f = kernel_features(ntk_all(net, trials.inputs), top_k)
    return silhouette(f, kmeans(f, k, seed=seed))


# ------------------------------------------------------------ hidden clusters


@dataclass
class HiddenClusters:
    epochs: np.ndarray
    partitions: list
    silhouettes: np.ndarray
    degenerate: np.ndarray


def hidden_rep_clusters(trace, grouping: str, k: int, seed: int = 0,
                        rel_spread: float = 1e-6) -> HiddenClusters:
    """k-means on the group-averaged hidden activity at every recorded epoch.

    Epochs whose averages are nearly identical are flagged as degenerate.
    """
    if grouping not in trace.activations:
        raise ScheduleError(f"trace holds no {grouping!r} activations")
    parts, sils, flags = [], [], []
    for a in trace.activations[grouping]:
        p = kmeans(a, k, seed=seed)
        centred = a - a.mean(axis=0)
        spread = np.sqrt(np.mean(np.sum(centred**2, axis=1)))
        scale = max(np.sqrt(np.mean(np.sum(a**2, axis=1))), 1e-300)
        flags.append(bool(spread <= rel_spread * scale))
        sils.append(silhouette(a, p) if k >= 2 and np.all(p.sizes() > 0) else float("nan"))
        parts.append(p)
    return HiddenClusters(trace.activation_epochs, parts, np.array(sils), np.array(flags))


def rand_curve(pred, clusters) -> np.ndarray:
    """Adjusted Rand index between a fixed partition and each partition in a sequence."""
    labels = pred.labels if hasattr(pred, "labels") else np.asarray(pred)
    parts = clusters.partitions if isinstance(clusters, HiddenClusters) else clusters
    return np.array([adjusted_rand(labels, p) for p in parts])


# ------------------------------------------------------------ correlation study


@dataclass
class ExperimentRecord:
    trial: int
    condition: str
    silhouette: float
    single_loss: float
    multi_loss: float
    single_delta: float = 0.0
    multi_delta: float = 0.0


def paired_records(trial: int, sil, single, multi) -> list:
    """Two records for a standard/large pair; deltas are own loss minus partner loss."""
    s, l = ExperimentRecord(trial, "standard", sil[0], single[0], multi[0]), \
        ExperimentRecord(trial, "large", sil[1], single[1], multi[1])
    s.single_delta, l.single_delta = s.single_loss - l.single_loss, l.single_loss - s.single_loss
    s.multi_delta, l.multi_delta = s.multi_loss - l.multi_loss, l.multi_loss - s.multi_loss
    return [s, l]


def silhouette_correlation_study(records: list, variant: str = "difference") -> tuple:
    """Pearson correlation of initial silhouette with final single-task and multitask loss.

    ``difference`` uses each network's loss relative to its pair partner,
    ``absolute`` the raw losses.
    """
    if len({r.trial for r in records}) < 2:
        raise InsufficientTrials("the correlation study needs at least two paired trials")
    sil = [r.silhouette for r in records]
    if variant == "difference":
        a, b = [r.single_delta for r in records], [r.multi_delta for r in records]
    elif variant == "absolute":
        a, b = [r.single_loss for r in records], [r.multi_loss for r in records]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return pearson(sil, a), pearson(sil, b)
