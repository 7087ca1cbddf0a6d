"""Training environments: the linear-regression mode task and the pooled multitask setting.

The multitask environment has ``g1`` stimulus pools and ``g2`` response pools
of ``m`` units each. Task ``t`` maps the active feature of input pool
``t // g2`` onto the same position of output pool ``t % g2``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class LinearDims:
    n_in: int = 4
    n_hid: int = 3
    n_out: int = 5


@dataclass(frozen=True)
class TaskDims:
    g1: int = 4
    g2: int = 3
    m: int = 3
    hidden: int = 200

    def __post_init__(self):
        if min(self.g1, self.g2, self.m, self.hidden) < 1:
            raise DimensionError(f"all dimensions must be positive: {self}")

    @property
    def n_tasks(self) -> int:
        return self.g1 * self.g2

    @property
    def n_stim(self) -> int:
        return self.g1 * self.m

    @property
    def n_out(self) -> int:
        return self.g2 * self.m


@dataclass(frozen=True)
class TaskDef:
    id: int
    input_pool: int
    output_pool: int


def task_def(dims: TaskDims, task_id: int) -> TaskDef:
    if not 0 <= task_id < dims.n_tasks:
        raise ValueError(f"task id {task_id} out of range")
    ip, op = divmod(task_id, dims.g2)
    return TaskDef(task_id, ip, op)


def task_id(dims: TaskDims, input_pool: int, output_pool: int) -> int:
    return input_pool * dims.g2 + output_pool


@dataclass
class Data:
    """Plain (inputs, targets) pair accepted by the trainer and kernel routines."""

    inputs: object
    targets: np.ndarray


# ------------------------------------------------------------------ SMG data


@dataclass
class SmgDataset:
    """White-noise regression data ``y = x @ w_target`` plus a fresh test split."""

    w_target: np.ndarray
    x: np.ndarray
    y: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def inputs(self):
        return self.x

    @property
    def targets(self):
        return self.y

    @property
    def test(self) -> Data:
        return Data(self.x_test, self.y_test)


def _derived_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def gen_smg(
    seed: int,
    n: int = 100,
    dims: LinearDims = LinearDims(),
    n_test: int = 100,
    singular_values=None,
) -> SmgDataset:
    """Sample a target map and white-noise inputs.

    By default ``w_target`` has i.i.d. standard normal entries. Passing
    ``singular_values`` builds it as ``U diag(s) V^T`` with Haar-random
    orthogonal factors instead, which controls the spectral gaps.
    """
    if n < 1 or n_test < 1:
        raise ValueError("need at least one training and one test sample")
    rng = _derived_rng(seed, 0)
    if singular_values is None:
        w = rng.standard_normal((dims.n_in, dims.n_out))
    else:
        s = np.asarray(singular_values, dtype=np.float64)
        r = min(dims.n_in, dims.n_out)
        if len(s) != r:
            raise DimensionError(f"expected {r} singular values, got {len(s)}")
        u = random_orthogonal(dims.n_in, rng)[:, :r]
        v = random_orthogonal(dims.n_out, rng)[:, :r]
        w = u @ np.diag(s) @ v.T
    x = rng.standard_normal((n, dims.n_in))
    x_test = _derived_rng(seed, 1).standard_normal((n_test, dims.n_in))
    return SmgDataset(w, x, x @ w, x_test, x_test @ w)


# ------------------------------------------------------------ multitask data


@dataclass
class TrialSet:
    """Stimuli, task cues and targets with per-sample grouping metadata.

    ``features[n, p]`` is the active position in stimulus pool ``p`` and
    ``tasks[n]`` the tuple of cued task ids for sample ``n``.
    """

    dims: TaskDims
    stimuli: np.ndarray
    cues: np.ndarray
    targets: np.ndarray
    features: np.ndarray
    tasks: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stimuli)

    @property
    def inputs(self):
        return (self.stimuli, self.cues)

    @property
    def primary_task(self) -> np.ndarray:
        """First cued task of every sample (the only one for single-task sets)."""
        return np.array([t[0] for t in self.tasks], dtype=np.int64)

    def relevant_feature(self) -> np.ndarray:
        """Active position in the input pool of the primary task."""
        ip = self.primary_task // self.dims.g2
        return self.features[np.arange(len(self)), ip]

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx)
        return TrialSet(
            self.dims,
            self.stimuli[idx],
            self.cues[idx],
            self.targets[idx],
            self.features[idx],
            [self.tasks[i] for i in idx.tolist()],
        )


def build_trials(dims: TaskDims, features: np.ndarray, tasks: list) -> TrialSet:
    """Construct the input and target patterns implied by feature and task metadata."""
    features = np.asarray(features, dtype=np.int64)
    n = len(features)
    stimuli = np.zeros((n, dims.n_stim))
    cues = np.zeros((n, dims.n_tasks))
    targets = np.zeros((n, dims.n_out))
    rows = np.arange(n)
    for p in range(dims.g1):
        stimuli[rows, p * dims.m + features[:, p]] = 1.0
    for i, combo in enumerate(tasks):
        for t in combo:
            ip, op = divmod(t, dims.g2)
            cues[i, t] = 1.0
            targets[i, op * dims.m + features[i, ip]] = 1.0
    return TrialSet(dims, stimuli, cues, targets, features, [tuple(c) for c in tasks])


def is_legal(dims: TaskDims, combo) -> bool:
    ins = [t // dims.g2 for t in combo]
    outs = [t % dims.g2 for t in combo]
    return len(set(ins)) == len(ins) and len(set(outs)) == len(outs)


@lru_cache(maxsize=None)
def _legal_combos(g1: int, g2: int, k: int) -> tuple:
    # choose k distinct input pools and an injective map onto output pools
    combos = []
    for ins in itertools.combinations(range(g1), k):
        for outs in itertools.permutations(range(g2), k):
            combos.append(tuple(sorted(i * g2 + o for i, o in zip(ins, outs))))
    return tuple(sorted(combos))


def legal_combos(dims: TaskDims, k: int) -> list:
    """All size-``k`` task sets sharing neither an input pool nor an output pool."""
    if not 1 <= k <= min(dims.g1, dims.g2):
        raise ValueError(f"k must be in [1, {min(dims.g1, dims.g2)}], got {k}")
    return list(_legal_combos(dims.g1, dims.g2, k))


def gen_single_task_trials(seed: int, n: int = 500, dims: TaskDims = TaskDims()) -> TrialSet:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    features = rng.integers(0, dims.m, size=(n, dims.g1))
    tasks = [(int(t),) for t in rng.integers(0, dims.n_tasks, size=n)]
    return build_trials(dims, features, tasks)


def gen_multitask_trials(
    seed: int, n: int = 500, dims: TaskDims = TaskDims(), sizes=(1, 2, 3)
) -> TrialSet:
    """Samples cue 1, 2 or 3 tasks with equal probability, drawn uniformly among legal sets."""
    if n < 1:
        raise ValueError("n must be positive")
    sizes = [k for k in sizes if k <= min(dims.g1, dims.g2)]
    rng = np.random.default_rng(seed)
    features = rng.integers(0, dims.m, size=(n, dims.g1))
    ks = rng.choice(sizes, size=n)
    tasks = []
    for k in ks:
        pool = _legal_combos(dims.g1, dims.g2, int(k))
        tasks.append(pool[rng.integers(len(pool))])
    return build_trials(dims, features, tasks)


# -------------------------------------------------------------- grouping


GROUPINGS = ("task", "input", "output", "task_input")


def group_membership(trials: TrialSet, grouping: str) -> np.ndarray:
    """Row-normalised (n_groups, n_samples) averaging matrix.

    ``task``: one item per task. ``input``: one item per stimulus unit
    (pool, position), using the task-relevant pool. ``output``: one item per
    output unit that the sample must activate. ``task_input``: task by
    relevant feature. Multitask samples join every group they touch.
    """
    d = trials.dims
    n = len(trials)
    if grouping == "task":
        m = trials.cues.T.copy()
    elif grouping == "input":
        m = np.zeros((d.n_stim, n))
        for i, combo in enumerate(trials.tasks):
            for t in combo:
                ip = t // d.g2
                m[ip * d.m + trials.features[i, ip], i] = 1.0
    elif grouping == "output":
        m = (trials.targets.T > 0).astype(np.float64)
    elif grouping == "task_input":
        m = np.zeros((d.n_tasks * d.m, n))
        for i, combo in enumerate(trials.tasks):
            for t in combo:
                m[t * d.m + trials.features[i, t // d.g2], i] = 1.0
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    counts = m.sum(axis=1, keepdims=True)
    return np.divide(m, counts, out=np.zeros_like(m), where=counts > 0)


def group_truth(dims: TaskDims, grouping: str, scheme: str) -> np.ndarray:
    """Reference labels for the items of ``grouping`` under a structural ``scheme``.

    Schemes: ``input_pool``, ``output_pool``, ``position``.
    """
    if grouping == "task":
        items = [(t // dims.g2, t % dims.g2, None) for t in range(dims.n_tasks)]
    elif grouping == "input":
        items = [(u // dims.m, None, u % dims.m) for u in range(dims.n_stim)]
    elif grouping == "output":
        items = [(None, u // dims.m, u % dims.m) for u in range(dims.n_out)]
    elif grouping == "task_input":
        items = [
            (t // dims.g2, t % dims.g2, f) for t in range(dims.n_tasks) for f in range(dims.m)
        ]
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    pick = {"input_pool": 0, "output_pool": 1, "position": 2}[scheme]
    labels = [it[pick] for it in items]
    if any(lab is None for lab in labels):
        raise ValueError(f"scheme {scheme!r} is undefined for grouping {grouping!r}")
    return np.array(labels, dtype=np.int64)


# ------------------------------------------------------------------ CSV


def _vec(a) -> str:
    return " ".join(repr(float(v)) if float(v) != int(v) else str(int(v)) for v in a)


def write_trials_csv(path, trials: TrialSet) -> None:
    d = trials.dims
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "task_ids", "input_pools", "output_pools", "features",
                    "stimulus", "cues", "target", "dims"])
        dims_txt = f"{d.g1} {d.g2} {d.m} {d.hidden}"
        for i in range(len(trials)):
            combo = trials.tasks[i]
            w.writerow([
                i,
                " ".join(str(t) for t in combo),
                " ".join(str(t // d.g2) for t in combo),
                " ".join(str(t % d.g2) for t in combo),
                " ".join(str(f) for f in trials.features[i]),
                _vec(trials.stimuli[i]),
                _vec(trials.cues[i]),
                _vec(trials.targets[i]),
                dims_txt,
            ])


def read_trials_csv(path) -> TrialSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no trials")
    g1, g2, m, hidden = (int(v) for v in rows[0]["dims"].split())
    dims = TaskDims(g1, g2, m, hidden)
    features = np.array([[int(v) for v in r["features"].split()] for r in rows])
    tasks = [tuple(int(v) for v in r["task_ids"].split()) for r in rows]
    trials = build_trials(dims, features, tasks)
    stored = np.array([[float(v) for v in r["target"].split()] for r in rows])
    if not np.array_equal(stored, trials.targets):
        raise ValueError(f"{path}: targets disagree with task metadata")
    return trials
