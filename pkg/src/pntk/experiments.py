"""Named experiments: configs, seeded trials, artifact files and the run manifest.

Every experiment writes into one output directory:

* ``trial_<seed>/`` with per-trial ``trace.csv`` and kernel snapshots,
* figure-named CSVs holding the plotted quantities,
* ``summary.json`` with scalar metrics, and
* ``manifest.json`` listing every artifact with its SHA-256.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as an
from .envs import (
    LinearDims,
    TaskDims,
    gen_multitask_trials,
    gen_single_task_trials,
    gen_smg,
    group_membership,
    group_truth,
)
from .errors import ConfigError, DegenerateInputError, InsufficientTrials
from .kernel import (
    DecomposedAccumulator,
    KernelMatrix,
    PNTKAccumulator,
    SnapshotRecorder,
    delta_w_from_pntk,
    ntk,
    ntk_all,
    pntk_identity_check,
    save_kernel_snapshot,
)
from .model import LARGE_FACTOR, init_linear, init_pair, sgd_train
from .numerics import adjusted_rand, svd, sym_eig

EXPERIMENTS = ("smg", "init-compare", "finetune", "correlate", "grouping")
INIT_MODES = ("standard", "large", "paired")
CURRICULA = ("single", "multitask", "single-then-multitask")
SCOPES = ("layer1", "all")
INPUT_SORTS = ("feature", "stimulus")
TEST_SEED_OFFSET = 10**6

LINEAR_KEYS = ("n_in", "n_hid", "n_out")
TASK_KEYS = ("g1", "g2", "m", "hidden")


@dataclass
class ExperimentConfig:
    experiment: str
    dims: dict
    seeds: list
    lr: float
    epochs: int
    init_mode: str = "paired"
    large_scope: str = "layer1"
    large_factor: float = LARGE_FACTOR
    curriculum: str = "single-then-multitask"
    snapshot_epochs: list = field(default_factory=list)
    out_dir: str = "runs"
    n_train: int = 500
    n_test: int = 500
    record_every: int = 1
    workers: int = 1
    scale: float = 1.0
    # linear task
    singular_values: list | None = None
    init_scale: float = 1e-3
    compare_epochs: list = field(default_factory=list)
    kernel_outputs: list = field(default_factory=lambda: [0])
    # task network
    multi_epochs: int | None = None
    std_lr_factor: float = 1.0
    protocols: dict = field(default_factory=lambda: {"base": {}})
    pntk_stride: int = 10
    pntk_probe: int = 50
    n_null: int = 100
    input_sort: str = "feature"
    kernel_seeds: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "experiment" not in d:
            raise ConfigError("config needs an experiment name")
        merged = {**default_config_dict(d["experiment"]), **d}
        try:
            cfg = cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        validate(cfg)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


_DEFAULTS = {
    "smg": dict(dims={"n_in": 4, "n_hid": 3, "n_out": 5}, seeds=list(range(5)), lr=0.05, epochs=1500,
                init_mode="standard", curriculum="single", n_train=100, n_test=100,
                singular_values=[3.0, 1.0, 0.3, 0.0], compare_epochs=[190, 770],
                snapshot_epochs=list(range(0, 1500, 10))),
    "init-compare": dict(dims={"g1": 4, "g2": 3, "m": 3, "hidden": 200}, seeds=list(range(10)), lr=60.0,
                         epochs=10000, curriculum="single", record_every=100,
                         snapshot_epochs=sorted(set(range(0, 50, 5)) | set(range(50, 500, 50))
                                                | set(range(500, 10001, 250)))),
    "grouping": dict(dims={"g1": 4, "g2": 3, "m": 3, "hidden": 200}, seeds=list(range(10)), lr=60.0,
                     epochs=1, curriculum="single"),
    "finetune": dict(dims={"g1": 4, "g2": 3, "m": 3, "hidden": 200}, seeds=list(range(10)), lr=60.0,
                     epochs=10000, record_every=10),
    "correlate": dict(dims={"g1": 4, "g2": 3, "m": 3, "hidden": 200}, seeds=list(range(10)), lr=60.0,
                      epochs=10000, record_every=10,
                      protocols={"base": {}, "lr_tuned": {"std_lr_factor": 3.0, "epochs": 2500}}),
}

# overrides a protocol may carry
PROTOCOL_KEYS = ("std_lr_factor", "epochs", "multi_epochs", "lr")


def default_config_dict(name: str) -> dict:
    if name not in _DEFAULTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    d = {"experiment": name, **json.loads(json.dumps(_DEFAULTS[name]))}
    d["out_dir"] = os.path.join("runs", name)
    return d


def default_config(name: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**default_config_dict(name), **overrides})


def _positive(name, value, integer=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value) and value > 0
    if integer:
        ok = ok and float(value).is_integer()
    if not ok:
        raise ConfigError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")
    keys = LINEAR_KEYS if cfg.experiment == "smg" else TASK_KEYS
    if not isinstance(cfg.dims, dict) or set(cfg.dims) != set(keys):
        raise ConfigError(f"dims for {cfg.experiment} must have exactly the keys {keys}")
    for k, v in cfg.dims.items():
        _positive(f"dims.{k}", v, integer=True)
    if not isinstance(cfg.seeds, list) or not cfg.seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    _positive("lr", cfg.lr)
    for name in ("epochs", "n_train", "n_test", "record_every", "workers", "pntk_stride", "n_null"):
        _positive(name, getattr(cfg, name), integer=True)
    for name in ("large_factor", "scale", "init_scale", "std_lr_factor"):
        _positive(name, getattr(cfg, name))
    if not isinstance(cfg.pntk_probe, int) or cfg.pntk_probe < 0:
        raise ConfigError("pntk_probe must be a non-negative integer")
    if cfg.multi_epochs is not None:
        _positive("multi_epochs", cfg.multi_epochs, integer=True)
    if cfg.init_mode not in INIT_MODES:
        raise ConfigError(f"init_mode must be one of {INIT_MODES}")
    if cfg.curriculum not in CURRICULA:
        raise ConfigError(f"curriculum must be one of {CURRICULA}")
    if cfg.large_scope not in SCOPES:
        raise ConfigError(f"large_scope must be one of {SCOPES}")
    if cfg.input_sort not in INPUT_SORTS:
        raise ConfigError(f"input_sort must be one of {INPUT_SORTS}")
    for name in ("snapshot_epochs", "compare_epochs"):
        sched = getattr(cfg, name)
        if not isinstance(sched, list) or not all(isinstance(e, int) and 0 <= e <= cfg.epochs for e in sched):
            raise ConfigError(f"{name} must be integers within [0, epochs]")
    if not isinstance(cfg.protocols, dict) or not cfg.protocols:
        raise ConfigError("protocols must be a non-empty mapping")
    for name, over in cfg.protocols.items():
        if not isinstance(over, dict) or set(over) - set(PROTOCOL_KEYS):
            raise ConfigError(f"protocol {name!r} may only override {PROTOCOL_KEYS}")
        for k, v in over.items():
            _positive(f"protocols.{name}.{k}", v, integer=k.endswith("epochs"))
    if cfg.experiment in ("finetune", "correlate") and cfg.init_mode != "paired":
        raise ConfigError(f"{cfg.experiment} needs paired initialisation")
    if cfg.experiment == "correlate" and len(cfg.seeds) < 2:
        raise InsufficientTrials("the correlation study needs at least two paired trials")
    if cfg.experiment == "smg":
        d = LinearDims(**cfg.dims)
        if cfg.singular_values is not None and len(cfg.singular_values) != min(d.n_in, d.n_out):
            raise ConfigError("singular_values must have min(n_in, n_out) entries")
        if not all(0 <= o < d.n_out for o in cfg.kernel_outputs):
            raise ConfigError("kernel_outputs out of range")


def _scale_epochs(e: int, f: float) -> int:
    return max(1, int(round(e * f)))


def scaled(cfg: ExperimentConfig, factor: float) -> ExperimentConfig:
    """Copy with every epoch count and schedule rescaled by ``factor``."""
    _positive("scale", factor)
    if factor == 1.0:
        return cfg
    epochs = _scale_epochs(cfg.epochs, factor)
    sched = lambda s: sorted({min(epochs, int(round(e * factor))) for e in s})
    protocols = {
        name: {k: (_scale_epochs(v, factor) if k.endswith("epochs") else v) for k, v in over.items()}
        for name, over in cfg.protocols.items()
    }
    return dataclasses.replace(
        cfg, epochs=epochs, snapshot_epochs=sched(cfg.snapshot_epochs), compare_epochs=sched(cfg.compare_epochs),
        multi_epochs=None if cfg.multi_epochs is None else _scale_epochs(cfg.multi_epochs, factor),
        protocols=protocols, scale=cfg.scale * factor)


# ------------------------------------------------------------ file helpers


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=1)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hashes(out_dir) -> dict:
    out = Path(out_dir)
    return {
        str(p.relative_to(out)): sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


def write_manifest(out_dir, cfg: ExperimentConfig, timings: dict) -> dict:
    man = {
        "config": dataclasses.asdict(cfg),
        "seeds": {str(s): {"train": s, "test": TEST_SEED_OFFSET + s} for s in cfg.seeds},
        "artifacts": [{"path": k, "sha256": v} for k, v in artifact_hashes(out_dir).items()],
        "timings": timings,
    }
    write_json(Path(out_dir) / "manifest.json", man)
    return man


def verify_manifest(out_dir) -> list:
    """Artifacts whose file is missing or whose hash no longer matches."""
    out = Path(out_dir)
    with open(out / "manifest.json") as fh:
        man = json.load(fh)
    bad = []
    for a in man["artifacts"]:
        p = out / a["path"]
        if not p.is_file() or sha256(p) != a["sha256"]:
            bad.append(a["path"])
    return bad


def _map(fn, jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(fn, *zip(*jobs)))


# ------------------------------------------------------------ linear task


def _smg_trial(cfg: ExperimentConfig, seed: int, out: str) -> dict:
    tdir = Path(out) / f"trial_{seed}"
    tdir.mkdir(parents=True, exist_ok=True)
    dims = LinearDims(**cfg.dims)
    d = gen_smg(seed, n=cfg.n_train, dims=dims, n_test=cfg.n_test, singular_values=cfg.singular_values)
    net0 = init_linear(dims, seed, scale=cfg.init_scale)
    snaps = sorted({e for e in cfg.snapshot_epochs + cfg.compare_epochs if e < cfg.epochs})
    rec = SnapshotRecorder.create(d.x_test, d.x, cfg.lr, snaps)
    dec = DecomposedAccumulator(d.x_test, d.x, cfg.lr, dims.n_out)
    trace = sgd_train(net0, d, cfg.lr, cfg.epochs, hooks=[rec.hook, dec.hook], test=d.test,
                      record_every=cfg.record_every, checkpoint_epochs=cfg.compare_epochs)
    write_csv(tdir / "trace.csv", ["epoch", "train_loss", "test_loss"],
              zip(trace.epochs, trace.loss, trace.test_loss))

    s = svd(d.w_target).s
    learnable = [r for r in range(len(s)) if s[r] > 1e-12 * s[0] and r < dims.n_hid]
    tracks = {"ntk": an.mode_overlap_track(rec.ntk, d.w_target, d.x_test, epochs=snaps),
              "pntk": an.mode_overlap_track(rec.pntk, d.w_target, d.x_test, epochs=snaps)}
    overlap_rows = [
        (e, src, rank + 1, m, tr[t, rank, m])
        for src, tr in tracks.items()
        for t, e in enumerate(snaps)
        for rank in range(tr.shape[1])
        for m in range(tr.shape[2])
    ]
    pntk_sv = [(e, *svd(rec.pntk[e]).s[:dims.n_hid]) for e in snaps]

    compare_rows = []
    for e in cfg.compare_epochs:
        if e >= cfg.epochs:
            continue
        for src in ("ntk", "pntk"):
            snap = getattr(rec, src)[e]
            res = svd(snap)
            proj, _ = an.target_projections(d.w_target, d.x_test)
            ov = np.abs(res.u[:, :dims.n_hid].T @ proj) if np.any(snap) else np.zeros((dims.n_hid, proj.shape[1]))
            for r in range(dims.n_hid):
                compare_rows.append((e, src, r + 1, res.s[r], *ov[r]))
        net_e = trace.checkpoint(e)
        for o in cfg.kernel_outputs:
            save_kernel_snapshot(tdir / f"kernel_t{e}_out{o}.csv", ntk(net_e, d.x_test, d.x, o, e))

    track = tracks["ntk"]
    cross = [an.first_crossing(track, snaps, 0, m) for m in learnable]
    ordered = None not in cross and all(a < b for a, b in zip(cross, cross[1:]))
    sw = an.secondary_switch_detect(track, snaps)
    tiers = an.detect_tiers(trace.loss, trace.epochs)
    windows = an.drop_windows(trace.test_loss, trace.epochs)
    follow = an.drops_follow_rises(windows, an.lock_epochs(track, snaps), span=cfg.epochs)

    true_dw = trace.final.w_eff - net0.w_eff
    ks = np.argsort(-np.min(np.abs(d.x_test), axis=1))[:3]
    ests = [delta_w_from_pntk(dec, d.x_test, int(k)) for k in ks]
    dw_err = float(np.linalg.norm(ests[0] - true_dw) / np.linalg.norm(true_dw))
    dw_spread = float(max(np.max(np.abs(e - ests[0])) for e in ests))

    return {
        "seed": seed,
        "loss_rows": [(seed, e, a, b) for e, a, b in zip(trace.epochs, trace.loss, trace.test_loss)],
        "overlap_rows": [(seed, *r) for r in overlap_rows],
        "compare_rows": [(seed, *r) for r in compare_rows],
        "sv_rows": [(seed, *r) for r in pntk_sv],
        "summary": {
            "crossings": cross,
            "ordered": ordered,
            "primary_switches": sw.primary,
            "secondary_switches": sw.secondary,
            "tiers": [dataclasses.astuple(t) for t in tiers],
            "n_tiers": len(tiers),
            "drop_windows": windows,
            "drops_follow_rises": follow,
            "final_subspace_overlap": an.subspace_overlap(rec.acc.total(), d.w_target, d.x_test, dims.n_hid),
            "identity_residual": pntk_identity_check(rec.acc, net0, trace.final),
            "delta_w_rel_error": dw_err,
            "delta_w_k_spread": dw_spread,
            "final_loss": trace.loss[-1],
            "singular_values": s,
        },
    }


def run_smg(cfg: ExperimentConfig) -> dict:
    """Singular-mode experiment on the linear bottleneck network."""
    if cfg.experiment != "smg":
        raise ConfigError("run_smg needs an smg config")
    return _run(cfg, _smg_trial, _smg_reduce)


def _smg_reduce(cfg, results, out):
    write_csv(out / "fig2_loss.csv", ["seed", "epoch", "train_loss", "test_loss"],
              [r for res in results for r in res["loss_rows"]])
    write_csv(out / "fig5_overlap.csv", ["seed", "epoch", "source", "rank", "mode", "overlap"],
              [r for res in results for r in res["overlap_rows"]])
    n_modes = min(cfg.dims["n_in"], cfg.dims["n_out"])
    write_csv(out / "fig4_compare.csv",
              ["seed", "epoch", "source", "rank", "singular_value"] + [f"overlap_mode{m}" for m in range(n_modes)],
              [r for res in results for r in res["compare_rows"]])
    write_csv(out / "fig6_pntk_sv.csv", ["seed", "epoch"] + [f"sv{r + 1}" for r in range(cfg.dims["n_hid"])],
              [r for res in results for r in res["sv_rows"]])
    per = {str(res["seed"]): res["summary"] for res in results}
    return {
        "per_seed": per,
        "ordered_seeds": int(sum(bool(p["ordered"]) for p in per.values())),
        "tiered_seeds": int(sum(p["n_tiers"] >= 2 for p in per.values())),
        "n_seeds": len(per),
    }


# ------------------------------------------------------------ task network


def _task_dims(cfg) -> TaskDims:
    return TaskDims(**cfg.dims)


def _nets(cfg, dims, seed) -> dict:
    std, large = init_pair(dims, seed, cfg.large_scope, cfg.large_factor)
    if cfg.init_mode == "standard":
        return {"standard": std}
    if cfg.init_mode == "large":
        return {"large": large}
    return {"standard": std, "large": large}


def _input_sort(cfg) -> str:
    return "by_input" if cfg.input_sort == "feature" else "by_stimulus"


def _init_compare_trial(cfg: ExperimentConfig, seed: int, out: str) -> dict:
    tdir = Path(out) / f"trial_{seed}"
    tdir.mkdir(parents=True, exist_ok=True)
    dims = _task_dims(cfg)
    trials = gen_single_task_trials(seed, cfg.n_train, dims)
    sorts = ("by_task", _input_sort(cfg), "none")
    view_rows, control_rows, quality_rows, pred_rows = [], [], [], []
    rand_rows, hidden_rows, trace_rows = [], [], []
    summary = {}
    for init, net in _nets(cfg, dims, seed).items():
        kernels = ntk_all(net, trials.inputs)
        if seed in cfg.kernel_seeds:
            for o in range(len(kernels)):
                save_kernel_snapshot(tdir / f"kernel_t0_out{o}_{init}.csv", KernelMatrix(o, 0, kernels[o]))
        vecs = [sym_eig(k).vectors[:, 0] for k in kernels]
        s = {}
        for sort in sorts:
            rep = an.grouped_quality(kernels, trials, sort, n_null=cfg.n_null, seed=seed, vectors=vecs)
            quality_rows.append((init, sort, rep.quality, rep.null_mean, rep.null_sd, rep.z))
            s[sort] = {"quality": rep.quality, "null_mean": rep.null_mean, "null_sd": rep.null_sd, "z": rep.z,
                       "per_output": rep.per_output}
            labels = an.sort_labels(trials, sort)
            order = np.lexsort((np.arange(len(labels)), labels))
            for o, v in enumerate(vecs):
                rows = control_rows if sort == "none" else view_rows
                rows.extend((init, sort, o, pos, int(i), int(labels[i]), v[i]) for pos, i in enumerate(order))
        delta = an.one_step_change(net, trials)
        preds = {scheme: an.grouping_predict(trials, scheme, delta=delta, seed=seed)
                 for scheme in ("by_task", "by_input")}
        for scheme, p in preds.items():
            pred_rows.extend((init, scheme, item, int(lab)) for item, lab in enumerate(p.labels))
        s["prediction"] = {
            "task_vs_output_pool": adjusted_rand(preds["by_task"].labels, group_truth(dims, "task", "output_pool")),
            "task_vs_input_pool": adjusted_rand(preds["by_task"].labels, group_truth(dims, "task", "input_pool")),
            "input_vs_position": adjusted_rand(preds["by_input"].labels, group_truth(dims, "input", "position")),
        }
        if cfg.experiment == "init-compare":
            s["rand"] = _rand_curves(cfg, dims, seed, trials, net, preds, init, rand_rows, hidden_rows,
                                     trace_rows)
        summary[init] = s
    write_csv(tdir / "fig9_eigvec.csv", ["init", "sort", "output", "position", "sample", "label", "value"], view_rows)
    write_csv(tdir / "fig11_unsorted.csv", ["init", "sort", "output", "position", "sample", "label", "value"],
              control_rows)
    if trace_rows:
        write_csv(tdir / "trace.csv", ["init", "epoch", "train_loss"], trace_rows)
    return {
        "seed": seed,
        "quality_rows": [(seed, *r) for r in quality_rows],
        "pred_rows": [(seed, *r) for r in pred_rows],
        "rand_rows": [(seed, *r) for r in rand_rows],
        "hidden_rows": [(seed, *r) for r in hidden_rows],
        "summary": summary,
    }


def _rand_curves(cfg, dims, seed, trials, net, preds, init, rand_rows, hidden_rows, trace_rows) -> dict:
    probes = {g: group_membership(trials, g) for g in ("task", "input", "task_input")}
    at = [e for e in cfg.snapshot_epochs if e <= cfg.epochs] or [0, cfg.epochs]
    at = sorted(set(at) | {cfg.epochs})
    hooks, acc = [], None
    if cfg.pntk_probe:
        probe = gen_single_task_trials(TEST_SEED_OFFSET + seed, cfg.pntk_probe, dims)
        acc = PNTKAccumulator(probe.inputs, trials.inputs, cfg.lr, cfg.pntk_stride)
        hooks.append(acc.hook)
    trace = sgd_train(net, trials, cfg.lr, cfg.epochs, probes=probes, activation_at=at,
                      record_every=cfg.record_every, hooks=hooks)
    trace_rows.extend((init, e, v) for e, v in zip(trace.epochs, trace.loss))
    k = {"task": dims.g1, "input": dims.m, "task_input": dims.m}
    truth = {"task": group_truth(dims, "task", "input_pool"), "input": group_truth(dims, "input", "position"),
             "task_input": group_truth(dims, "task_input", "position")}
    clusters = {g: an.hidden_rep_clusters(trace, g, k[g]) for g in probes}
    for g, hc in clusters.items():
        ari = an.rand_curve(truth[g], hc)
        hidden_rows.extend((init, g, int(e), sil, bool(deg), a)
                           for e, sil, deg, a in zip(hc.epochs, hc.silhouettes, hc.degenerate, ari))
    out = {"epochs": trace.activation_epochs}
    try:
        task_target = an.hidden_analogue(preds["by_task"], dims)
        task_curve = an.rand_curve(task_target, clusters["task"])
        out["task_aligned"] = True
    except DegenerateInputError:
        task_curve = np.full(len(trace.activation_epochs), np.nan)
        out["task_aligned"] = False
    input_curve = an.rand_curve(an.hidden_analogue(preds["by_input"], dims), clusters["input"])
    for scheme, curve in (("task", task_curve), ("input", input_curve)):
        rand_rows.extend((init, scheme, int(e), v) for e, v in zip(trace.activation_epochs, curve))
    mid = trace.activation_epochs[-1] / 2
    imax = int(np.argmax(input_curve))
    out.update({
        "task_final": task_curve[-1],
        "input_final": input_curve[-1],
        "input_max": input_curve[imax],
        "input_max_epoch": trace.activation_epochs[imax],
        "input_peak_first_half": bool(trace.activation_epochs[imax] <= mid),
        "input_final_below_max": bool(input_curve[-1] < input_curve[imax]),
        "final_loss": trace.loss[-1],
        "pntk_identity_residual": pntk_identity_check(acc, net, trace.final) if acc else None,
    })
    return out


def _init_compare_reduce(cfg, results, out):
    write_csv(out / "fig9_quality.csv", ["seed", "init", "sort", "quality", "null_mean", "null_sd", "z"],
              [r for res in results for r in res["quality_rows"]])
    write_csv(out / "fig9_prediction.csv", ["seed", "init", "scheme", "item", "group"],
              [r for res in results for r in res["pred_rows"]])
    if cfg.experiment == "init-compare":
        write_csv(out / "fig9_rand.csv", ["seed", "init", "scheme", "epoch", "adjusted_rand"],
                  [r for res in results for r in res["rand_rows"]])
        write_csv(out / "fig8_hidden.csv",
                  ["seed", "init", "grouping", "epoch", "silhouette", "degenerate", "adjusted_rand_truth"],
                  [r for res in results for r in res["hidden_rows"]])
    per = {str(res["seed"]): res["summary"] for res in results}
    summ = {"per_seed": per, "n_seeds": len(per)}
    if cfg.init_mode == "paired":
        summ["std_quality_wins"] = int(sum(
            p["standard"]["by_task"]["quality"] > p["large"]["by_task"]["quality"] for p in per.values()))
    for init in ("standard", "large"):
        ctl = [p[init]["none"] for p in per.values() if init in p]
        if ctl:
            num = sum(c["quality"] - c["null_mean"] for c in ctl)
            den = math.sqrt(sum(c["null_sd"] ** 2 for c in ctl))
            summ[f"{init}_control_z"] = num / den if den > 0 else float("nan")
        if cfg.experiment == "init-compare":
            rs = [p[init]["rand"] for p in per.values() if init in p]
            if rs:
                summ[f"{init}_task_final_complete"] = int(sum(r["task_final"] >= 1.0 - 1e-12 for r in rs))
                summ[f"{init}_input_peak_then_fall"] = int(sum(
                    r["input_peak_first_half"] and r["input_final_below_max"] for r in rs))
    return summ


def run_init_compare(cfg: ExperimentConfig) -> dict:
    """Initial kernel views, grouping predictions and hidden-cluster Rand curves."""
    if cfg.experiment not in ("init-compare", "grouping"):
        raise ConfigError("run_init_compare needs an init-compare or grouping config")
    return _run(cfg, _init_compare_trial, _init_compare_reduce)


def run_grouping(cfg: ExperimentConfig) -> dict:
    """Initial kernel views and grouping predictions without training."""
    return run_init_compare(cfg)


# ------------------------------------------------------------ fine-tuning


def _protocol(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    return dataclasses.replace(cfg, **cfg.protocols[name])


def _finetune_trial(cfg: ExperimentConfig, seed: int, out: str, protocol: str = "base") -> dict:
    p = _protocol(cfg, protocol)
    tdir = Path(out) / protocol / f"trial_{seed}"
    tdir.mkdir(parents=True, exist_ok=True)
    dims = _task_dims(p)
    single = gen_single_task_trials(seed, p.n_train, dims)
    single_test = gen_single_task_trials(TEST_SEED_OFFSET + seed, p.n_test, dims)
    multi = gen_multitask_trials(seed, p.n_train, dims)
    multi_test = gen_multitask_trials(TEST_SEED_OFFSET + seed, p.n_test, dims)
    multi_epochs = p.multi_epochs or p.epochs
    rows, res = [], {}
    for init, net in _nets(p, dims, seed).items():
        lr = p.lr * (p.std_lr_factor if init == "standard" else 1.0)
        r = {"lr": lr, "silhouette": an.t0_silhouette(net, single)}
        if p.curriculum in ("single", "single-then-multitask"):
            a = sgd_train(net, single, lr, p.epochs, test=single_test, record_every=p.record_every)
            rows.extend((init, "single", e, x, y) for e, x, y in zip(a.epochs, a.loss, a.test_loss))
            r["single"] = {"train": a.loss[-1], "test": a.test_loss[-1]}
            net = a.final
        if p.curriculum in ("multitask", "single-then-multitask"):
            b = sgd_train(net, multi, lr, multi_epochs, test=multi_test, record_every=p.record_every)
            rows.extend((init, "multi", e, x, y) for e, x, y in zip(b.epochs, b.loss, b.test_loss))
            r["multi"] = {"train": b.loss[-1], "test": b.test_loss[-1]}
        res[init] = r
    write_csv(tdir / "trace.csv", ["init", "phase", "epoch", "train_loss", "test_loss"], rows)
    return {"seed": seed, "protocol": protocol, "rows": rows, "summary": res}


def _curve_table(results, phase, init, col):
    ep = [r[2] for r in results[0]["rows"] if r[0] == init and r[1] == phase]
    mat = np.array([[r[col] for r in res["rows"] if r[0] == init and r[1] == phase] for res in results])
    return ep, mat


def _finetune_reduce_protocol(cfg, results, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    name = results[0]["protocol"]
    p = _protocol(cfg, name)
    fig = "fig13" if name == "lr_tuned" else "fig10"
    inits = list(results[0]["summary"])
    phases = [ph for ph in ("single", "multi") if ph in results[0]["summary"][inits[0]]]
    curves, diff, trials_rows, tt_rows = [], [], [], []
    for ph in phases:
        tabs = {i: _curve_table(results, ph, i, 4) for i in inits}
        trains = {i: _curve_table(results, ph, i, 3)[1] for i in inits}
        ep = tabs[inits[0]][0]
        for t, e in enumerate(ep):
            row = [ph, e]
            for i in inits:
                row += [tabs[i][1][:, t].mean(), tabs[i][1][:, t].std()]
                tt_rows.append((ph, e, i, trains[i][:, t].mean(), tabs[i][1][:, t].mean()))
            curves.append(row)
            if len(inits) == 2:
                dv = tabs["large"][1][:, t] - tabs["standard"][1][:, t]
                diff.append((ph, e, dv.mean(), dv.std()))
                trials_rows.extend((res["seed"], ph, e, tabs["standard"][1][k, t], tabs["large"][1][k, t])
                                   for k, res in enumerate(results))
    head = ["phase", "epoch"] + [f"{i}_{s}" for i in inits for s in ("mean", "sd")]
    write_csv(out / f"{fig}_curves.csv", head, curves)
    write_csv(out / "fig15_train_test.csv", ["phase", "epoch", "init", "train_mean", "test_mean"], tt_rows)
    if len(inits) == 2:
        write_csv(out / f"{fig}_diff.csv", ["phase", "epoch", "large_minus_standard_mean", "sd"], diff)
        write_csv(out / "fig12_trials.csv", ["seed", "phase", "epoch", "standard", "large"], trials_rows)
    per = {str(res["seed"]): res["summary"] for res in results}
    summ = {"per_seed": per, "n_pairs": len(per),
            "lr": {i: per[next(iter(per))][i]["lr"] for i in inits}, "epochs": p.epochs,
            "multi_epochs": p.multi_epochs or p.epochs}
    if len(inits) == 2:
        if "single" in phases:
            summ["std_wins_single"] = int(sum(
                s["standard"]["single"]["test"] < s["large"]["single"]["test"] for s in per.values()))
        if "multi" in phases:
            summ["large_wins_multi"] = int(sum(
                s["large"]["multi"]["test"] < s["standard"]["multi"]["test"] for s in per.values()))
    return summ


def _finetune_jobs(cfg, out):
    return [(cfg, s, str(out), name) for name in cfg.protocols for s in cfg.seeds]


def _by_protocol(cfg, results) -> dict:
    return {name: [r for r in results if r["protocol"] == name] for name in cfg.protocols}


def _finetune_reduce(cfg, results, out):
    return {name: _finetune_reduce_protocol(cfg, rs, out / name) for name, rs in _by_protocol(cfg, results).items()}


def run_finetune(cfg: ExperimentConfig) -> dict:
    """Paired single-task training followed by multitask fine-tuning, for every protocol."""
    if cfg.experiment != "finetune":
        raise ConfigError("run_finetune needs a finetune config")
    return _run(cfg, _finetune_trial, _finetune_reduce, jobs=_finetune_jobs)


def _records(results) -> list:
    recs = []
    for res in results:
        s = res["summary"]
        recs += an.paired_records(
            res["seed"], (s["standard"]["silhouette"], s["large"]["silhouette"]),
            (s["standard"]["single"]["test"], s["large"]["single"]["test"]),
            (s["standard"]["multi"]["test"], s["large"]["multi"]["test"]))
    return recs


def _correlate_reduce(cfg, results, out):
    summ = _finetune_reduce(cfg, results, out)
    table, pooled = [], []
    for k, (name, rs) in enumerate(_by_protocol(cfg, results).items()):
        recs = _records(rs)
        for r in recs:
            table.append((name, r.trial, r.condition, r.silhouette, r.single_loss, r.multi_loss,
                          r.single_delta, r.multi_delta))
        pooled += [dataclasses.replace(r, trial=k * TEST_SEED_OFFSET + r.trial) for r in recs]
        summ[name]["correlation"] = _corr(recs)
    if len(cfg.protocols) > 1:
        summ["combined"] = {"correlation": _corr(pooled)}
    write_csv(out / "correlation_records.csv",
              ["protocol", "trial", "condition", "silhouette", "single_loss", "multi_loss", "single_delta",
               "multi_delta"], table)
    return summ


def _corr(recs) -> dict:
    out = {}
    for variant in ("difference", "absolute"):
        r_single, r_multi = an.silhouette_correlation_study(recs, variant)
        out[variant] = {"r_single": r_single, "r_multi": r_multi}
    return out


def run_correlate(cfg: ExperimentConfig) -> dict:
    """Fine-tuning for every protocol plus the silhouette versus loss correlations."""
    if cfg.experiment != "correlate":
        raise ConfigError("run_correlate needs a correlate config")
    if cfg.curriculum != "single-then-multitask":
        raise ConfigError("the correlation study needs both training phases")
    return _run(cfg, _finetune_trial, _correlate_reduce, jobs=_finetune_jobs)


# ------------------------------------------------------------ driver


def _run(cfg: ExperimentConfig, trial, reduce, jobs=None) -> dict:
    validate(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    job_list = jobs(cfg, out) if jobs else [(cfg, s, str(out)) for s in cfg.seeds]
    timed = _map(_TimedTrial(trial), job_list, cfg.workers)
    results = [r for r, _ in timed]
    summary = reduce(cfg, results, out)
    # execution settings stay out of the hashed summary; the manifest records them
    summary["config"] = {k: v for k, v in dataclasses.asdict(cfg).items() if k not in ("out_dir", "workers")}
    write_json(out / "summary.json", summary)
    timings = {"total_s": time.perf_counter() - t0,
               "trials_s": [[list(j[1:2]) + list(j[3:]), t] for j, (_, t) in zip(job_list, timed)]}
    write_manifest(out, cfg, timings)
    return summary


class _TimedTrial:
    """Picklable timing wrapper for worker processes."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, *args):
        t0 = time.perf_counter()
        res = self.fn(*args)
        return res, time.perf_counter() - t0


RUNNERS = {
    "smg": run_smg,
    "init-compare": run_init_compare,
    "grouping": run_grouping,
    "finetune": run_finetune,
    "correlate": run_correlate,
}


def run(cfg: ExperimentConfig) -> dict:
    return RUNNERS[cfg.experiment](cfg)
