"""Training runs: data loading, the guided training loop, logging, checkpoints,
evaluation, learning-rate sweeps and final epoch selection."""
from __future__ import annotations

import csv
import json
import os
import shutil
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ExperimentConfig
from .guidance import LayerMapping, compute_layer_mapping, guide_batch, guided_loss
from .nets import NetworkSpec, NetworkState, build_network, forward_with_taps
from .tasks import (HEADLINE, IGNORE, Batch, Dataset, DatasetSplit, build_lm_dataset, gen_copy_paste,
                    gen_parity, iterate_batches, load_image_dataset, load_split)
from .tensor import NonFiniteError, OptimizerState, RngState, Tensor, backward, clip_grad_norm, no_grad
from .tensor import ops as F
from .tensor import zero_grads
from .tensor.checkpoint import Checkpoint, load as load_checkpoint, save as save_checkpoint
from .tensor.optim import optimizer_step

LOG_COLUMNS = ("experiment_id", "seed", "epoch", "step", "split", "total_loss", "task_loss",
               "dissim_loss", "metric", "lr", "wall_ms")
LOWER_IS_BETTER = {"perplexity"}


class RunError(RuntimeError):
    pass


class SelectionError(ValueError):
    pass


class SweepError(RuntimeError):
    pass


class GuideMutatedError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    seed: int
    epoch: int
    step: int
    train_total: float
    train_task: float
    train_dissim: float
    val_loss: float
    val_metric: float
    test_loss: float
    test_metric: float
    wall_ms: int = 0


@dataclass
class SeedResult:
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    steps: int = 0


@dataclass
class RunSummary:
    experiment_id: str
    metric: str
    seeds: list[int]
    selected_epoch: int
    val_loss_mean: float
    test_metric_mean: float
    test_metric_se: float
    test_metric_per_seed: list[float]
    val_loss_curve: list[float]  # seed-mean val loss per epoch
    epochs: list[int]
    per_seed_best_epochs: dict[int, int] = field(default_factory=dict)
    failed_seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data

def load_task_data(cfg: ExperimentConfig) -> DatasetSplit:
    d = dict(cfg.data)
    if "dir" in d:
        split = load_split(d["dir"])
        if split.task != cfg.task:
            raise RunError(f"data dir holds task {split.task!r}, config says {cfg.task!r}")
        return split
    seed = d.get("seed", 0)
    if cfg.task == "copy":
        return gen_copy_paste(d.get("n", 10000), tuple(d.get("len_range", (20, 40))), seed=seed)
    if cfg.task == "parity":
        return gen_parity(d.get("n", 10000), tuple(d.get("len_range", (2, 50))), seed=seed)
    if cfg.task == "lm":
        if "corpus" not in d:
            raise RunError("lm task needs data.corpus")
        return build_lm_dataset(d["corpus"], d.get("context_len", 50), seed=seed)
    if "path" in d:
        return load_image_dataset(d["path"], seed, d.get("classes"))
    return load_image_dataset(d.get("synth", {}), seed)


# ---------------------------------------------------------------- losses and metrics

def compute_task_loss(out: Tensor, batch: Batch, task: str, kind: str = "cross_entropy") -> Tensor:
    if task in ("copy", "lm"):
        if kind != "cross_entropy":
            raise RunError(f"{kind} loss is not defined for {task}")
        V = out.shape[-1]
        return F.softmax_cross_entropy(F.reshape(out, (-1, V)), batch.y.reshape(-1), ignore_index=IGNORE)
    if kind == "cross_entropy":
        return F.softmax_cross_entropy(out, batch.y)
    if kind == "bce":
        if out.shape[1] != 1:
            raise RunError("bce loss expects a single output logit")
        return F.bce_with_logits(out, batch.y.astype(out.dtype).reshape(-1, 1))
    if kind == "mse":
        onehot = np.eye(out.shape[1], dtype=out.dtype)[batch.y]
        return F.mse_loss(out, onehot)
    raise RunError(f"unknown task loss {kind!r}")


def metric_counts(logits: np.ndarray, y: np.ndarray, task: str) -> dict:
    """Additive numerators/denominators for the headline metrics of one batch."""
    p = np.asarray(logits)
    if task in ("parity", "image"):
        pred = (p[:, 0] > 0).astype(np.int64) if p.shape[1] == 1 else p.argmax(axis=1)
        return {"correct": float((pred == y).sum()), "n": float(len(y))}
    valid = y != IGNORE
    if task == "copy":
        hit = (p.argmax(axis=-1) == y) & valid
        return {"hit": float(hit.sum()), "valid": float(valid.sum()),
                "exact": float(np.all(hit | ~valid, axis=1).sum()), "n": float(len(y))}
    z = p.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(lp, np.where(valid, y, 0)[..., None], axis=-1)[..., 0]
    return {"nll": float(nll[valid].sum()), "valid": float(valid.sum())}


def finalize_metrics(c: dict, task: str) -> dict:
    if task in ("parity", "image"):
        return {"accuracy": c["correct"] / max(c["n"], 1)}
    if task == "copy":
        return {"token_accuracy": c["hit"] / max(c["valid"], 1),
                "sequence_accuracy": c["exact"] / max(c["n"], 1)}
    return {"perplexity": float(np.exp(c["nll"] / max(c["valid"], 1)))}


def _add(acc: dict, c: dict) -> dict:
    for k, v in c.items():
        acc[k] = acc.get(k, 0.0) + v
    return acc


def evaluate(net: NetworkState, ds: Dataset, task: str, kind: str = "cross_entropy",
             batch_size: int = 256, return_logits: bool = False) -> dict:
    """Mean task loss and metrics over a whole split, in eval mode."""
    if len(ds) == 0:
        raise RunError("cannot evaluate an empty split")
    prev, net.mode = net.mode, "eval" if net.mode == "train" else net.mode
    counts, loss_sum, weight, logits = {}, 0.0, 0.0, []
    try:
        with no_grad():
            for b in iterate_batches(ds, batch_size):
                out, _ = forward_with_taps(net, b.x, b.mask)
                w = float((b.y != IGNORE).sum()) if task in ("copy", "lm") else float(len(b))
                loss_sum += float(compute_task_loss(out, b, task, kind).data) * w
                weight += w
                _add(counts, metric_counts(out.data, b.y, task))
                if return_logits:
                    logits.append(out.data)
    finally:
        net.mode = prev
    res = {"loss": loss_sum / max(weight, 1.0), **finalize_metrics(counts, task)}
    if return_logits:
        res["logits"] = logits
    return res


# ---------------------------------------------------------------- checkpoints

def save_network(path, net: NetworkState, opt: OptimizerState | None = None,
                 rng: RngState | None = None, meta: dict | None = None) -> None:
    m = {"network_spec": net.spec.to_dict(), "tap_list": list(net.tap_list)}
    m.update(meta or {})
    save_checkpoint(path, Checkpoint(net.state_arrays(), opt, rng, m))


def load_network(path, dtype=np.float32) -> tuple[NetworkState, Checkpoint]:
    ck = load_checkpoint(path)
    if "network_spec" not in ck.meta:
        raise RunError(f"{path}: checkpoint has no network_spec")
    net = build_network(NetworkSpec.from_dict(ck.meta["network_spec"]), RngState(0), dtype)
    net.load_arrays(ck.tensors)
    return net, ck


def freeze(net: NetworkState) -> NetworkState:
    for p in net.params.values():
        p.requires_grad = False
        p.grad = np.zeros_like(p.data)
    return net


def _same_state(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- training

def build_guide(cfg: ExperimentConfig, seed: int) -> NetworkState | None:
    mode = cfg.guidance.guide_mode
    if mode == "none":
        return None
    if cfg.guide_checkpoint and mode in ("trained", "noise"):
        net, _ = load_network(cfg.guide_checkpoint)
        net.mode = "eval"
    else:
        # untrained guide: fresh init from a stream of the run seed, batch statistics
        net = build_network(cfg.guide_spec, RngState(seed, 2))
        net.mode = "frozen"
    return freeze(net)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Logger:
    def __init__(self, path, log_wall_time: bool):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(LOG_COLUMNS)
        self.wall = log_wall_time
        self.t0 = time.perf_counter()

    def elapsed_ms(self) -> int:
        return int((time.perf_counter() - self.t0) * 1000) if self.wall else 0

    def row(self, **kw):
        kw["wall_ms"] = self.elapsed_ms()
        self.w.writerow([_fmt(kw[c]) for c in LOG_COLUMNS])

    def close(self):
        self.fh.close()


def _vocab(spec: NetworkSpec):
    return spec.vocab or None


def train_seed(cfg: ExperimentConfig, split: DatasetSplit, seed: int, run_dir: str,
               mapping_override: LayerMapping | None = None, progress=None, guide=None) -> SeedResult:
    """Train one seed. Writes ``log.csv`` and ``last.glab``/``best.glab`` under ``run_dir``.

    ``guide`` overrides the guide that ``build_guide`` would construct, which
    lets callers inspect the exact object after training.
    """
    os.makedirs(run_dir, exist_ok=True)
    task, g = cfg.task, cfg.guidance
    root = RngState(seed)
    net = build_network(cfg.target_spec, root.child(1))
    if guide is None:
        guide = build_guide(cfg, seed)
    mapping = LayerMapping.empty(len(net.tap_list))
    if guide is not None:
        mapping = compute_layer_mapping(len(net.tap_list), len(guide.tap_list))
    if mapping_override is not None:
        mapping = mapping_override
    guide_before = guide.snapshot() if guide is not None else None
    data_rng, noise_rng = root.child(3), root.child(4)
    opt = (OptimizerState.adamw(cfg.lr, cfg.weight_decay) if cfg.optimizer == "adamw"
           else OptimizerState.adam(cfg.lr, cfg.weight_decay))
    params = net.params
    log = _Logger(os.path.join(run_dir, "log.csv"), cfg.log_wall_time)
    res = SeedResult(seed)
    best_val = np.inf
    step = 0
    eid = cfg.experiment_id
    try:
        for epoch in range(1, cfg.epochs + 1):
            net.mode = "train"
            sums = np.zeros(3)
            nb = 0
            for b in iterate_batches(split.train, cfg.batch_size, data_rng, drop_last=True):
                step += 1
                zero_grads(net.parameters())
                out, trec = forward_with_taps(net, b.x, b.mask)
                tl = compute_task_loss(out, b, task, cfg.task_loss)
                if guide is not None and mapping.pairs and g.active_at(step):
                    gx = guide_batch(b.x, "noise" if g.guide_mode == "noise" else "same", noise_rng,
                                     _vocab(guide.spec))
                    with no_grad():
                        _, grec = forward_with_taps(guide, gx, b.mask)
                    br = guided_loss(tl, trec, grec, mapping, g.metric)
                else:
                    br = guided_loss(tl, trec, None, LayerMapping.empty())
                backward(br.total)
                if cfg.grad_clip:
                    clip_grad_norm(net.parameters(), cfg.grad_clip)
                optimizer_step(opt, params)
                vals = (float(br.total.data), float(br.task_loss.data), float(br.dissimilarity_total.data))
                if not np.all(np.isfinite(vals)):
                    raise NonFiniteError(f"non-finite loss at step {step}")
                sums += vals
                nb += 1
                c = finalize_metrics(metric_counts(out.data, b.y, task), task)
                log.row(experiment_id=eid, seed=seed, epoch=epoch, step=step, split="train",
                        total_loss=vals[0], task_loss=vals[1], dissim_loss=vals[2],
                        metric=float(c[HEADLINE[task]]), lr=float(opt.lr))
            if nb == 0:
                raise RunError("training split is smaller than one batch")
            ev = {}
            for name, ds in (("val", split.val), ("test", split.test)):
                ev[name] = evaluate(net, ds, task, cfg.task_loss)
                log.row(experiment_id=eid, seed=seed, epoch=epoch, step=step, split=name,
                        total_loss=ev[name]["loss"], task_loss=ev[name]["loss"], dissim_loss=0.0,
                        metric=float(ev[name][HEADLINE[task]]), lr=float(opt.lr))
            mean = sums / nb
            rec = EpochRecord(seed, epoch, step, *map(float, mean), ev["val"]["loss"],
                              float(ev["val"][HEADLINE[task]]), ev["test"]["loss"],
                              float(ev["test"][HEADLINE[task]]), log.elapsed_ms())
            res.records.append(rec)
            if not np.isfinite(rec.val_loss):
                raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
            if cfg.checkpoint:
                meta = {"experiment_id": eid, "seed": seed, "epoch": epoch, "step": step,
                        "val_loss": rec.val_loss, "task": task}
                save_network(os.path.join(run_dir, "last.glab"), net, opt, data_rng, meta)
                if rec.val_loss < best_val:
                    shutil.copyfile(os.path.join(run_dir, "last.glab"), os.path.join(run_dir, "best.glab"))
            best_val = min(best_val, rec.val_loss)
            if progress:
                progress(rec)
    except NonFiniteError as e:
        res.failed, res.error = True, f"{type(e).__name__}: {e}"
        log.row(experiment_id=eid, seed=seed, epoch=len(res.records) + 1, step=step, split="error",
                total_loss=float("nan"), task_loss=float("nan"), dissim_loss=float("nan"),
                metric=float("nan"), lr=float(opt.lr))
    finally:
        log.close()
        res.steps = step
    if guide is not None and not _same_state(guide_before, guide.snapshot()):
        raise GuideMutatedError("guide parameters or statistics changed during training")
    return res


def select_best_epoch(records: list[EpochRecord], metric: str = "metric", experiment_id: str = "") -> RunSummary:
    """Epoch with the lowest seed-mean validation loss (earliest on ties), with
    the seed-mean and standard error of the test metric at that epoch."""
    if not records:
        raise SelectionError("no epoch records")
    by_seed: dict[int, dict[int, EpochRecord]] = {}
    for r in records:
        by_seed.setdefault(r.seed, {})[r.epoch] = r
    seeds = sorted(by_seed)
    epochs = sorted(by_seed[seeds[0]])
    for s in seeds[1:]:
        if sorted(by_seed[s]) != epochs:
            raise SelectionError(f"seed {s} has a different set of epochs than seed {seeds[0]}")
    val = np.array([[by_seed[s][e].val_loss for e in epochs] for s in seeds], dtype=np.float64)
    curve = val.mean(axis=0)
    j = int(np.argmin(curve))  # first occurrence of the minimum
    e_star = epochs[j]
    per_seed = {s: epochs[int(np.argmin(val[i]))] for i, s in enumerate(seeds)}
    tm = np.array([by_seed[s][e_star].test_metric for s in seeds], dtype=np.float64)
    se = float(tm.std(ddof=1) / np.sqrt(len(tm))) if len(tm) > 1 else 0.0
    return RunSummary(experiment_id, metric, seeds, e_star, float(curve[j]), float(tm.mean()), se,
                      tm.tolist(), curve.tolist(), epochs, per_seed)


def run_experiment(cfg: ExperimentConfig, split: DatasetSplit | None = None,
                   mapping_override: LayerMapping | None = None, progress=None) -> RunSummary:
    """Train every seed, write per-seed logs/checkpoints and ``summary.json``.

    Seeds that hit a non-finite value are recorded as failed and excluded
    from selection; if every seed fails a :class:`RunError` is raised.
    """
    if split is None:
        split = load_task_data(cfg)
    if split.task != cfg.task:
        raise RunError(f"split task {split.task!r} != config task {cfg.task!r}")
    exp_dir = os.path.join(cfg.out_dir, cfg.experiment_id)
    os.makedirs(exp_dir, exist_ok=True)
    results = [train_seed(cfg, split, s, os.path.join(exp_dir, f"seed_{s}"), mapping_override, progress)
               for s in cfg.seeds]
    _merge_logs(exp_dir, cfg.seeds)
    ok = [r for r in results if not r.failed]
    failed = [r.seed for r in results if r.failed]
    if not ok:
        with open(os.path.join(exp_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump({"experiment_id": cfg.experiment_id, "failed_seeds": failed,
                       "errors": [r.error for r in results]}, fh, indent=2, sort_keys=True)
        raise RunError(f"all seeds failed: {results[0].error}")
    summary = select_best_epoch([rec for r in ok for rec in r.records], HEADLINE[cfg.task], cfg.experiment_id)
    summary.failed_seeds = failed
    with open(os.path.join(exp_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump({**summary.to_dict(), "manifest_hash": split.manifest_hash(), "config": cfg.to_dict()},
                  fh, indent=2, sort_keys=True)
    return summary


def _merge_logs(exp_dir, seeds):
    with open(os.path.join(exp_dir, "log.csv"), "w", encoding="utf-8") as out:
        for i, s in enumerate(seeds):
            with open(os.path.join(exp_dir, f"seed_{s}", "log.csv"), encoding="utf-8") as fh:
                lines = fh.readlines()
            out.writelines(lines if i == 0 else lines[1:])


def read_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != LOG_COLUMNS:
            raise RunError(f"{path}: unexpected columns {r.fieldnames}")
        rows = []
        for row in r:
            for k in ("seed", "epoch", "step", "wall_ms"):
                row[k] = int(row[k])
            for k in ("total_loss", "task_loss", "dissim_loss", "metric", "lr"):
                row[k] = float(row[k])
            rows.append(row)
    return rows


# ---------------------------------------------------------------- learning-rate sweep

DEFAULT_LRS = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)


def lr_sweep(cfg: ExperimentConfig, lrs=DEFAULT_LRS, split: DatasetSplit | None = None,
             count: int = 5) -> tuple[float, dict]:
    """Shortened runs (``sweep_fraction`` of the epochs) per learning rate.

    Returns the lr with the lowest best seed-mean validation loss (smaller lr on
    ties) and a table lr -> best val loss, or None when the run diverged.
    """
    if len(lrs) != count or len(set(lrs)) != len(lrs):
        raise SweepError(f"expected {count} distinct learning rates, got {list(lrs)}")
    if split is None:
        split = load_task_data(cfg)
    epochs = max(1, int(round(cfg.epochs * cfg.sweep_fraction)))
    table: dict[float, float | None] = {}
    for lr in sorted(float(v) for v in lrs):
        sub = cfg.replace(experiment_id=f"{cfg.experiment_id}_lr{lr:g}".replace("+", ""), lr=lr, epochs=epochs,
                          out_dir=os.path.join(cfg.out_dir, f"{cfg.experiment_id}_sweep"), checkpoint=False)
        try:
            s = run_experiment(sub, split)
        except RunError:
            table[lr] = None
            continue
        table[lr] = None if s.failed_seeds else min(s.val_loss_curve)
    valid = {lr: v for lr, v in table.items() if v is not None and np.isfinite(v)}
    if not valid:
        raise SweepError("every learning rate diverged")
    best = min(valid.values())
    chosen = min(lr for lr, v in valid.items() if v == best)
    return chosen, table
