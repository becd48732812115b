"""Training loop, ablation runner, gradient checking, attention dumps.

Everything is deterministic given (config, seed): data order, shift and
mask draws, and parameter updates all derive from seeded generators, and
metric files are written with round-trip float formatting.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor
from .checkpoint import save_checkpoint
from .config import RunConfig
from .errors import ContractError, NumericError
from .evaluation import EvalReport, evaluate_model
from .hard_queries import (DrawStore, HqmConfig, LearnablePass,
                           learnable_mask_hook, run_hard_branch)
from .losses import branch_loss, total_loss
from .matching import hungarian, matching_cost
from .model import (ModelParams, decoder_forward, detection_heads, init_params,
                    learnable_queries)
from .scenes import class_table, encode_scene, generate_dataset

METRICS_HEADER = ["epoch", "loss_total", "loss_l", "loss_h",
                  "l1", "giou", "ce", "focal", "val_map"]


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to matrices only (biases and embeddings are left alone).
    A non-finite gradient aborts the run: silent corruption is worse than a
    crash.
    """

    def __init__(self, params: ModelParams, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and t.data.ndim >= 2:
                t.data -= lr * self.weight_decay * t.data
            t.data -= lr * update
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite values in parameter {name} after update")

    def zero_grad(self):
        for _, t in self.params.items():
            t.grad = None


@dataclass
class IterationResult:
    total: Tensor
    loss_l: Tensor
    loss_h: Tensor | None
    terms: dict[str, float]       # learnable-branch epoch bookkeeping
    diagnostics: list[dict]


def run_training_iteration(params: ModelParams, scenes, grids, cfg: RunConfig,
                           iteration: int, hard_rng,
                           stores: list[DrawStore] | None = None,
                           hqm: HqmConfig | None = None) -> IterationResult:
    """One batch: learnable pass, matching, hard branch, combined loss.

    The caller owns the gradient tape. ``stores`` (one per scene) freeze
    every stochastic draw for replay, which gradient checking relies on.
    The learnable pass never depends on the hard branch, so its loss is
    bit-identical across strategies given the same parameters and batch.
    """
    hqm = hqm if hqm is not None else cfg.hqm
    scene_losses_l, scene_losses_h, diagnostics = [], [], []
    term_sums = {"l1": 0.0, "giou": 0.0, "ce": 0.0, "focal": 0.0}
    for slot, (scene, grid) in enumerate(zip(scenes, grids)):
        store = stores[slot] if stores is not None else None
        queries = learnable_queries(params)
        hook = None
        if hqm.mask_learnable:
            hook = learnable_mask_hook(cfg.amm, hqm, hard_rng, store)
        outputs = decoder_forward(queries, grid, params, mask_hook=hook)
        preds = detection_heads(outputs.embeddings[-1], params)
        targets = list(scene.pairs)

        def match():
            return hungarian(matching_cost(preds, targets, cfg.loss))
        assignment = store.take(("assignment",), match) if store else match()

        breakdown = branch_loss(preds, targets, assignment, cfg.loss)
        scene_losses_l.append(breakdown.weighted_total)
        for key in term_sums:
            term_sums[key] += getattr(breakdown, key).item()

        artifacts = LearnablePass(grid, queries, outputs, preds, assignment)
        hard, diag = run_hard_branch(hqm, scene, artifacts, params, cfg.loss,
                                     cfg.shift, cfg.amm, hard_rng,
                                     iteration=iteration, store=store)
        diagnostics.append(diag)
        if hard is not None:
            scene_losses_h.append(hard)

    inv = 1.0 / len(scenes)
    loss_l = ad.scale(_sum(scene_losses_l), inv)
    loss_h = ad.scale(_sum(scene_losses_h), inv) if scene_losses_h else None
    total = total_loss(loss_l, loss_h, cfg.loss)
    terms = {k: v * inv for k, v in term_sums.items()}
    return IterationResult(total=total, loss_l=loss_l, loss_h=loss_h,
                           terms=terms, diagnostics=diagnostics)


def _sum(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return acc


def _format(value: float) -> str:
    return repr(float(value))


def write_metrics_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row["epoch"]] + [_format(row[k]) for k in METRICS_HEADER[1:]])


@dataclass
class TrainResult:
    out_dir: Path
    final_map: float
    epochs_to_target: int | None
    metrics: list[dict]


def train(cfg: RunConfig, out_dir, train_scenes=None, val_scenes=None,
          quiet: bool = True) -> TrainResult:
    """Full training run; writes metrics.csv and a checkpoint into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.data.spec
    if train_scenes is None:
        train_scenes = generate_dataset(spec, cfg.seed, cfg.data.num_train)
    if val_scenes is None:
        val_scenes = generate_dataset(spec, cfg.seed + cfg.data.num_train,
                                      cfg.data.num_val)
    table = class_table(spec.num_classes, cfg.model.dim)
    train_grids = [encode_scene(s, table) for s in train_scenes]
    val_grids = [encode_scene(s, table) for s in val_scenes]

    init_seq, order_seq, hard_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(cfg.model, np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    hard_rng = np.random.default_rng(hard_seq)
    optimizer = AdamW(params, cfg.optim.lr, cfg.optim.weight_decay,
                      betas=(cfg.optim.beta1, cfg.optim.beta2))
    decay_epoch = math.ceil(cfg.optim.epochs * cfg.optim.decay_at)

    iteration = 0
    rows = []
    epochs_to_target = None
    n = len(train_scenes)
    batch = cfg.optim.batch_size
    for epoch in range(1, cfg.optim.epochs + 1):
        lr = cfg.optim.lr * (cfg.optim.decay_factor if epoch > decay_epoch else 1.0)
        order = order_rng.permutation(n)
        sums = {"loss_total": 0.0, "loss_l": 0.0, "loss_h": 0.0,
                "l1": 0.0, "giou": 0.0, "ce": 0.0, "focal": 0.0}
        steps = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            scenes = [train_scenes[i] for i in idx]
            grids = [train_grids[i] for i in idx]
            optimizer.zero_grad()
            with GradientTape() as tape:
                result = run_training_iteration(params, scenes, grids, cfg,
                                                iteration, hard_rng)
            tape.backward(result.total)
            optimizer.step(lr)
            iteration += 1
            steps += 1
            sums["loss_total"] += result.total.item()
            sums["loss_l"] += result.loss_l.item()
            sums["loss_h"] += result.loss_h.item() if result.loss_h is not None else 0.0
            for key in ("l1", "giou", "ce", "focal"):
                sums[key] += result.terms[key]
        report = evaluate_model(params, val_scenes, table, grids=val_grids,
                                iou_threshold=cfg.eval.iou_threshold)
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()},
               "val_map": report.mean_ap}
        rows.append(row)
        if epochs_to_target is None and report.mean_ap >= cfg.eval.map_target:
            epochs_to_target = epoch
        if not quiet:
            print(f"epoch {epoch:3d}  loss {row['loss_total']:.4f}  "
                  f"val mAP {row['val_map']:.3f}")

    write_metrics_csv(out_dir / "metrics.csv", rows)
    save_checkpoint(out_dir, params)
    return TrainResult(out_dir=out_dir, final_map=rows[-1]["val_map"],
                       epochs_to_target=epochs_to_target, metrics=rows)


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------

def _ablate_job(args):
    cfg, strategy, seed, out_dir = args
    job_cfg = cfg.with_overrides(seed=seed, strategy=strategy)
    result = train(job_cfg, Path(out_dir) / f"{strategy}_seed{seed}")
    return {"strategy": strategy, "seed": seed, "final_map": result.final_map,
            "epochs_to_target": result.epochs_to_target}


def ablate(cfg: RunConfig, out_dir, strategies=None, seeds=None,
           workers: int | None = None) -> list[dict]:
    """Train every (strategy, seed) combination and tabulate the results.

    Emits one row per run plus one aggregate (median) row per strategy.
    Runs are independent and deterministic, so they may execute in a worker
    pool without affecting the outputs.
    """
    strategies = list(strategies or cfg.ablation.strategies)
    seeds = list(seeds or cfg.ablation.seeds)
    if not strategies:
        raise ContractError("ablate needs at least one strategy")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, s, seed, out_dir) for s in strategies for seed in seeds]
    workers = workers if workers is not None else cfg.ablation.workers
    if workers == 0:
        workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            results = pool.map(_ablate_job, jobs)
    else:
        results = [_ablate_job(j) for j in jobs]

    by_key = {(r["strategy"], r["seed"]): r for r in results}
    rows = []
    sentinel = cfg.optim.epochs + 1  # reported when the target was never hit
    for strategy in strategies:
        per_seed = [by_key[(strategy, seed)] for seed in seeds]
        rows.extend(per_seed)
        maps = [r["final_map"] for r in per_seed]
        epochs = [r["epochs_to_target"] if r["epochs_to_target"] is not None
                  else sentinel for r in per_seed]
        rows.append({"strategy": strategy, "seed": "median",
                     "final_map": float(np.median(maps)),
                     "epochs_to_target": float(np.median(epochs))})

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "seed", "final_map", "epochs_to_target"])
        for row in rows:
            epochs = row["epochs_to_target"]
            writer.writerow([row["strategy"], row["seed"], _format(row["final_map"]),
                             "" if epochs is None else epochs])
    return rows


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

GRAD_CHECK_STRATEGIES = ("baseline", "gbs_only", "amm_only", "cjl", "pjl")


def grad_check(cfg: RunConfig, strategies=GRAD_CHECK_STRATEGIES,
               eps: float = 1e-6) -> dict[str, dict[str, float]]:
    """Finite-difference check of the full iteration loss per strategy.

    Only desk-drawer configs are allowed (the sweep is quadratic in size).
    All stochastic draws, the matching, and the copied queries are frozen
    so the loss is a deterministic function of the parameters.
    """
    spec = cfg.data.spec
    if cfg.model.num_queries > 4 or spec.grid_h * spec.grid_w > 36:
        raise ContractError("grad check requires a tiny config "
                            "(num_queries <= 4, grid <= 6x6)")
    scenes = generate_dataset(spec, cfg.seed, 2)
    table = class_table(spec.num_classes, cfg.model.dim)
    grids = [encode_scene(s, table) for s in scenes]

    out: dict[str, dict[str, float]] = {}
    for strategy in strategies:
        hqm = HqmConfig(strategy=strategy)
        params = init_params(cfg.model, np.random.default_rng(cfg.seed))
        hard_rng = np.random.default_rng(cfg.seed + 1)
        stores = [DrawStore() for _ in scenes]

        def loss():
            return run_training_iteration(params, scenes, grids, cfg, 0,
                                          hard_rng, stores=stores, hqm=hqm).total

        with GradientTape():
            loss()  # capture pass records every draw
        for store in stores:
            store.freeze()

        report = ad.finite_diff_report(loss, dict(params.items()), eps=eps)
        group_errors: dict[str, float] = {}
        for group, names in params.groups().items():
            group_errors[group] = max(report[name] for name in names)
        out[strategy] = group_errors
    return out


# ---------------------------------------------------------------------------
# Attention dumps
# ---------------------------------------------------------------------------

def dump_attention(params: ModelParams, scene, table, out_dir) -> list[Path]:
    """Write one CSV per (layer, head) of the unmasked attention maps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = encode_scene(scene, table)
    outputs = decoder_forward(learnable_queries(params), grid, params)
    written = []
    for l, layer in enumerate(outputs.attention):
        for h, attn in enumerate(layer):
            path = out_dir / f"attention_l{l}_h{h}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                for row in attn.data:
                    writer.writerow([_format(v) for v in row])
            written.append(path)
    return written
