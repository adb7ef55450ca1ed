"""Training orchestration: two-stage pretrain + linear eval, one-stage
CE + sub-network contrastive training, metrics files and experiment grids."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bank import MemoryBank, push_batch
from .checkpoint import dump_params, restore_params, save_checkpoint
from .config import TrainConfig, load_config
from .data import (AugmentationPolicy, Dataset, generate_synthetic_clusters, iterate_batches,
                   load_dataset, make_batch, train_test_split)
from .encoder import Linear, MultiExitEncoder, build_encoder, default_blocks
from .losses import (DegenerateBatchError, LossKind, build_index_sets, contrastive_loss_parts,
                     cross_entropy_loss, restrict_anchors)
from .optim import LrSchedule, sgd_step
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "FreezeViolation",
    "MetricsLog",
    "METRICS_COLUMNS",
    "TrainResult",
    "LinearEvalResult",
    "prepare_data",
    "encoder_from_config",
    "pretrain",
    "linear_eval",
    "one_stage_train",
    "run_training",
    "run_experiment_grid",
]

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "exit_losses", "linear_train_acc", "test_acc",
                   "wall_seconds")


class DivergenceError(RuntimeError):
    """A non-finite loss was produced; ``checkpoint`` holds the last good parameters."""

    def __init__(self, message: str, checkpoint: str | None = None, epoch: int = -1):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class FreezeViolation(AssertionError):
    pass


# -- metrics --------------------------------------------------------------------

class MetricsLog:
    """Append-only per-epoch rows with strictly increasing epoch numbers."""

    def __init__(self):
        self._rows: list[dict] = []

    def append(self, epoch: int, lr: float, train_loss: float, exit_losses=(),
               linear_train_acc: float = math.nan, test_acc: float = math.nan,
               wall_seconds: float = 0.0) -> None:
        if self._rows and epoch <= self._rows[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} does not follow {self._rows[-1]['epoch']}")
        self._rows.append({
            "epoch": int(epoch),
            "lr": float(lr),
            "train_loss": float(train_loss),
            "exit_losses": tuple(float(v) for v in exit_losses),
            "linear_train_acc": float(linear_train_acc),
            "test_acc": float(test_acc),
            "wall_seconds": float(wall_seconds),
        })

    def __len__(self) -> int:
        return len(self._rows)

    def __getitem__(self, i) -> dict:
        return dict(self._rows[i])

    @property
    def rows(self) -> list[dict]:
        return [dict(r) for r in self._rows]

    def column(self, name: str) -> list:
        return [r[name] for r in self._rows]

    def deterministic_rows(self) -> list[tuple]:
        """Every field except wall-clock time, for reproducibility checks."""
        return [tuple(r[c] for c in METRICS_COLUMNS if c != "wall_seconds") for r in self._rows]

    def set_last(self, **values) -> None:
        self._rows[-1].update({k: float(v) for k, v in values.items()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self._rows:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]),
                        ";".join(repr(v) for v in r["exit_losses"]),
                        _fmt(r["linear_train_acc"]), _fmt(r["test_acc"]),
                        f"{r['wall_seconds']:.3f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(v)


# -- setup ----------------------------------------------------------------------

def prepare_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "file":
        ds = load_dataset(d.path)
    else:
        ds = generate_synthetic_clusters(d.classes, d.dim, d.per_class, d.separation, d.noise,
                                         seed=cfg.seed)
    if d.shuffle_labels:
        ds = ds.with_labels(np.random.default_rng([cfg.seed, 31337]).permutation(ds.labels))
    return train_test_split(ds, d.test_fraction, cfg.seed)


def encoder_from_config(cfg: TrainConfig, input_dim: int) -> MultiExitEncoder:
    e = cfg.encoder
    blocks = default_blocks(input_dim, e.widths, e.layers_per_block)
    return build_encoder(blocks, e.exits, e.head_dim, init_seed=cfg.seed, init=e.init)


def _policy(cfg: TrainConfig) -> AugmentationPolicy:
    d = cfg.data
    return AugmentationPolicy(d.augment, sigma=d.aug_sigma, mask_fraction=d.aug_mask, seed=cfg.seed)


def _batch_seed(epoch: int, step: int) -> int:
    return epoch * 1_000_003 + step


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _diverged(reason: str, last_good: dict, out_dir, epoch: int) -> DivergenceError:
    path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path = str(Path(out_dir) / "last_good.ckpt")
        save_checkpoint(path, last_good)
    return DivergenceError(f"{reason} at epoch {epoch}", path, epoch)


def _check_finite(loss: Tensor, last_good: dict, out_dir, epoch: int) -> None:
    if not np.isfinite(loss.item()):
        raise _diverged("non-finite loss", last_good, out_dir, epoch)


def _forward(enc: MultiExitEncoder, x, last_good: dict, out_dir, epoch: int, stop_grad: bool = False):
    """Forward pass where a dead (zero-norm) embedding counts as divergence."""
    try:
        return enc.forward(x, stop_grad_backbone_targets=stop_grad)
    except T.NormalizationError as exc:
        raise _diverged(f"zero-norm embedding ({exc})", last_good, out_dir, epoch) from exc


@dataclass
class TrainResult:
    encoder: MultiExitEncoder
    log: MetricsLog
    classifiers: dict[str, Linear] = field(default_factory=dict)
    train: Dataset | None = None
    test: Dataset | None = None
    skipped_fraction: float = 0.0       # empty-P anchors over the whole run

    @property
    def test_acc(self) -> float:
        return self.log[-1]["test_acc"] if len(self.log) else math.nan


@dataclass
class LinearEvalResult:
    train_acc: float
    test_acc: float
    log: MetricsLog
    classifier: Linear


# -- two-stage ----------------------------------------------------------------------

def pretrain(cfg: TrainConfig, data: tuple[Dataset, Dataset] | None = None,
             out_dir=None) -> TrainResult:
    """Stage one: contrastive (or plain CE) pretraining of the encoder.

    With ``loss.kind=ce`` a linear classifier on the backbone embedding is
    trained jointly and its test accuracy is logged every epoch.
    """
    train, test = data if data is not None else prepare_data(cfg)
    enc = encoder_from_config(cfg, train.dim)
    kind = cfg.loss.kind
    # with alpha=0 the multi-view SelfCon term vanishes and the exits go unused
    exits_live = kind.uses_exits and not (kind.multiview and cfg.loss.alpha == 0.0)
    params = enc.parameters() if exits_live else enc.backbone_parameters()
    classifiers: dict[str, Linear] = {}
    if kind is LossKind.CE:
        classifiers["backbone"] = Linear("classifier.backbone", cfg.encoder.head_dim, train.classes,
                                         np.random.default_rng([cfg.seed, 1]))
        params = params + classifiers["backbone"].parameters()
    bank = MemoryBank(cfg.bank.capacity, cfg.bank.exits) if cfg.bank.enabled else None
    policy = _policy(cfg)
    log = MetricsLog()
    sched = LrSchedule(cfg.optim.lr, max(cfg.epochs, 1), cfg.schedule_kind)
    last_good = dump_params(enc.parameters())
    anchors_seen = anchors_skipped = 0
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = sched.lr(epoch)
        losses, exit_losses = [], []
        for step, idx in enumerate(iterate_batches(len(train), cfg.batch_size, cfg.seed, epoch)):
            batch = make_batch(train, idx, policy, multiview=kind.multiview,
                               augment_single=cfg.data.single_view_augment and not kind.multiview,
                               seed=_batch_seed(epoch, step))
            out = _forward(enc, batch.features, last_good, out_dir, epoch)
            if kind is LossKind.CE:
                loss = cross_entropy_loss(classifiers["backbone"](out.backbone), batch.labels)
                per_exit = np.zeros(out.n_exits)
                per_exit[-1] = loss.item()
            else:
                try:
                    loss, br = contrastive_loss_parts(out, batch.labels, cfg.loss, bank=bank)
                except DegenerateBatchError:
                    logger.warning("epoch %d step %d: every anchor has an empty positive set; "
                                   "batch skipped", epoch, step)
                    anchors_seen += out.n_exits * out.rows
                    anchors_skipped += out.n_exits * out.rows
                    continue
                anchors_seen += br.anchors
                anchors_skipped += br.skipped
                per_exit = br.per_exit
            _check_finite(loss, last_good, out_dir, epoch)
            loss.backward()
            sgd_step(params, lr, cfg.optim.momentum, cfg.optim.weight_decay)
            if bank is not None:
                push_batch(bank, out, batch.labels)
            losses.append(loss.item())
            exit_losses.append(per_exit)
        last_good = dump_params(enc.parameters())
        train_loss = float(np.mean(losses)) if losses else math.nan
        mean_exits = np.mean(exit_losses, axis=0) if exit_losses else ()
        test_acc = math.nan
        if kind is LossKind.CE:
            with T.no_grad():
                logits = classifiers["backbone"](enc.forward(test.samples).backbone).data
            test_acc = _accuracy(logits, test.labels)
        log.append(epoch, lr, train_loss, mean_exits, test_acc=test_acc,
                   wall_seconds=time.perf_counter() - t0)

    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "encoder.ckpt", dump_params(enc.parameters()))
    skipped = anchors_skipped / anchors_seen if anchors_seen else 0.0
    return TrainResult(enc, log, classifiers, train, test, skipped)


def embed(encoder: MultiExitEncoder, samples: np.ndarray) -> np.ndarray:
    """Backbone embeddings, computed without recording a graph."""
    with T.no_grad():
        return encoder.forward(samples).backbone.data.copy()


def linear_eval(encoder: MultiExitEncoder, train: Dataset, test: Dataset,
                cfg: TrainConfig) -> LinearEvalResult:
    """Stage two: an affine classifier on the frozen backbone embedding."""
    enc_params = encoder.parameters()
    before = dump_params(enc_params)
    for p in enc_params:
        p.zero_grad()
    z_train, z_test = embed(encoder, train.samples), embed(encoder, test.samples)

    lc = cfg.linear
    clf = Linear("linear.classifier", z_train.shape[1], train.classes,
                 np.random.default_rng([cfg.seed, 2]))
    params = clf.parameters()
    sched = LrSchedule(lc.lr, lc.epochs, cfg.schedule_kind)
    log = MetricsLog()
    t0 = time.perf_counter()
    train_acc = test_acc = math.nan
    for epoch in range(lc.epochs):
        lr = sched.lr(epoch)
        losses = []
        for idx in iterate_batches(len(train), lc.batch_size, cfg.seed + 1, epoch, drop_last=False):
            loss = cross_entropy_loss(clf(Tensor(z_train[idx])), train.labels[idx])
            loss.backward()
            sgd_step(params, lr, cfg.optim.momentum, cfg.optim.weight_decay)
            losses.append(loss.item())
        with T.no_grad():
            train_acc = _accuracy(clf(Tensor(z_train)).data, train.labels)
            test_acc = _accuracy(clf(Tensor(z_test)).data, test.labels)
        log.append(epoch, lr, float(np.mean(losses)), (), train_acc, test_acc,
                   time.perf_counter() - t0)

    if any(p.grad is not None and np.any(p.grad) for p in enc_params):
        raise FreezeViolation("encoder parameters received gradients during linear evaluation")
    after = dump_params(enc_params)
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise FreezeViolation("encoder parameters changed during linear evaluation")
    return LinearEvalResult(train_acc, test_acc, log, clf)


# -- one-stage ----------------------------------------------------------------------

def one_stage_losses(enc: MultiExitEncoder, classifiers: dict[str, Linear], batch, cfg: TrainConfig,
                     ) -> tuple[Tensor, Tensor | None, np.ndarray]:
    """``(CE total, contrastive term, per-exit CE)`` for one batch.

    The contrastive term only has sub-network anchors, and the backbone
    embeddings it contrasts against are detached.
    """
    kind = cfg.loss.kind
    out = enc.forward(batch.features, stop_grad_backbone_targets=True)
    E = out.n_exits
    names = [f"exit{k}" for k in range(E - 1)] + ["backbone"]
    ces = [cross_entropy_loss(classifiers[n](out.embeddings[k]), batch.labels)
           for k, n in enumerate(names)]
    ce_total = ces[0]
    for c in ces[1:]:
        ce_total = ce_total + c
    contrast = None
    if cfg.beta > 0:
        sets = build_index_sets(kind, batch.labels, kind.multiview, E, batch.B)
        sets = restrict_anchors(sets, sets.anchors[:, 0] != E - 1)
        try:
            contrast, _ = contrastive_loss_parts(out, batch.labels, cfg.loss, sets=sets)
        except DegenerateBatchError:
            contrast = None
    return ce_total, contrast, np.array([c.item() for c in ces])


def one_stage_train(cfg: TrainConfig, data: tuple[Dataset, Dataset] | None = None,
                    out_dir=None) -> TrainResult:
    """CE on every exit's classifier plus ``beta`` times the sub-network
    contrastive term, optimised jointly."""
    train, test = data if data is not None else prepare_data(cfg)
    enc = encoder_from_config(cfg, train.dim)
    kind = cfg.loss.kind
    rng = np.random.default_rng([cfg.seed, 3])
    classifiers = {f"exit{k}": Linear(f"classifier.exit{k}", cfg.encoder.head_dim, train.classes, rng)
                   for k in range(len(enc.exits))}
    classifiers["backbone"] = Linear("classifier.backbone", cfg.encoder.head_dim, train.classes, rng)
    clf_params = [p for c in classifiers.values() for p in c.parameters()]
    params = enc.parameters() + clf_params
    policy = _policy(cfg)
    sched = LrSchedule(cfg.optim.lr, max(cfg.epochs, 1), cfg.schedule_kind)
    log = MetricsLog()
    last_good = dump_params(params)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = sched.lr(epoch)
        losses, exit_losses = [], []
        for step, idx in enumerate(iterate_batches(len(train), cfg.batch_size, cfg.seed, epoch)):
            batch = make_batch(train, idx, policy, multiview=kind.multiview,
                               augment_single=cfg.data.single_view_augment and not kind.multiview,
                               seed=_batch_seed(epoch, step))
            try:
                ce, contrast, per_exit = one_stage_losses(enc, classifiers, batch, cfg)
            except T.NormalizationError as exc:
                raise _diverged(f"zero-norm embedding ({exc})", last_good, out_dir, epoch) from exc
            loss = ce if contrast is None else ce + contrast * cfg.beta
            _check_finite(loss, last_good, out_dir, epoch)
            loss.backward()
            sgd_step(params, lr, cfg.optim.momentum, cfg.optim.weight_decay)
            losses.append(loss.item())
            exit_losses.append(per_exit)
        last_good = dump_params(params)
        with T.no_grad():
            z = enc.forward(test.samples).backbone
            test_acc = _accuracy(classifiers["backbone"](z).data, test.labels)
        log.append(epoch, lr, float(np.mean(losses)) if losses else math.nan,
                   np.mean(exit_losses, axis=0) if exit_losses else (),
                   test_acc=test_acc, wall_seconds=time.perf_counter() - t0)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "encoder.ckpt", dump_params(params))
    return TrainResult(enc, log, classifiers, train, test)


# -- full runs ----------------------------------------------------------------------

def run_training(cfg: TrainConfig, out_dir) -> dict:
    """Train per ``cfg.protocol`` and write config, checkpoint, metrics and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    data = prepare_data(cfg)
    summary: dict = {"config_hash": cfg.config_hash, "seed": cfg.seed, "protocol": cfg.protocol,
                     "loss_kind": cfg.loss.kind.value}
    if cfg.protocol == "one-stage":
        res = one_stage_train(cfg, data, out)
        enc = res.encoder
        with T.no_grad():
            logits = res.classifiers["backbone"](enc.forward(res.train.samples).backbone).data
        summary["final_train_acc"] = _accuracy(logits, res.train.labels)
        summary["final_test_acc"] = res.test_acc
        log = res.log
    else:
        res = pretrain(cfg, data, out)
        enc = res.encoder
        ev = linear_eval(enc, res.train, res.test, cfg)
        ev.log.write(out / "linear_eval.csv")
        log = res.log
        if len(log):
            log.set_last(linear_train_acc=ev.train_acc, test_acc=ev.test_acc)
        summary["final_train_acc"] = ev.train_acc
        summary["final_test_acc"] = ev.test_acc
        summary["skipped_anchor_fraction"] = res.skipped_fraction
    log.write(out / "metrics.csv")
    if len(log):
        summary["final_train_loss"] = log[-1]["train_loss"]
        summary["initial_train_loss"] = log[0]["train_loss"]
    if cfg.probe.pairs:
        from .mi import CriticConfig, mi_probe

        report = mi_probe(enc, _probe_subset(res.train, cfg), list(cfg.probe.pairs),
                          proj_dim=cfg.probe.proj_dim, seed=cfg.seed, steps=cfg.probe.steps,
                          critic_cfg=CriticConfig())
        report.to_csv(out / "probe.csv")
        report.means_to_csv(out / "probe_mean.csv")
        summary["mi"] = report.means()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _probe_subset(ds: Dataset, cfg: TrainConfig) -> Dataset:
    n = min(len(ds), cfg.probe.samples)
    return ds if n == len(ds) else ds.subset(np.arange(n))


def load_trained_encoder(cfg: TrainConfig, checkpoint, input_dim: int) -> MultiExitEncoder:
    from .checkpoint import load_checkpoint

    enc = encoder_from_config(cfg, input_dim)
    restore_params(enc.parameters(), load_checkpoint(checkpoint))
    return enc


GRID_COLUMNS = ("name", "config_hash", "seed") + METRICS_COLUMNS


def _grid_job(args) -> dict:
    name, cfg_text, out_dir = args
    from .config import parse_config

    cfg = parse_config(cfg_text)
    run_dir = Path(out_dir) / name
    run_training(cfg, run_dir)
    rows = list(csv.DictReader((run_dir / "metrics.csv").open()))
    last = rows[-1] if rows else {c: "" for c in METRICS_COLUMNS}
    return {"name": name, "config_hash": cfg.config_hash, "seed": cfg.seed,
            **{c: last[c] for c in METRICS_COLUMNS}}


def run_experiment_grid(configs: dict[str, TrainConfig], out_dir, workers: int = 1) -> str:
    """Run every named config and write ``grid.csv`` with each run's final
    MetricsLog row plus its config hash. Returns the CSV path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(name, cfg.to_text(), str(out / "runs")) for name, cfg in sorted(configs.items())]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_grid_job, jobs))
    else:
        rows = [_grid_job(j) for j in jobs]
    path = out / "grid.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, GRID_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return str(path)


def load_grid_configs(directory) -> dict[str, TrainConfig]:
    paths = sorted(Path(directory).glob("*.cfg")) + sorted(Path(directory).glob("*.txt"))
    return {p.stem: load_config(p) for p in paths}
