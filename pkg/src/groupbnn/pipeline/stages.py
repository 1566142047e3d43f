"""Pipeline stages: supernet training, search, retraining and evaluation.

Every stage reads and writes files in the run's output directory so that a
stage can be rerun or resumed on its own:

==========================  ===============================================
``supernet.ckpt``           shared-weight supernet (latest epoch)
``supernet_metrics.csv``    one row per supernet epoch
``search_history.csv``      one row per search iteration
``best_genome.toml``        searched group vector
``search_summary.json``     best fitness and the random-genome control group
``model.ckpt``              retrained model (latest epoch)
``retrain_metrics.csv``     one row per retraining epoch
``eval.json``               final test accuracy
==========================  ===============================================
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from groupbnn.architecture import (
    ConfigurationError,
    Network,
    NetworkConfig,
    ParameterStore,
    flop_breakdown,
    init_store,
    uniform_groups,
    validate_groups,
)
from groupbnn.evolution import (
    SearchResult,
    SearchSpace,
    evolve,
    sample_candidates,
    write_genome,
    write_history_csv,
)
from groupbnn.pipeline.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from groupbnn.pipeline.config import RunConfig
from groupbnn.pipeline.data import DatasetSplit
from groupbnn.pipeline.streams import get_state, named_stream, restore_stream
from groupbnn.training_engine import DivergenceError, TrainConfig, adam_step, softmax_cross_entropy

METRIC_FIELDS = ("epoch", "step", "lr", "train_loss", "train_top1", "val_top1", "val_top5",
                 "wall_seconds")


# --- evaluation helpers ---------------------------------------------------------------------


def predict(net: Network, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return np.concatenate([net.forward(images[i:i + batch_size], training=False)
                           for i in range(0, len(images), batch_size)])


def topk_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Top-1 and top-5 accuracy; top-5 becomes top-C when there are C < 5 classes."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty split")
    k = min(5, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = order == labels[:, None]
    return float(hits[:, 0].mean()), float(hits.any(axis=1).mean())


def check_compatible(config: NetworkConfig, split: DatasetSplit):
    c, h, w = split.image_shape
    if c != config.in_channels or (h, w) != tuple(config.input_size):
        raise ConfigurationError(
            f"{split.split_tag} images are {c}x{h}x{w}, network expects "
            f"{config.in_channels}x{config.input_size[0]}x{config.input_size[1]}")
    if len(split) and int(split.labels.max()) >= config.num_classes:
        raise ConfigurationError(
            f"{split.split_tag} labels reach {int(split.labels.max())}, "
            f"network has {config.num_classes} classes")


def recalibrated(config: NetworkConfig, store: ParameterStore, groups,
                 calib_images: np.ndarray) -> Network:
    """Network for ``groups`` whose BN statistics come from one calibration batch.

    The returned network owns its running statistics, so the supernet's
    buffers are untouched and several genomes can be scored concurrently.
    """
    net = Network(config, store, groups, {k: v.copy() for k, v in store.buffers.items()})
    bns = net.batchnorms()
    for bn in bns:
        bn.momentum = 1.0
    net.forward(calib_images, training=True)
    for bn in bns:
        bn.momentum = 0.1
        bn._cache = None
    return net


def calibration_batch(run: RunConfig, train: DatasetSplit) -> np.ndarray:
    size = min(run.search.calibration_size, len(train))
    idx = np.sort(named_stream(run.seed, "calib").choice(len(train), size, replace=False))
    return train.images[idx]


def fitness_subset(run: RunConfig, val: DatasetSplit) -> DatasetSplit:
    size = min(run.search.fitness_samples, len(val))
    idx = np.sort(named_stream(run.seed, "calib.fitness").choice(len(val), size, replace=False))
    return val.subset(idx)


def supernet_fitness(run: RunConfig, config: NetworkConfig, store: ParameterStore,
                     splits: dict[str, DatasetSplit]):
    """Genome -> top-1 accuracy on the fixed fitness subset after BN recalibration."""
    calib = calibration_batch(run, splits["train"])
    subset = fitness_subset(run, splits["val"])
    batch = run.train.eval_batch_size

    def fitness(genome) -> float:
        net = recalibrated(config, store, genome, calib)
        return topk_accuracy(predict(net, subset.images, batch), subset.labels)[0]

    return fitness


# --- metrics file ---------------------------------------------------------------------------


class MetricsLog:
    """Epoch rows in CSV; reopening with ``resume=True`` keeps earlier rows."""

    def __init__(self, path, resume: bool = False, keep_epochs: int | None = None):
        self.path = Path(path)
        rows = read_metrics(self.path) if resume and self.path.exists() else []
        if keep_epochs is not None:
            rows = [r for r in rows if r["epoch"] <= keep_epochs]
        self.rows = rows
        self._flush()

    def append(self, row: dict):
        self.rows.append(row)
        self._flush()

    def _flush(self):
        with open(self.path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = ("epoch", "step")
    return [{k: int(v) if k in ints else float(v) for k, v in r.items()} for r in rows]


# --- training --------------------------------------------------------------------------------


@dataclass
class Trainer:
    """Mini-batch Adam training of either a supernet or a fixed-group model.

    A supernet draws a fresh uniform genome from the ``groups`` stream for
    every step; a model keeps the genome it was built with.
    """

    kind: str
    config: NetworkConfig
    store: ParameterStore
    train_cfg: TrainConfig
    streams: dict[str, np.random.Generator]
    groups: tuple[int, ...] | None = None
    step: int = 0
    epoch: int = 0
    seed: int = 0
    eval_batch_size: int = 1000
    observed_genomes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind == "supernet":
            self.space = SearchSpace.for_network(self.config)
            self.net = Network(self.config, self.store, uniform_groups(self.config, 1))
        else:
            self.space = None
            self.net = Network(self.config, self.store, self.groups)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            kind=self.kind, network=self.config, params=self.store.params, buffers=self.store.buffers,
            groups=self.groups, rng_states={k: get_state(g) for k, g in sorted(self.streams.items())},
            step=self.step, epoch=self.epoch, train=asdict(self.train_cfg), meta={"seed": self.seed},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, eval_batch_size: int = 1000) -> "Trainer":
        store = ParameterStore(ckpt.params, ckpt.buffers, shared=ckpt.kind == "supernet")
        seed = int(ckpt.meta.get("seed", 0))
        streams = {k: restore_stream(seed, k, s) for k, s in ckpt.rng_states.items()}
        return cls(ckpt.kind, ckpt.network, store, TrainConfig(**ckpt.train), streams, ckpt.groups,
                   ckpt.step, ckpt.epoch, seed, eval_batch_size)

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.train_cfg.batch_size)

    def train_epoch(self, train: DatasetSplit) -> dict:
        bs = self.train_cfg.batch_size
        order = self.streams["shuffle"].permutation(len(train))
        lr = self.train_cfg.lr_at(self.step)
        params = list(self.store.params.values())
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if self.kind == "supernet":
                genome = self.space.random_genome(self.streams["groups"])
                self.net.set_groups(genome)
                self.observed_genomes.append(genome)
            self.store.zero_grad()
            logits = self.net.forward(train.images[idx], training=True)
            loss, dlogits = softmax_cross_entropy(logits, train.labels[idx])
            if not math.isfinite(loss):
                raise DivergenceError(self.step + 1, loss)
            self.net.backward(dlogits)
            self.step += 1
            for p in params:
                adam_step(p, self.train_cfg, self.step)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == train.labels[idx]).sum())
        self.epoch += 1
        return {"epoch": self.epoch, "step": self.step, "lr": lr,
                "train_loss": loss_sum / len(order), "train_top1": correct / len(order)}

    def eval_network(self, calib_images: np.ndarray | None = None) -> Network:
        """Inference network; a supernet is scored at groups=1 after BN recalibration."""
        if self.kind == "supernet":
            return recalibrated(self.config, self.store, uniform_groups(self.config, 1), calib_images)
        return self.net

    def fit(self, run: RunConfig, splits, epochs: int, metrics: MetricsLog,
            ckpt_path, on_epoch=None):
        train, val = splits["train"], splits["val"]
        calib = calibration_batch(run, train) if self.kind == "supernet" else None
        while self.epoch < epochs:
            t0 = time.perf_counter()
            row = self.train_epoch(train)
            top1, top5 = topk_accuracy(predict(self.eval_network(calib), val.images,
                                               self.eval_batch_size), val.labels)
            row.update(val_top1=top1, val_top5=top5, wall_seconds=time.perf_counter() - t0)
            save_checkpoint(ckpt_path, self.checkpoint())
            metrics.append(row)
            if on_epoch is not None:
                on_epoch(row)


def _check_resume(ckpt: Checkpoint, kind: str, config: NetworkConfig, total_steps: int, seed: int):
    if ckpt.kind != kind:
        raise ConfigurationError(f"expected a {kind} checkpoint, got {ckpt.kind}")
    if ckpt.network.to_dict() != config.to_dict():
        raise ConfigurationError("checkpoint network does not match the run configuration")
    if ckpt.train.get("total_steps") != total_steps:
        raise ConfigurationError(
            f"checkpoint was trained for {ckpt.train.get('total_steps')} total steps, "
            f"this run needs {total_steps}")
    if int(ckpt.meta.get("seed", -1)) != seed:
        raise ConfigurationError("checkpoint seed does not match the run seed")


def network_for(run: RunConfig, splits) -> NetworkConfig:
    train = splits["train"]
    c, h, w = train.image_shape
    num_classes = max(s.num_classes for s in splits.values())
    config = run.network_config(c, (h, w), num_classes)
    for split in splits.values():
        check_compatible(config, split)
    return config


def _new_trainer(run, splits, kind, epochs, groups=None) -> Trainer:
    config = network_for(run, splits)
    n = len(splits["train"])
    if n % run.train.batch_size == 1:
        raise ConfigurationError("the last mini-batch would hold a single sample; change batch_size")
    total = epochs * math.ceil(n / run.train.batch_size)
    init = named_stream(run.seed, f"{kind}.init")
    if kind == "supernet":
        store = init_store(config, init, shared=True)
    else:
        groups = validate_groups(config, groups)
        store = init_store(config, init, groups)
    streams = {"shuffle": named_stream(run.seed, f"{kind}.shuffle")}
    if kind == "supernet":
        streams["groups"] = named_stream(run.seed, f"{kind}.groups")
    return Trainer(kind, config, store, run.train.to_train_config(total), streams, groups,
                   seed=run.seed, eval_batch_size=run.train.eval_batch_size)


def _resume_trainer(run, splits, kind, epochs, resume) -> Trainer:
    ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
    config = network_for(run, splits)
    total = epochs * math.ceil(len(splits["train"]) / run.train.batch_size)
    _check_resume(ckpt, kind, config, total, run.seed)
    return Trainer.from_checkpoint(ckpt, run.train.eval_batch_size)


def train_supernet(run: RunConfig, splits, out_dir, resume=None, on_epoch=None) -> Trainer:
    """Weight-shared supernet training with a fresh random genome per mini-batch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is None:
        trainer = _new_trainer(run, splits, "supernet", run.supernet_epochs)
    else:
        trainer = _resume_trainer(run, splits, "supernet", run.supernet_epochs, resume)
    metrics = MetricsLog(out / "supernet_metrics.csv", resume=resume is not None,
                         keep_epochs=trainer.epoch)
    trainer.fit(run, splits, run.supernet_epochs, metrics, out / "supernet.ckpt", on_epoch)
    return trainer


def retrain(run: RunConfig, splits, genome, out_dir, resume=None, on_epoch=None) -> dict:
    """Train the searched network from fresh parameters, then score it on the test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is None:
        trainer = _new_trainer(run, splits, "model", run.retrain_epochs, genome)
    else:
        trainer = _resume_trainer(run, splits, "model", run.retrain_epochs, resume)
        if genome is not None and tuple(genome) != trainer.groups:
            raise ConfigurationError("checkpoint genome differs from the requested genome")
    metrics = MetricsLog(out / "retrain_metrics.csv", resume=resume is not None,
                         keep_epochs=trainer.epoch)
    trainer.fit(run, splits, run.retrain_epochs, metrics, out / "model.ckpt", on_epoch)
    result = evaluate(trainer.checkpoint(), splits["test"], run.train.eval_batch_size)
    result["epochs"] = trainer.epoch
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def evaluate(ckpt, split: DatasetSplit, batch_size: int = 1000) -> dict:
    """Top-1/top-5 of a model checkpoint on ``split``."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.kind != "model":
        raise ConfigurationError("evaluate needs a model checkpoint, not a supernet")
    check_compatible(ckpt.network, split)
    store = ParameterStore(ckpt.params, ckpt.buffers)
    net = Network(ckpt.network, store, ckpt.groups)
    top1, top5 = topk_accuracy(predict(net, split.images, batch_size), split.labels)
    return {"split": split.split_tag, "samples": len(split), "top1": top1, "top5": top5}


# --- search --------------------------------------------------------------------------------


@dataclass
class SearchOutcome:
    result: SearchResult
    control_fitness: list[float]
    flop_budget: float

    @property
    def best(self):
        return self.result.best

    @property
    def control_median(self) -> float:
        return float(np.median(self.control_fitness)) if self.control_fitness else math.nan


def search(run: RunConfig, splits, supernet, out_dir, workers: int | None = None) -> SearchOutcome:
    """Evolutionary search over the supernet, plus a random-genome control group."""
    ckpt = supernet if isinstance(supernet, Checkpoint) else load_checkpoint(supernet)
    if ckpt.kind != "supernet":
        raise ConfigurationError("search needs a supernet checkpoint")
    config = ckpt.network
    for split in splits.values():
        check_compatible(config, split)
    store = ParameterStore(ckpt.params, ckpt.buffers, shared=True)
    space = SearchSpace.for_network(config, run.search.flop_budget)
    space.check_budget()
    rng = named_stream(run.seed, "search")
    cfg = run.search.to_search_config(int(rng.integers(2**63)))
    if workers is None:
        workers = 1 if run.deterministic else run.search.workers
    fitness = supernet_fitness(run, config, store, splits)
    result = evolve(space, cfg, fitness, workers=workers)
    best = result.best
    if best.flops > space.budget:
        raise AssertionError("search returned a genome over the FLOP budget")

    controls = []
    if run.search.random_controls:
        control_cfg = run.search.to_search_config(0)
        control_cfg.population_size = run.search.random_controls
        for cand in sample_candidates(space, control_cfg, rng):
            if cand.genome not in result.evaluated:
                result.evaluated[cand.genome] = float(fitness(cand.genome))
            controls.append(result.evaluated[cand.genome])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_history_csv(out / "search_history.csv", result.history)
    write_genome(out / "best_genome.toml", best.genome, flops=best.flops, fitness=best.fitness)
    summary = {
        "best_genome": list(best.genome),
        "best_fitness": best.fitness,
        "best_flops": best.flops,
        "flop_budget": space.budget if math.isfinite(space.budget) else "inf",
        "genomes_evaluated": len(result.evaluated),
        "control_fitness": controls,
        "control_median": float(np.median(controls)) if controls else None,
    }
    (out / "search_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return SearchOutcome(result, controls, space.budget)


# --- FLOPs -----------------------------------------------------------------------------------


def report_flops(config: NetworkConfig, genome=None) -> dict:
    """Per-layer FLOPs with binary and full-precision totals kept apart."""
    genome = uniform_groups(config, 1) if genome is None else validate_groups(config, genome)
    rows = flop_breakdown(config, genome)
    binary = sum(r.flops for r in rows if r.binary)
    full = sum(r.flops for r in rows if not r.binary)
    return {
        "genome": list(genome),
        "layers": [{"name": r.name, "binary": r.binary, "macs": r.macs, "flops": r.flops} for r in rows],
        "binary_macs": sum(r.macs for r in rows if r.binary),
        "binary_flops": binary,
        "full_precision_flops": full,
        "total_flops": binary + full,
    }
