"""Synchronous decentralized training loop with optional IDKD label exchange.

Every round each node computes a minibatch gradient at its current
parameters, the parameters are gossip-averaged with the mixing matrix, and
the local update is applied on top of the mixed parameters::

    x_i <- sum_j w_ij x_j - lr * d_i

``d_i`` is the raw gradient (DSGD), a heavy-ball buffer (DSGDm), or the
quasi-global direction (QG-DSGDm-N)::

    g_hat = g / ||g||
    d     = g_hat + beta * m
    m    <- beta * m + (1 - beta) * (x_before - x_after) / lr
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data as data_mod
from .config import DEFAULT_LR, ExperimentConfig, validate
from .data import Dataset, GaussianMixture, UniformNoise
from .distill import (
    InProcessTransport,
    TrainingPool,
    build_training_pool,
    exchange_labels,
    generate_soft_labels,
    label_average,
)
from .errors import InvalidInputError
from .metrics import (
    CommLedger,
    close_iteration,
    histogram_from_counts,
    record_label_exchange,
    record_param_gossip,
    soft_class_histogram,
    tv_distance,
)
from .model import LossSpec, MlpModel, average_models, backward, evaluate, init_mlp
from .ood import calibrate_threshold, msp_scores, select_id_subset
from .topology import Graph, MixingMatrix, build_graph, metropolis_weights

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
_NORM_EPS = 1e-12


@dataclass
class NodeState:
    node_id: int
    model: MlpModel            # params is a row view of the engine's parameter matrix
    momentum_buf: np.ndarray
    qg_momentum_buf: np.ndarray
    rng: np.random.Generator
    pool: TrainingPool | None = None
    val_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # pool materialized for batching
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    soft: np.ndarray | None = None
    soft_mask: np.ndarray | None = None
    order: np.ndarray | None = None
    batch_cursor: int = 0

    def load_pool(self, pool: TrainingPool, private: Dataset, public: Dataset | None,
                  num_classes: int, soft_private: bool = False) -> None:
        self.pool = pool
        feats = [private.features[pool.private_indices]]
        n_priv, n_pub = pool.n_private, pool.n_public
        labels = np.concatenate([pool.private_labels, np.full(n_pub, -1, dtype=np.int64)])
        soft = np.zeros((n_priv + n_pub, num_classes), dtype=np.float64)
        mask = np.zeros(n_priv + n_pub, dtype=bool)
        if n_pub:
            feats.append(public.features[pool.public_indices])
            soft[n_priv:] = pool.public_probs
            mask[n_priv:] = True
        if soft_private and n_priv:
            soft[np.arange(n_priv), pool.private_labels] = 1.0
            mask[:n_priv] = True
            labels[:n_priv] = -1
        self.features = np.concatenate(feats).astype(self.model.dtype)
        self.labels = labels
        self.soft = soft
        self.soft_mask = mask
        self.order = None
        self.batch_cursor = 0

    def next_batch(self, batch_size: int, tau: float, weight_decay: float):
        n = len(self.labels)
        if self.order is None or self.batch_cursor >= n:
            self.order = self.rng.permutation(n)
            self.batch_cursor = 0
        sel = self.order[self.batch_cursor:self.batch_cursor + batch_size]
        self.batch_cursor += len(sel)
        mask = self.soft_mask[sel]
        spec = LossSpec(labels=self.labels[sel], soft=self.soft[sel] if mask.any() else None,
                        soft_mask=mask if mask.any() else None, tau=tau, weight_decay=weight_decay)
        return self.features[sel], spec


def node_rng(seed: int, node_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xB0, int(node_id))))


# ----------------------------------------------------------------- steps


def compute_gradients(nodes: Sequence[NodeState], batches, executor: ThreadPoolExecutor | None = None):
    """Per-node ``(loss, grad)`` at the current parameters, returned in node order."""
    def one(k):
        x, spec = batches[k]
        return backward(nodes[k].model, x, spec)
    if executor is None:
        return [one(k) for k in range(len(nodes))]
    return list(executor.map(one, range(len(nodes))))


def _param_matrix(nodes):
    return np.stack([n.model.params for n in nodes])


def _mix(mixing: MixingMatrix, params: np.ndarray) -> np.ndarray:
    if mixing.n != params.shape[0]:
        raise InvalidInputError(f"mixing matrix is {mixing.n}x{mixing.n} for {params.shape[0]} nodes")
    return (mixing.w @ params).astype(params.dtype)


def _write_back(nodes, new_params):
    for n, p in zip(nodes, new_params):
        n.model.params[...] = p


def dsgd_step(nodes, grads, mixing: MixingMatrix, lr: float) -> None:
    x = _param_matrix(nodes)
    dt = x.dtype.type
    g = np.stack(grads).astype(x.dtype, copy=False)
    _write_back(nodes, _mix(mixing, x) - dt(lr) * g)


def dsgdm_step(nodes, grads, mixing: MixingMatrix, lr: float, beta: float) -> None:
    x = _param_matrix(nodes)
    dt = x.dtype.type
    for n, g in zip(nodes, grads):
        n.momentum_buf[...] = dt(beta) * n.momentum_buf + g
    m = np.stack([n.momentum_buf for n in nodes])
    _write_back(nodes, _mix(mixing, x) - dt(lr) * m)


def normalize_gradient(g: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.dot(g.astype(np.float64), g.astype(np.float64)))
    return (g / g.dtype.type(norm + _NORM_EPS)).astype(g.dtype)


def qg_dsgdm_n_step(nodes, grads, mixing: MixingMatrix, lr: float, beta: float) -> None:
    x = _param_matrix(nodes)
    dt = x.dtype.type
    d = np.stack([normalize_gradient(g) + dt(beta) * n.qg_momentum_buf for n, g in zip(nodes, grads)])
    new = _mix(mixing, x) - dt(lr) * d
    for n, before, after in zip(nodes, x, new):
        n.qg_momentum_buf[...] = dt(beta) * n.qg_momentum_buf + dt(1 - beta) * ((before - after) / dt(lr))
    _write_back(nodes, new)


def consensus_model(nodes: Sequence[NodeState]) -> MlpModel:
    return average_models([n.model for n in nodes])


def consensus_eval(nodes: Sequence[NodeState], test_set: Dataset):
    """Accuracy and cross-entropy of the uniform parameter average on a labeled set."""
    if test_set.labels is None:
        raise InvalidInputError("consensus evaluation needs a labeled test set")
    return evaluate(consensus_model(nodes), test_set.features, test_set.labels)


# ------------------------------------------------------------------ data


@dataclass(frozen=True, eq=False)
class ExperimentData:
    train: Dataset
    test: Dataset
    public: Dataset
    calibration: Dataset | None   # None: reuse public-set scores


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.data
    if d.dataset == "synthetic":
        mix = GaussianMixture(d.num_classes, d.dims, d.spread, d.scale)
        train = mix.sample(d.train_per_class, d.seed, "train")
        test = mix.sample(d.test_per_class, d.seed + 1, "test")
        heldout = mix.sample(-(-d.public_size // d.num_classes), d.seed + 2, "heldout")
        source_public = heldout
    else:
        if d.dataset == "idx":
            full = data_mod.load_idx(d.train_images, d.train_labels, d.num_classes, "train")
            test = (data_mod.load_idx(d.test_images, d.test_labels, d.num_classes, "test")
                    if d.test_images else None)
        else:
            schema = data_mod.CsvSchema(d.label_column, d.num_classes)
            full = data_mod.load_csv(d.train_csv, schema, "train")
            test = data_mod.load_csv(d.test_csv, schema, "test") if d.test_csv else None
        if full.labels is None:
            raise InvalidInputError("training data needs labels")
        if d.public == "slice":
            if d.public_size >= len(full):
                raise InvalidInputError("public_size leaves no training data")
            source_public = full.subset(np.arange(len(full) - d.public_size, len(full)))
            full = full.subset(np.arange(len(full) - d.public_size))
        else:
            source_public = None
        if test is None:
            full, test = data_mod.train_val_split(full, 0.1, d.seed)
        train = full if d.max_train is None else full.subset(np.arange(min(d.max_train, len(full))))
        mix = None
    if d.public == "slice":
        public = data_mod.make_public_set(source_public, d.public_size)
    elif d.public == "mixture":
        if mix is None:
            raise InvalidInputError("mixture public sets need the synthetic dataset")
        public = data_mod.make_public_set(data_mod.shifted(mix, d.public_shift), d.public_size, seed=d.seed + 3)
    else:
        public = data_mod.make_public_set(UniformNoise(train.dims), d.public_size, seed=d.seed + 3,
                                          num_classes=d.num_classes)
    if public.dims != train.dims:
        raise InvalidInputError(f"public set has {public.dims} features, training set {train.dims}")
    calibration = None
    if d.calibration == "uniform":
        calibration = data_mod.make_public_set(UniformNoise(train.dims), d.public_size, seed=d.seed + 4,
                                               num_classes=d.num_classes)
    return ExperimentData(train, test, public, calibration)


# ---------------------------------------------------------------- record


@dataclass
class RunRecord:
    seed: int
    events: list[dict]
    final_acc: float
    final_loss: float
    iterations: int
    ledger: CommLedger
    exchanges: list[dict]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def _lr_factor(progress: float, points, factor: float) -> float:
    return factor ** sum(1 for p in points if progress >= p)


class Simulation:
    """Holds node states for one (config, seed) run."""

    def __init__(self, cfg: ExperimentConfig, seed: int, data: ExperimentData | None = None,
                 sink: Callable[[dict], None] | None = None, workers: int | None = None):
        self.cfg = validate(cfg)
        self.seed = int(seed)
        self.data = data or build_data(cfg)
        self.sink = sink
        self.workers = cfg.run.workers if workers is None else workers
        self.events: list[dict] = []
        self.ledger = CommLedger()
        self.exchanges: list[dict] = []
        self.dtype = np.dtype(cfg.run.dtype)
        d = cfg.data
        self.num_classes = d.num_classes
        self.graph: Graph = build_graph(cfg.topology.name, cfg.n_nodes)
        self.mixing = metropolis_weights(self.graph)
        n = self.graph.n
        train = self.data.train
        self.partition = data_mod.dirichlet_partition(train.labels, n, d.alpha, self.seed)
        dims = (train.dims, *cfg.model.hidden, d.num_classes)
        rngs = [node_rng(self.seed, i) for i in range(n)]
        models = [init_mlp(dims, rngs[i], cfg.model.activation, self.dtype) for i in range(n)]
        self.params = np.stack([m.params for m in models])
        self.momentum = np.zeros_like(self.params)
        self.qg_momentum = np.zeros_like(self.params)
        self.nodes: list[NodeState] = []
        for i in range(n):
            idx = self.partition.node_indices[i]
            val = np.zeros(0, dtype=np.int64)
            if d.val_fraction > 0 and int(round(d.val_fraction * len(idx))) >= 1 and len(idx) >= 2:
                split_rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0xA1, i)))
                keep, held = data_mod.split_indices(len(idx), d.val_fraction, split_rng)
                idx, val = idx[keep], idx[held]
            node = NodeState(i, MlpModel(dims, cfg.model.activation, self.params[i]),
                             self.momentum[i], self.qg_momentum[i], rngs[i], val_indices=val)
            node.load_pool(build_training_pool(idx, train.labels[idx], num_classes=d.num_classes),
                           train, None, d.num_classes, cfg.idkd.soft_private_targets)
            self.nodes.append(node)
        self.n_params = models[0].parameter_count()
        self.initial_pool_total = sum(len(nd.pool) for nd in self.nodes)
        train_labels = np.concatenate([nd.pool.private_labels for nd in self.nodes])
        self.global_hist = histogram_from_counts(np.bincount(train_labels, minlength=d.num_classes))

    # -------------------------------------------------------------- events

    def emit(self, event: dict) -> None:
        self.events.append(event)
        if self.sink is not None:
            self.sink(event)

    def iterations_per_epoch(self) -> int:
        total = sum(len(nd.pool) for nd in self.nodes)
        return max(1, math.ceil(total / (self.graph.n * self.cfg.optimizer.batch_size)))

    # ---------------------------------------------------------------- IDKD

    def idkd_event(self, epoch: int, iteration: int) -> dict:
        cfg, data = self.cfg, self.data
        tau = cfg.idkd.tau
        subsets, cals = [], []
        hist_pre = [soft_class_histogram(nd.pool, self.num_classes) for nd in self.nodes]
        for nd in self.nodes:
            records = generate_soft_labels(nd.model, data.public, tau)
            if len(nd.val_indices):
                id_scores = msp_scores(nd.model, data.train.features[nd.val_indices])
            else:
                id_scores = msp_scores(nd.model, data.train.features[nd.pool.private_indices])
            if data.calibration is None:
                ood_scores = np.array([r.msp for r in records])
            else:
                ood_scores = msp_scores(nd.model, data.calibration)
            cal = calibrate_threshold(id_scores, ood_scores)
            cals.append(cal)
            subsets.append(select_id_subset(records, cal.t_opt))
        result = exchange_labels(subsets, self.graph, self.num_classes, InProcessTransport(self.graph))
        for i, nd in enumerate(self.nodes):
            averaged = label_average(subsets[i], result.received[i])
            pool = build_training_pool(nd.pool.private_indices, nd.pool.private_labels, averaged,
                                       num_classes=self.num_classes)
            nd.load_pool(pool, data.train, data.public, self.num_classes,
                         cfg.idkd.soft_private_targets)
        hist_post = [soft_class_histogram(nd.pool, self.num_classes) for nd in self.nodes]
        sent = result.bytes_sent(self.graph.n)
        record_label_exchange(self.ledger, sent)
        summary = {
            "event": "idkd_exchange",
            "epoch": epoch,
            "iter": iteration,
            "subset_sizes": [len(s) for s in subsets],
            "t_opt": [c.t_opt for c in cals],
            "tpr": [c.tpr_at_t for c in cals],
            "fpr": [c.fpr_at_t for c in cals],
            "pool_sizes": [len(nd.pool) for nd in self.nodes],
            "message_bytes": sent,
            "hist_pre": [h.shares.tolist() for h in hist_pre],
            "hist_post": [h.shares.tolist() for h in hist_post],
            "tv_pre": [tv_distance(h, self.global_hist) for h in hist_pre],
            "tv_post": [tv_distance(h, self.global_hist) for h in hist_post],
        }
        self.exchanges.append(summary)
        self.emit(summary)
        return summary

    # ---------------------------------------------------------------- loop

    def _validation_loss(self) -> float:
        idx = np.concatenate([nd.val_indices for nd in self.nodes])
        if idx.size == 0:
            idx = np.concatenate([nd.pool.private_indices for nd in self.nodes])
        train = self.data.train
        return evaluate(consensus_model(self.nodes), train.features[idx], train.labels[idx])[1]

    def run(self) -> RunRecord:
        cfg = self.cfg
        opt, run = cfg.optimizer, cfg.run
        lr0, beta = opt.resolved_lr, opt.momentum
        wd = opt.resolved_weight_decay
        tau = cfg.idkd.tau
        iso_iter = run.iso == "iso_iteration"
        ipe0 = self.iterations_per_epoch()
        budget = run.iteration_budget if iso_iter else None
        total_epochs = math.ceil(budget / ipe0) if iso_iter else run.total_epochs
        degrees = self.graph.degrees().tolist()
        per_iter_bytes = 0
        self.emit({
            "event": "run_start", "seed": self.seed, "n_nodes": self.graph.n, "topology": self.graph.name,
            "n_params": self.n_params, "bytes_per_param": BYTES_PER_PARAM, "degrees": degrees,
            "optimizer": opt.name, "lr": lr0, "lr_default": DEFAULT_LR[opt.name], "weight_decay": wd, "momentum": beta,
            "iso": run.iso, "iterations_per_epoch": ipe0, "total_epochs": total_epochs,
            "partition_sizes": self.partition.sizes(), "idkd": cfg.idkd.enabled,
        })
        start = cfg.idkd.exchange_start_epoch
        if start is None:
            start = max(1, math.floor(0.8 * total_epochs))
        period = cfg.idkd.exchange_period or total_epochs
        plateau_start = None
        val_history: list[float] = []
        executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        t = 0
        try:
            for epoch in range(1, total_epochs + 1):
                ipe = ipe0 if iso_iter else self.iterations_per_epoch()
                losses = np.zeros(self.graph.n)
                steps = 0
                for _ in range(ipe):
                    if iso_iter and t >= budget:
                        break
                    progress = t / budget if iso_iter else (epoch - 1) / total_epochs
                    lr = lr0 * _lr_factor(progress, opt.lr_decay_points, opt.lr_decay_factor)
                    batches = [nd.next_batch(opt.batch_size, tau, wd) for nd in self.nodes]
                    out = compute_gradients(self.nodes, batches, executor)
                    grads = [g for _, g in out]
                    losses += [l for l, _ in out]
                    if opt.name == "dsgd":
                        dsgd_step(self.nodes, grads, self.mixing, lr)
                    elif opt.name == "dsgdm":
                        dsgdm_step(self.nodes, grads, self.mixing, lr, beta)
                    else:
                        qg_dsgdm_n_step(self.nodes, grads, self.mixing, lr, beta)
                    per_iter_bytes = 0
                    for deg in degrees:
                        per_iter_bytes += record_param_gossip(self.ledger, self.n_params, BYTES_PER_PARAM, deg)
                    close_iteration(self.ledger, per_iter_bytes)
                    t += 1
                    steps += 1
                if steps:
                    for i in range(self.graph.n):
                        self.emit({"epoch": epoch, "iter": t, "node": i, "train_loss": float(losses[i] / steps)})
                if run.eval_every and epoch % run.eval_every == 0:
                    acc, loss = consensus_eval(self.nodes, self.data.test)
                    self.emit({"event": "eval", "epoch": epoch, "iter": t, "consensus_acc": acc,
                               "consensus_loss": loss})
                if iso_iter and t >= budget:
                    break
                if not cfg.idkd.enabled:
                    continue
                if cfg.idkd.plateau_detection:
                    val_history.append(self._validation_loss())
                    w = cfg.idkd.plateau_window
                    if plateau_start is None and len(val_history) > w and \
                            val_history[-w - 1] - min(val_history[-w:]) < cfg.idkd.plateau_tol:
                        plateau_start = epoch
                    first = plateau_start
                else:
                    first = start
                if first is not None and epoch >= first and (epoch - first) % period == 0:
                    self.idkd_event(epoch, t)
        finally:
            if executor is not None:
                executor.shutdown()
        acc, loss = consensus_eval(self.nodes, self.data.test)
        self.emit({"event": "eval", "epoch": epoch, "iter": t, "consensus_acc": acc, "consensus_loss": loss})
        self.emit({"event": "run_end", "iterations": t, "gossip_bytes": self.ledger.gossip_bytes,
                   "label_bytes": self.ledger.label_bytes, "final_acc": acc, "final_loss": loss})
        return RunRecord(self.seed, self.events, acc, loss, t, self.ledger, self.exchanges)


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, *, data: ExperimentData | None = None,
                   sink: Callable[[dict], None] | None = None, workers: int | None = None) -> RunRecord:
    """Run one seed of an experiment; ``seed`` defaults to the first configured seed."""
    seed = cfg.run.seeds[0] if seed is None else seed
    return Simulation(cfg, seed, data, sink, workers).run()
