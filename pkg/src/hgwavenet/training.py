"""Training loop, Adam, the evaluation protocol, ranking metrics and gradient checking."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .config import RunConfig
from .manifold import NumericalDivergenceError
from .graph_data import DynamicGraph, EdgeSampleBatch, Snapshot, sample_negative_edges, synthetic_dynamic_graph
from .model import HGWaveNet, cross_entropy_loss, edge_scores, htc_loss, total_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Raised on a non-finite loss or gradient; ``state`` holds the last good parameters."""

    def __init__(self, msg, state=None, epoch=None):
        super().__init__(msg)
        self.state = state
        self.epoch = epoch


# ----------------------------------------------------------------------------- gradients / optimizer

def backward(tape: ad.GradientTape, loss, params: dict) -> dict[str, np.ndarray]:
    """Adjoints of ``loss`` for every named parameter (zeros where the loss does not reach)."""
    names = list(params)
    grads = tape.gradient(loss, [params[k] for k in names])
    return dict(zip(names, grads))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """In-place Adam update on the (unconstrained) parameter values."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingDivergedError(f"non-finite gradient for parameter {k!r} ({bad} entries)")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.value)
            state.v[k] = np.zeros_like(p.value)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.value = p.value - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ----------------------------------------------------------------------------- training

@dataclass
class SnapshotCache:
    """Diffusion stacks and CSR parts, built once per graph and model structure."""

    stacks: list
    parts: list

    @classmethod
    def build(cls, model: HGWaveNet, graph: DynamicGraph) -> "SnapshotCache":
        stacks = [model.diffusion_stack(s) for s in graph.snapshots]
        return cls(stacks, [model.prepare(st) for st in stacks])


def _train_negatives(graph: DynamicGraph, t: int, seed: int, epoch: int) -> EdgeSampleBatch:
    snap = graph.snapshots[t]
    return sample_negative_edges(snap, len(snap.edges), seed=(seed, epoch, t))


def snapshot_losses(model: HGWaveNet, graph: DynamicGraph, cache: SnapshotCache, epoch: int,
                    upto: int | None = None):
    """Roll through the training snapshots once; returns per-snapshot (ce, htc) lists.

    ``Z_{t-1}`` (from ``G_{t-1}``) is scored against the edges of ``G_t`` for
    ``t < upto`` (default: the split).  A snapshot without edges contributes no
    cross-entropy term.
    """
    cfg = model.config
    buffer = model.new_buffer()
    c = model.curvature()
    ces, htcs = [], []
    prev = None
    for t in range(1, graph.split if upto is None else upto):
        Z = model.forward_snapshot(cache.stacks[t - 1], buffer, cache.parts[t - 1])
        batch = _train_negatives(graph, t, cfg.seed_neg_train, epoch)
        ces.append(cross_entropy_loss(Z, batch, cfg.r, cfg.s, c, model.geom) if len(batch.positives) else 0.0)
        htcs.append(htc_loss(prev, Z, c, model.geom) if prev is not None else 0.0)
        prev = Z
    return ces, htcs


@dataclass
class TrainResult:
    model: HGWaveNet
    trace: list = field(default_factory=list)
    best_epoch: int | None = None
    best_loss: float | None = None
    stopped_early: bool = False


def train(graph: DynamicGraph, config: RunConfig, model: HGWaveNet | None = None, cache=None,
          callback=None) -> TrainResult:
    """Fit the model on snapshots ``0 .. split-1``; every later snapshot is held out.

    Default: one Adam step per epoch on the loss summed over the training
    snapshots.  ``config.step_per_snapshot`` steps after every snapshot instead.
    The returned model carries the parameters of the best-loss epoch.
    """
    model = model or HGWaveNet(graph.num_nodes, config)
    cache = cache or SnapshotCache.build(model, graph)
    opt = OptimizerState(lr=config.lr)
    result = TrainResult(model)
    if config.epochs == 0 or graph.split < 2:
        return result
    best_state = model.state_dict()
    since_best = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        last_good = model.state_dict()
        try:
            loss, ce_sum, htc_sum = _run_epoch(model, graph, cache, epoch, opt, last_good)
        except NumericalDivergenceError as e:
            raise TrainingDivergedError(f"epoch {epoch}: {e}", last_good, epoch) from None
        rec = {"epoch": epoch, "loss": loss, "ce": ce_sum, "htc": htc_sum}
        log.debug("epoch %d loss %.6f (%.3fs)", epoch, loss, time.perf_counter() - t0)
        result.trace.append(rec)
        if callback is not None:
            callback(rec)
        if result.best_loss is None or loss < result.best_loss:
            result.best_loss, result.best_epoch = loss, epoch
            best_state = last_good  # loss was measured on the pre-step parameters
            since_best = 0
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                result.stopped_early = True
                break
    model.load_state_dict(best_state)
    return result


def _run_epoch(model, graph, cache, epoch, opt, last_good):
    if model.config.step_per_snapshot:
        return _epoch_per_snapshot(model, graph, cache, epoch, opt, last_good)
    with ad.GradientTape() as tape:
        ces, htcs = snapshot_losses(model, graph, cache, epoch)
        loss_t = total_loss(ces, htcs, model.config.lam)
    loss = float(ad.value(loss_t))
    ce_sum = float(sum(float(ad.value(x)) for x in ces))
    htc_sum = float(sum(float(ad.value(x)) for x in htcs))
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}", last_good, epoch)
    grads = backward(tape, loss_t, model.params)
    try:
        optimizer_step(model.params, grads, opt)
    except TrainingDivergedError as e:
        raise TrainingDivergedError(f"epoch {epoch}: {e}", last_good, epoch) from None
    return loss, ce_sum, htc_sum


def _epoch_per_snapshot(model, graph, cache, epoch, opt, last_good):
    """Ablation mode: one Adam step per training snapshot, history detached between steps."""
    cfg = model.config
    buffer = model.new_buffer()
    prev = None
    loss_sum = ce_sum = htc_sum = 0.0
    for t in range(1, graph.split):
        c = model.curvature()
        with ad.GradientTape() as tape:
            Z = model.forward_snapshot(cache.stacks[t - 1], buffer, cache.parts[t - 1])
            batch = _train_negatives(graph, t, cfg.seed_neg_train, epoch)
            ce = cross_entropy_loss(Z, batch, cfg.r, cfg.s, c, model.geom) if len(batch.positives) else 0.0
            htc = htc_loss(prev, Z, c, model.geom) if prev is not None else 0.0
            loss_t = ad.add(ce, ad.mul(cfg.lam, htc))
        loss = float(ad.value(loss_t))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, snapshot {t}", last_good, epoch)
        loss_sum += loss
        ce_sum += float(ad.value(ce))
        htc_sum += float(ad.value(htc))
        if isinstance(loss_t, ad.Tensor):
            try:
                optimizer_step(model.params, backward(tape, loss_t, model.params), opt)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"epoch {epoch}: {e}", last_good, epoch) from None
        buffer = buffer.detached()
        prev = buffer.latest()
    return loss_sum, ce_sum, htc_sum


# ----------------------------------------------------------------------------- metrics

def roc_auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC with average ranks for ties (ties count one half)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def average_precision(pos_scores, neg_scores) -> float:
    """Step-wise area under the precision-recall curve, one step per distinct score."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0:
        raise ValueError("AP needs at least one positive score")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(labels)[ends]
    seen = ends + 1.0
    precision = tp / seen
    recall = tp / len(pos)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# ----------------------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    per_snapshot: list = field(default_factory=list)
    averages: dict = field(default_factory=dict)
    seed_init: int | None = None
    seed_neg_eval: int | None = None
    seconds: float = 0.0
    warnings: list = field(default_factory=list)

    def records(self) -> list[dict]:
        """JSON-ready rows; wall-clock time is left out so reruns compare byte for byte."""
        rows = [dict(kind="snapshot", **r) for r in self.per_snapshot]
        for task, m in self.averages.items():
            rows.append({"kind": "average", "task": task, **m,
                         "seed_init": self.seed_init, "seed_neg_eval": self.seed_neg_eval})
        return rows


def eval_positives(graph: DynamicGraph, t: int, task: str) -> np.ndarray:
    snap = graph.snapshots[t]
    if task == "link":
        return snap.edges
    if task == "new_link":
        before = graph.snapshots[t - 1].edge_set()
        keep = [e for e in map(tuple, snap.edges.tolist()) if e not in before]
        return np.array(keep, dtype=np.int64).reshape(-1, 2)
    raise ValueError(f"unknown task {task!r}")


def warm_state(model: HGWaveNet, graph: DynamicGraph, cache=None):
    """Roll through the ground-truth training snapshots; returns Z from the last of them."""
    cache = cache or SnapshotCache.build(model, graph)
    buffer = model.new_buffer()
    Z = None
    with ad.no_grad():
        for t in range(graph.split):
            Z = ad.value(model.forward_snapshot(cache.stacks[t], buffer, cache.parts[t]))
    return Z


def evaluate(model: HGWaveNet, graph: DynamicGraph, config: RunConfig | None = None,
             cache=None) -> EvalReport:
    """Score every held-out snapshot with the representation built from the training prefix.

    Negatives for snapshot ``t`` come from a generator seeded by
    ``(seed_neg_eval, t)`` and never coincide with an edge of ``G_t``.
    """
    config = config or model.config
    t0 = time.perf_counter()
    tasks = ["link", "new_link"] if config.task == "both" else [config.task]
    Z = warm_state(model, graph, cache)
    c = float(ad.value(model.curvature()))
    report = EvalReport(seed_init=config.seed_init, seed_neg_eval=config.seed_neg_eval)
    for task in tasks:
        aucs, aps = [], []
        for t in range(graph.split, len(graph)):
            pos = eval_positives(graph, t, task)
            if len(pos) == 0:
                msg = f"snapshot {t}: no positives for task {task}; skipped"
                log.warning(msg)
                report.warnings.append(msg)
                continue
            neg = sample_negative_edges(graph.snapshots[t], len(pos),
                                        seed=(config.seed_neg_eval, t, 0 if task == "link" else 1)).negatives
            with ad.no_grad():
                ps = ad.value(edge_scores(Z, pos, config.r, config.s, c, model.geom))
                ns = ad.value(edge_scores(Z, neg, config.r, config.s, c, model.geom))
            auc, ap = roc_auc(ps, ns), average_precision(ps, ns)
            aucs.append(auc)
            aps.append(ap)
            report.per_snapshot.append({"task": task, "t": t, "auc": auc, "ap": ap, "positives": int(len(pos))})
        if aucs:
            report.averages[task] = {"auc": float(np.mean(aucs)), "ap": float(np.mean(aps)),
                                     "snapshots": len(aucs)}
    report.seconds = time.perf_counter() - t0
    return report


# ----------------------------------------------------------------------------- gradient check

def gradcheck_fixture(seed: int = 0) -> DynamicGraph:
    """The standard 10-node, 3-snapshot graph (split 2: two training snapshots)."""
    return synthetic_dynamic_graph(num_nodes=10, num_snapshots=3, split=2, branching=2,
                                   edges_per_snapshot=12, seed=seed)


def gradcheck_config(**overrides) -> RunConfig:
    base = dict(dim=4, K=1, D=2, S=2, L=2, layers=4)
    base.update(overrides)
    return RunConfig(**base).validate()


def param_group(name: str) -> str:
    """Group key for a parameter name: ``hdgc.1.W0`` -> ``hdgc.W``."""
    parts = name.split(".")
    if len(parts) == 1:
        return name
    tail = parts[-1].rstrip("0123456789") or parts[-1]
    return f"{parts[0]}.{tail}"


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # group -> relative error
    tolerance: float = 1e-3
    seconds: float = 0.0

    @property
    def failures(self) -> list[str]:
        return sorted(k for k, v in self.errors.items() if not v < self.tolerance)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _fixture_loss(model, graph, cache):
    # every snapshot takes part, so history, HTC and the HDCC taps all get exercised
    ces, htcs = snapshot_losses(model, graph, cache, epoch=0, upto=len(graph))
    return total_loss(ces, htcs, model.config.lam)


def grad_check(config: RunConfig | None = None, graph: DynamicGraph | None = None, model=None,
               step: float = 1e-5, tolerance: float = 1e-3, corrupt: str | None = None) -> GradCheckReport:
    """Compare tape gradients with central differences for every parameter group.

    Group error is ``||analytic - fd|| / max(||fd||, 1e-8)`` over all entries of
    the group.  ``corrupt`` names a primitive whose adjoint is doubled during the
    analytic pass (negative control).
    """
    t0 = time.perf_counter()
    config = config or gradcheck_config()
    graph = graph or gradcheck_fixture()
    model = model or HGWaveNet(graph.num_nodes, config)
    report = GradCheckReport(tolerance=tolerance)
    if not model.params:
        return report
    cache = SnapshotCache.build(model, graph)

    def analytic():
        with ad.GradientTape() as tape:
            loss = _fixture_loss(model, graph, cache)
        return backward(tape, loss, model.params)

    if corrupt is not None:
        prim = ad.get_primitive(corrupt)
        orig = prim.vjp

        def doubled(*a, **kw):
            return tuple(None if g is None else 2.0 * g for g in orig(*a, **kw))

        with ad.override_adjoint(corrupt, doubled):
            grads = analytic()
    else:
        grads = analytic()

    fd = {}
    with ad.no_grad():
        for name, p in model.params.items():
            base = p.value.copy()
            out = np.zeros_like(base)
            flat = out.reshape(-1)
            for i in range(base.size):
                pert = base.copy().reshape(-1)
                pert[i] += step
                p.value = pert.reshape(base.shape)
                up = float(ad.value(_fixture_loss(model, graph, cache)))
                pert[i] -= 2 * step
                p.value = pert.reshape(base.shape)
                down = float(ad.value(_fixture_loss(model, graph, cache)))
                flat[i] = (up - down) / (2 * step)
            p.value = base
            fd[name] = out

    groups: dict[str, list[str]] = {}
    for name in model.params:
        groups.setdefault(param_group(name), []).append(name)
    for g, names in groups.items():
        a = np.concatenate([grads[n].ravel() for n in names])
        f = np.concatenate([fd[n].ravel() for n in names])
        report.errors[g] = float(np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-8))
    report.seconds = time.perf_counter() - t0
    return report
