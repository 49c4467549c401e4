"""Joint training of the classifier and rationalizer branches.

One epoch: shuffled minibatches, one backward of the summed objective per
batch, an Adam step, then the environment set is re-inferred by k-means
over the non-rationale representations of the whole training split.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .diffcore import Tensor
from .graphdata import Dataset, GraphBatch, collate
from .metrics import EvalReport, accuracy, env_agreement, precision_at_k
from .models import (RATIONALE, Architecture, C2RModel, build_model, encode_graph,
                     generate_counterfactual, predict, save_checkpoint, separate)

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, terms: dict):
        self.epoch, self.batch, self.terms = epoch, batch, terms
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {terms}")


# ------------------------------------------------------------- loss weights

@dataclass
class LossWeights:
    lambda_cou: float = 1.0
    lambda_cycle: float = 0.01
    lambda_sp: float = 0.01
    lambda_dis: float = 1.0
    alpha: float = 0.4
    tau_nce: float = 0.2


@dataclass
class AblationFlags:
    no_cycle: bool = False
    no_cou: bool = False
    no_dis: bool = False


def effective_weights(w: LossWeights, flags: AblationFlags) -> dict[str, float]:
    """Coefficient of every objective term after applying ablation flags."""
    return {
        "ori": 1.0,
        "cou": 0.0 if flags.no_cou else w.lambda_cou,
        "cycle": 0.0 if flags.no_cycle else w.lambda_cycle,
        "r": 1.0,
        "sp": w.lambda_sp,
        "dis": 0.0 if flags.no_dis else w.lambda_dis,
    }


# ----------------------------------------------------------- MI surrogates

def _nce_logits(anchors: Tensor, positives: Tensor, tau: float) -> Tensor:
    a = dc.l2_normalize_rows(anchors)
    p = dc.l2_normalize_rows(positives)
    return dc.scale(dc.matmul(a, dc.transpose(p)), 1.0 / tau)


def infonce_loss(anchors: Tensor, positives: Tensor, tau: float = 0.2) -> Tensor:
    """In-batch InfoNCE on cosine similarities; ``log n - loss`` lower-bounds MI."""
    if anchors.shape != positives.shape:
        raise dc.DimensionError("infonce_loss", anchors.shape, positives.shape)
    n = anchors.shape[0]
    if n < 2:
        raise dc.ContractError("infonce_loss needs at least 2 rows (one negative)")
    return dc.cross_entropy_with_logits(_nce_logits(anchors, positives, tau), np.arange(n))


def kl_align_loss(student: Tensor, teacher: Tensor, tau: float = 0.2) -> Tensor:
    """KL(teacher || student) between row-softmaxed similarity-to-teacher maps."""
    target = dc.row_softmax(_nce_logits(teacher, teacher, tau)).data
    log_q = dc.log_softmax(_nce_logits(student, teacher, tau))
    n = target.shape[0]
    entropy = float((target * np.log(np.maximum(target, 1e-300))).sum()) / n
    return dc.scale(dc.tsum(dc.hadamard(log_q, Tensor(target))), -1.0 / n) + entropy


def mse_align_loss(student: Tensor, teacher: Tensor) -> Tensor:
    return dc.mean(dc.square(student - teacher))


def cycle_loss(eg, h_cf: Tensor, e_m: np.ndarray, h_en: Tensor, tau: float = 0.2) -> Tensor:
    """Map the counterfactual back with the original environment and ask the
    result to identify its own source graph among the batch."""
    recon = generate_counterfactual(eg, h_cf, e_m)
    return infonce_loss(recon, h_en, tau)


def distill_loss(h_r: Tensor, h_en: Tensor, tau: float = 0.2, align: str = "infonce",
                 stop_grad: bool = True) -> Tensor:
    teacher = dc.detach(h_en) if stop_grad else h_en
    if align == "infonce":
        return infonce_loss(h_r, teacher, tau)
    if align == "kl":
        return kl_align_loss(h_r, teacher, tau)
    if align == "mse":
        return mse_align_loss(h_r, teacher)
    raise ValueError(f"unknown alignment {align!r}")


def sparsity_loss(m_rationale: Tensor, segment_ids, n_graphs: int, alpha: float) -> Tensor:
    """Batch mean of ``|mean selection probability of graph - alpha|``."""
    per_graph = dc.segment_mean(m_rationale, segment_ids, n_graphs)
    return dc.mean(dc.absolute(per_graph - alpha))


# ------------------------------------------------------------------ k-means

@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    sse_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(points, k: int, rng: np.random.Generator | int = 0, max_iters: int = 100,
           tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    ``sse_history[t]`` is the within-cluster SSE after the assignment step
    of iteration ``t``; it never increases.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise dc.ContractError(f"kmeans needs 1 <= k <= n, got k={k}, n={n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[j:j + 1])[:, 0])

    history = []
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        assign = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), assign].sum()))
        new = np.empty_like(centroids)
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # empty cluster: take the point worst served by its own centroid
            own = d[np.arange(n), assign]
            far = int(np.argmax(own))
            new[j] = x[far]
            assign[far] = j
            d[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    assign = np.argmin(d, axis=1)
    return KMeansResult(centroids, assign, history, it)


# ------------------------------------------------------------- environments

@dataclass
class EnvironmentSet:
    centroids: np.ndarray
    assignments: np.ndarray

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def non_rationale_embeddings(model: C2RModel, batch: GraphBatch) -> np.ndarray:
    """Noiseless forward pass: ``h_n`` under the soft selection probabilities."""
    sep = separate(model.separator, model.gnn_g, batch, rng=None, hard=False)
    return sep.h_n.data


def refresh_environments(model: C2RModel, train_batch: GraphBatch, k: int,
                         rng: np.random.Generator, max_iters: int = 100,
                         tol: float = 1e-6) -> EnvironmentSet:
    h_n = non_rationale_embeddings(model, train_batch)
    res = kmeans(h_n, k, rng, max_iters=max_iters, tol=tol)
    return EnvironmentSet(res.centroids, res.assignments)


def sample_other_envs(assignments: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """One environment per sample, uniform over the ``k - 1`` it is not in."""
    if k < 2:
        raise ValueError("need k >= 2 environments to draw a different one")
    return (assignments + 1 + rng.integers(k - 1, size=assignments.shape)) % k


# -------------------------------------------------------------- loss terms

def task_losses(model: C2RModel, batch: GraphBatch, env_m: np.ndarray | None,
                env_j: np.ndarray | None, env: EnvironmentSet | None,
                gumbel_rng: np.random.Generator | None, weights: dict[str, float],
                loss_cfg, h_cache: dict | None = None,
                straight_through: bool = False) -> dict[str, Tensor]:
    """Every objective term of one batch that carries a nonzero coefficient.

    Terms with coefficient zero are not built, so a zero weight and a
    dropped term give bit-identical gradients.
    """
    terms: dict[str, Tensor] = {}
    y = batch.labels
    h_en = None
    if model.has_classifier:
        _, h_en = encode_graph(model.encoder, batch)
        logits_en = predict(model.predictor, h_en)
        terms["ori"] = dc.cross_entropy_with_logits(logits_en, y)
        if h_cache is not None:
            h_cache["logits_en"] = logits_en.data
        need_cf = model.eg is not None and (weights["cou"] > 0 or weights["cycle"] > 0)
        if need_cf:
            e_j = env.centroids[env_j]
            h_cf = generate_counterfactual(model.eg, h_en, e_j)
            if weights["cou"] > 0:
                terms["cou"] = dc.cross_entropy_with_logits(predict(model.predictor, h_cf), y)
            if weights["cycle"] > 0:
                terms["cycle"] = cycle_loss(model.eg, h_cf, env.centroids[env_m], h_en,
                                            loss_cfg.tau_nce)
    if model.has_rationalizer:
        sep = separate(model.separator, model.gnn_g, batch, gumbel_rng, hard=False,
                       straight_through=straight_through)
        logits_r = predict(model.predictor, sep.h_r)
        terms["r"] = dc.cross_entropy_with_logits(logits_r, y)
        if weights["sp"] > 0:
            terms["sp"] = sparsity_loss(dc.select_col(sep.m_tilde, RATIONALE),
                                        batch.segment_ids, batch.n_graphs, loss_cfg.alpha)
        if h_en is not None and weights["dis"] > 0:
            terms["dis"] = distill_loss(sep.h_r, h_en, loss_cfg.tau_nce, loss_cfg.align,
                                        loss_cfg.distill_stop_grad)
        if h_cache is not None:
            h_cache["logits_r"] = logits_r.data
    return terms


def total_loss(terms: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    """Weighted sum in a fixed term order; zero-weight terms are skipped."""
    total = None
    for name in ("ori", "cou", "cycle", "r", "sp", "dis"):
        w = weights.get(name, 0.0)
        if name not in terms or w == 0.0:
            continue
        t = terms[name] if w == 1.0 else dc.scale(terms[name], w)
        total = t if total is None else total + t
    if total is None:
        raise ValueError("objective has no terms")
    return total


# --------------------------------------------------------------- evaluation

@dataclass
class Predictions:
    logits_r: np.ndarray | None
    logits_en: np.ndarray | None
    m_tilde: np.ndarray | None  # rationale-channel probability per node
    node_scores: np.ndarray | None = None  # log m_r - log m_n, same order as m_tilde


def forward_eval(model: C2RModel, batch: GraphBatch) -> Predictions:
    logits_en = logits_r = m_rat = scores = None
    if model.has_classifier:
        _, h_en = encode_graph(model.encoder, batch)
        logits_en = predict(model.predictor, h_en).data
    if model.has_rationalizer:
        hard = separate(model.separator, model.gnn_g, batch, rng=None, hard=True)
        logits_r = predict(model.predictor, hard.h_r).data
        m_rat = hard.m_tilde.data[:, RATIONALE]
        # the logit margin keeps the ranking resolvable once probabilities round to 1
        z = model.separator.logits(batch).data
        scores = z[:, RATIONALE] - z[:, 1 - RATIONALE]
    return Predictions(logits_r, logits_en, m_rat, scores)


def evaluate(model: C2RModel, batch: GraphBatch, k: int = 5) -> EvalReport:
    """Task accuracy from ``h_r`` with hard masks (or ``h_en`` for the
    plain classifier), plus Precision@k of the selection probabilities."""
    pred = forward_eval(model, batch)
    y = batch.labels
    extra = {}
    prec = None
    if pred.logits_r is not None:
        acc = accuracy(pred.logits_r.argmax(1), y)
        if pred.logits_en is not None:
            extra["acc_en"] = accuracy(pred.logits_en.argmax(1), y)
        if batch.rationale_mask is not None:
            cuts = np.cumsum(batch.sizes)[:-1]
            scores = np.split(pred.node_scores, cuts)
            masks = np.split(batch.rationale_mask, cuts)
            prec = precision_at_k(scores, masks, k).precision
        per_graph = np.bincount(batch.segment_ids, weights=pred.m_tilde) / batch.sizes
        extra["mask_mean"] = float(per_graph.mean())
    else:
        acc = accuracy(pred.logits_en.argmax(1), y)
    return EvalReport(acc=acc, n_samples=int(len(y)), precision_at_k=prec, extra=extra)


# ------------------------------------------------------------------ trainer

@dataclass
class C2RTrainer:
    cfg: RunConfig
    seed: int
    train: Dataset
    val: Dataset
    model: C2RModel = field(init=False)
    env: EnvironmentSet | None = field(init=False, default=None)
    epoch: int = field(init=False, default=0)

    def __post_init__(self):
        c = self.cfg
        d_in = self.train.graphs[0].node_features.shape[1]
        arch = Architecture(kind=c.model.kind, backbone=c.model.backbone, d_in=d_in, d=c.model.d,
                            n_layers=c.model.n_layers, n_classes=3, tau=c.model.tau)
        self.model = build_model(arch, self.seed)
        self.opt = dc.Adam(self.model.named_parameters(), lr=c.optim.lr)
        self.weights = effective_weights(
            LossWeights(c.loss.lambda_cou, c.loss.lambda_cycle, c.loss.lambda_sp,
                        c.loss.lambda_dis, c.loss.alpha, c.loss.tau_nce),
            AblationFlags(c.ablation.no_cycle, c.ablation.no_cou, c.ablation.no_dis))
        root = dc.Rng(self.seed)
        self.rng_shuffle = root.stream("shuffle")
        self.rng_gumbel = root.stream("gumbel")
        self.rng_env = root.stream("env-sample")
        self._kmeans_root = root
        self.train_batch = collate(self.train.graphs)
        self.val_batch = collate(self.val.graphs)
        self.n_classes = arch.n_classes

    @property
    def uses_envs(self) -> bool:
        return self.model.arch.kind == "c2r"

    def refresh(self) -> None:
        if not self.uses_envs:
            return
        e = self.cfg.env
        self.env = refresh_environments(self.model, self.train_batch, e.k,
                                        self._kmeans_root.child("kmeans", self.epoch),
                                        e.kmeans_max_iters, e.kmeans_tol)

    def env_agreement(self) -> float | None:
        if self.env is None:
            return None
        return env_agreement(self.env.assignments, self.train.env_hints)

    def train_epoch(self) -> dict:
        self.epoch += 1
        n = len(self.train)
        bs = self.cfg.optim.batch_size
        order = self.rng_shuffle.permutation(n)
        sums: dict[str, float] = {}
        correct = 0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            batch = collate([self.train.graphs[i] for i in idx])
            env_m = env_j = None
            if self.uses_envs:
                env_m = self.env.assignments[idx]
                env_j = sample_other_envs(env_m, self.env.k, self.rng_env)
            cache: dict = {}
            terms = task_losses(self.model, batch, env_m, env_j, self.env, self.rng_gumbel,
                                self.weights, self.cfg.loss, cache,
                                self.cfg.model.mask_mode == "straight-through")
            loss = total_loss(terms, self.weights)
            values = {k: float(v.data) for k, v in terms.items()}
            values["total"] = float(loss.data)
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(self.epoch, b, values)
            self.opt.zero_grad()
            dc.backward(loss)
            self.opt.step()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            logits = cache.get("logits_r", cache.get("logits_en"))
            correct += int((logits.argmax(1) == batch.labels).sum())
        self.refresh()
        rec = {"epoch": self.epoch, "split": "train"}
        rec.update({f"loss_{k}": v / n for k, v in sorted(sums.items())})
        rec["acc"] = correct / n
        rec["env_agreement"] = self.env_agreement()
        return rec

    def val_record(self) -> tuple[dict, EvalReport]:
        rep = evaluate(self.model, self.val_batch)
        rec = {"epoch": self.epoch, "split": "val", **rep.metrics(),
               "env_agreement": self.env_agreement()}
        return rec, rep


def snapshot(model: C2RModel) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def restore(model: C2RModel, snap: dict[str, np.ndarray]) -> None:
    for k, p in model.named_parameters().items():
        p.data = snap[k].copy()


def dump_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


@dataclass
class RunResult:
    records: list[dict]
    test: EvalReport
    best_epoch: int
    model: C2RModel


def train(cfg: RunConfig, seed: int, train_set: Dataset, val_set: Dataset, test_set: Dataset,
          out_dir: str | Path | None = None) -> RunResult:
    """Full protocol for one seed: warm-start environments, ``epochs`` epochs,
    best-validation model selection, and a hard-mask test evaluation."""
    trainer = C2RTrainer(cfg, seed, train_set, val_set)
    records: list[dict] = []
    stream = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stream = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")

    def emit(rec: dict) -> None:
        records.append(rec)
        if stream is not None:
            stream.write(dump_record(rec) + "\n")

    try:
        trainer.refresh()
        rec, rep = trainer.val_record()
        emit(rec)
        best_acc, best_epoch, best = rep.acc, 0, snapshot(trainer.model)
        for _ in range(cfg.optim.epochs):
            emit(trainer.train_epoch())
            rec, rep = trainer.val_record()
            emit(rec)
            if rep.acc > best_acc:
                best_acc, best_epoch, best = rep.acc, trainer.epoch, snapshot(trainer.model)
            log.debug("seed %d epoch %d val acc %.4f", seed, trainer.epoch, rep.acc)
        restore(trainer.model, best)
        test = evaluate(trainer.model, collate(test_set.graphs))
        test.seed = seed
        emit({"epoch": best_epoch, "split": "test", **test.metrics()})
    finally:
        if stream is not None:
            stream.close()
    if out_dir is not None:
        save_checkpoint(trainer.model, out_dir / "checkpoint", cfg.digest())
    return RunResult(records, test, best_epoch, trainer.model)
