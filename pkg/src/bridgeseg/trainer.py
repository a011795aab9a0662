"""Joint dual-branch training (LSB) and the Oracle / Source-Only / PL baselines."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Graph, NumericError, Tensor, adam_step
from .config import KEYS, RunConfig
from .data import Batch, Dataset, EpochSampler
from .losses import (LabelMatrix, alignment_loss, class_centroids, consistency_loss,
                     seg_loss_bridge, seg_loss_source, total_loss)
from .metrics import evaluate_branch
from .nets import (NetworkSpec, ParamSet, argmax_rows, classify, extract_features,
                   init_params, params_to_records, project, write_checkpoint)
from .teacher import TeacherState, ema_update, init_teacher, teacher_pseudo_label

CSV_COLUMNS = ("step", "seg_s", "seg_b", "con", "ali", "total", "val_miou_src", "val_miou_tgt")
ACTIVATION_CODE = {"tanh": 0.0, "relu": 1.0}


class NonFiniteLoss(NumericError):
    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        super().__init__(f"non-finite loss at step {step}: {terms}")


@dataclass
class MetricsRecord:
    step: int
    seg_s: float = 0.0
    seg_b: float = 0.0
    con: float = 0.0
    ali: float = 0.0
    total: float = 0.0
    val_miou_src: float | None = None
    val_miou_tgt: float | None = None
    wall_clock: float = 0.0

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.step)] + [fmt(getattr(self, c)) for c in CSV_COLUMNS[1:]]


@dataclass
class TrainState:
    source: ParamSet | None
    target: ParamSet
    teacher: TeacherState | None = None
    adam: AdamState = field(default_factory=AdamState)

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        if self.source is not None:
            out.update({f"source.{n}": t for n, t in self.source.items()})
        out.update({f"target.{n}": t for n, t in self.target.items()})
        return out


@dataclass
class RunResult:
    cfg: RunConfig
    state: TrainState
    best_source: ParamSet | None
    best_target: ParamSet
    best_step: int
    records: list[MetricsRecord]
    summary: dict = field(default_factory=dict)


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# stream ids for derive_seed
_INIT_SOURCE, _INIT_TARGET, _SAMPLE_S, _SAMPLE_B, _SAMPLE_T, _INIT_TARGET_PL = range(6)


def branch_specs(cfg: RunConfig, d1: int, d2: int, num_classes: int) -> tuple[NetworkSpec, NetworkSpec]:
    """Network specs of both branches, with the projection ablations applied.

    Without p_h the target projection maps into the source feature space;
    without p_phi the source projection maps into the target feature space.
    """
    proj_s: int | None = cfg.proj_dim
    proj_t: int | None = cfg.proj_dim
    if not cfg.use_ph and not cfg.use_pphi:
        proj_s = proj_t = None
    elif not cfg.use_ph:
        proj_s, proj_t = None, cfg.feat_dim
    elif not cfg.use_pphi:
        proj_s, proj_t = cfg.feat_dim, None
    common = dict(num_classes=num_classes, hidden_dims=cfg.hidden_dims,
                  feat_dim=cfg.feat_dim, activation=cfg.activation)
    return (NetworkSpec(input_dim=d1, proj_dim=proj_s, **common),
            NetworkSpec(input_dim=d2, proj_dim=proj_t, **common))


def init_state(cfg: RunConfig, d1: int, d2: int, num_classes: int) -> TrainState:
    spec_s, spec_t = branch_specs(cfg, d1, d2, num_classes)
    source = init_params(spec_s, derive_seed(cfg.seed, _INIT_SOURCE), role="source")
    target = init_params(spec_t, derive_seed(cfg.seed, _INIT_TARGET), role="target")
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    return TrainState(source, target, init_teacher(source, cfg.alpha_max), adam)


def _labels(pred: np.ndarray, num_classes: int, source: str) -> LabelMatrix:
    return LabelMatrix.from_labels(pred, num_classes, source)


def compute_losses(state: TrainState, batches: dict[str, Batch], cfg: RunConfig) -> dict[str, Tensor]:
    """Forward pass of every active term; call inside an active Graph."""
    src, tgt = state.source, state.target
    num_classes = src.spec.num_classes
    w = cfg.weights
    b_s, b_b, b_t = batches["S"], batches["B"], batches["T"]

    # teacher labels are constants: computed from plain arrays, never recorded
    pseudo_b = LabelMatrix(teacher_pseudo_label(state.teacher, b_b.x_m1), "teacher-pseudo")
    x_s, x_bs, x_bt = Tensor(b_s.x_m1), Tensor(b_b.x_m1), Tensor(b_b.x_m2)

    parts: dict[str, Tensor] = {}
    feats_s = extract_features(src, x_s)
    parts["seg_s"] = seg_loss_source(classify(src, feats_s), _labels(b_s.labels, num_classes, "ground-truth"))

    feats_bt = extract_features(tgt, x_bt)
    logp_bt = classify(tgt, feats_bt)
    parts["seg_b"] = seg_loss_bridge(logp_bt, pseudo_b)

    if cfg.use_con and w.lambda_c > 0:
        proj_bs = project(src, extract_features(src, x_bs))
        proj_bt = project(tgt, feats_bt)
        reg = src.projection_tensors() + tgt.projection_tensors()
        parts["con"] = consistency_loss(proj_bs, proj_bt, reg, w.lambda_w)

    if cfg.use_ali and w.lambda_a > 0:
        feats_t = extract_features(tgt, Tensor(b_t.x_m2))
        yhat_t = argmax_rows(classify(tgt, feats_t).values)
        cent_t = class_centroids(project(tgt, feats_t), _labels(yhat_t, num_classes, "target-pseudo"), "target")
        if cfg.align_variant == "source_target":
            cent_ref = class_centroids(project(src, feats_s),
                                       _labels(b_s.labels, num_classes, "ground-truth"), "source")
        else:
            yhat_b = argmax_rows(logp_bt.values)
            cent_ref = class_centroids(project(tgt, feats_bt),
                                       _labels(yhat_b, num_classes, "target-pseudo"), "target")
        parts["ali"] = alignment_loss(cent_ref, cent_t)

    parts["total"] = total_loss(parts, w, cfg.use_con, cfg.use_ali)
    return parts


def _record(step: int, parts: dict[str, Tensor]) -> MetricsRecord:
    values = {k: parts[k].item() if k in parts else 0.0 for k in ("seg_s", "seg_b", "con", "ali", "total")}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLoss(step, values)
    return MetricsRecord(step=step, **values)


def train_step(state: TrainState, batches: dict[str, Batch], cfg: RunConfig, step: int = 0) -> MetricsRecord:
    """One LSB iteration: losses, backward, Adam over both branches, then EMA."""
    params = state.trainable()
    for p in params.values():
        p.zero_grad()
    with Graph() as graph:
        parts = compute_losses(state, batches, cfg)
    rec = _record(step + 1, parts)
    graph.backward(parts["total"])
    state.adam.lr = cfg.lr_at(step)
    adam_step(params, state.adam)
    ema_update(state.teacher, state.source)
    return rec


# --- supervised loops for the baselines -----------------------------------

def supervised_step(params: ParamSet, adam: AdamState, pairs: list[tuple[np.ndarray, np.ndarray]],
                    lr: float, step: int, column: str) -> MetricsRecord:
    """Cross-entropy step of one branch on (inputs, labels) pairs; the pair losses are averaged."""
    named = {n: t for n, t in params.items() if not n.startswith("projection.")}
    for p in named.values():
        p.grad = None
    num_classes = params.spec.num_classes
    with Graph() as graph:
        terms = [seg_loss_source(classify(params, extract_features(params, Tensor(x))),
                                 _labels(y, num_classes, "ground-truth")) for x, y in pairs]
        loss = terms[0]
        for t in terms[1:]:
            loss = ad.add(loss, t)
        loss = ad.scale(loss, 1.0 / len(terms))
    rec = _record(step + 1, {column: loss, "total": loss})
    graph.backward(loss)
    adam.lr = lr
    adam_step(named, adam)
    return rec


# --- run drivers ----------------------------------------------------------

class _Tracker:
    """Periodic validation and best-checkpoint bookkeeping."""

    def __init__(self, dataset: Dataset, cfg: RunConfig, select: str):
        self.dataset = dataset
        self.cfg = cfg
        self.select = select  # "src" or "tgt": which val score picks the best checkpoint
        self.best_score = -math.inf
        self.best_step = 0
        self.best: dict[str, ParamSet | None] = {}

    def due(self, local_step: int, total: int) -> bool:
        return (local_step + 1) % self.cfg.eval_every == 0 or local_step + 1 == total

    def evaluate(self, rec: MetricsRecord, source: ParamSet | None, target: ParamSet | None) -> None:
        if source is not None:
            rec.val_miou_src = evaluate_branch(source, self.dataset[("S", "val")], "m1")["miou"]
        if target is not None:
            rec.val_miou_tgt = evaluate_branch(target, self.dataset[("T", "val")], "m2")["miou"]
        score = rec.val_miou_src if self.select == "src" else rec.val_miou_tgt
        if score is not None and score > self.best_score:
            self.best_score, self.best_step = score, rec.step
            self.best = {"source": source.clone() if source is not None else None,
                         "target": target.clone() if target is not None else None}


def _samplers(dataset: Dataset, cfg: RunConfig, *domains: str) -> dict[str, EpochSampler]:
    stream = {"S": _SAMPLE_S, "B": _SAMPLE_B, "T": _SAMPLE_T}
    return {d: EpochSampler(dataset[(d, "train")], cfg.batch_size, derive_seed(cfg.seed, stream[d]))
            for d in domains}


def train_lsb(dataset: Dataset, cfg: RunConfig,
              on_step: Callable[[MetricsRecord], None] | None = None) -> RunResult:
    spec = dataset.spec
    state = init_state(cfg, spec.d1, spec.d2, spec.num_classes)
    samplers = _samplers(dataset, cfg, "S", "B", "T")
    tracker = _Tracker(dataset, cfg, "tgt")
    records = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batches = {d: s.next_batch() for d, s in samplers.items()}
        rec = train_step(state, batches, cfg, step)
        if tracker.due(step, cfg.steps):
            tracker.evaluate(rec, state.source, state.target)
        rec.wall_clock = time.perf_counter() - t0
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return RunResult(cfg, state, tracker.best["source"], tracker.best["target"], tracker.best_step, records)


def _fit(params: ParamSet, cfg: RunConfig, draw: Callable[[], list], column: str,
         tracker: _Tracker, records: list, offset: int, role: str, t0: float) -> None:
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    for step in range(cfg.steps):
        rec = supervised_step(params, adam, draw(), cfg.lr_at(step), offset + step, column)
        if tracker.due(step, cfg.steps):
            tracker.evaluate(rec, params if role == "source" else None, params if role == "target" else None)
        rec.wall_clock = time.perf_counter() - t0
        records.append(rec)


def train_baseline(dataset: Dataset, cfg: RunConfig) -> RunResult:
    """Oracle, Source-Only or PL; only Oracle reads target labels."""
    if cfg.method not in ("oracle", "source_only", "pl"):
        raise ValueError(f"train_baseline does not handle method {cfg.method!r}")
    spec = dataset.spec
    spec_s, spec_t = branch_specs(cfg, spec.d1, spec.d2, spec.num_classes)
    target = init_params(spec_t, derive_seed(cfg.seed, _INIT_TARGET), role="target")
    samplers = _samplers(dataset, cfg, "S", "B", "T")
    records: list[MetricsRecord] = []
    t0 = time.perf_counter()

    if cfg.method == "oracle":
        tracker = _Tracker(dataset, cfg, "tgt")

        def draw_t():
            b = samplers["T"].next_batch()
            return [(b.x_m2, b.reveal_labels())]

        _fit(target, cfg, draw_t, "seg_b", tracker, records, 0, "target", t0)
        return RunResult(cfg, TrainState(None, target), None, tracker.best["target"],
                         tracker.best_step, records)

    # stage 1: source branch on labelled S
    source = init_params(spec_s, derive_seed(cfg.seed, _INIT_SOURCE), role="source")
    track_s = _Tracker(dataset, cfg, "src")

    def draw_s():
        b = samplers["S"].next_batch()
        return [(b.x_m1, b.labels)]

    _fit(source, cfg, draw_s, "seg_s", track_s, records, 0, "source", t0)
    frozen = track_s.best["source"]

    # stage 2: target branch on bridge pseudo-labels from the frozen source branch
    track_t = _Tracker(dataset, cfg, "tgt")

    def draw_b():
        b = samplers["B"].next_batch()
        return [(b.x_m2, argmax_rows(classify(frozen, extract_features(frozen, Tensor(b.x_m1))).values))]

    _fit(target, cfg, draw_b, "seg_b", track_t, records, cfg.steps, "target", t0)
    stage2 = track_t.best["target"]

    if cfg.method == "source_only":
        return RunResult(cfg, TrainState(source, target), frozen, stage2, track_t.best_step, records)

    # PL round: pseudo-label T-train with the stage-2 target branch and retrain on B and T
    t_split = dataset[("T", "train")]
    t_pseudo = argmax_rows(classify(stage2, extract_features(
        stage2, Tensor(t_split.features("m2").reshape(-1, spec.d2)))).values).reshape(len(t_split), -1)
    retrained = init_params(spec_t, derive_seed(cfg.seed, _INIT_TARGET_PL), role="target")
    track_pl = _Tracker(dataset, cfg, "tgt")

    def draw_bt():
        pairs = draw_b()
        bt = samplers["T"].next_batch()
        pairs.append((bt.x_m2, t_pseudo[bt.indices].reshape(-1)))
        return pairs

    _fit(retrained, cfg, draw_bt, "seg_b", track_pl, records, 2 * cfg.steps, "target", t0)
    return RunResult(cfg, TrainState(source, retrained), frozen, track_pl.best["target"],
                     track_pl.best_step, records)


def run(dataset: Dataset, cfg: RunConfig) -> RunResult:
    result = train_lsb(dataset, cfg) if cfg.method == "lsb" else train_baseline(dataset, cfg)
    result.summary = summarize(result, dataset)
    return result


# --- outputs --------------------------------------------------------------

def summarize(result: RunResult, dataset: Dataset) -> dict:
    cfg = result.cfg
    test_t = evaluate_branch(result.best_target, dataset[("T", "test")], "m2")
    out = {
        "method": cfg.method,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "benchmark": dataset.spec.to_dict(),
        "best_step": result.best_step,
        "test_miou": test_t["miou"],
        "test_per_class_iou": test_t["per_class_iou"],
        "last_test_miou": evaluate_branch(result.state.target, dataset[("T", "test")], "m2")["miou"],
        "wall_clock": result.records[-1].wall_clock if result.records else 0.0,
    }
    if result.best_source is not None:
        out["source_test_miou"] = evaluate_branch(result.best_source, dataset[("S", "test")], "m1")["miou"]
    return out


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow(rec.csv_row())
    return buf.getvalue()


def checkpoint_records(source: ParamSet | None, target: ParamSet | None,
                       teacher: TeacherState | None, activation: str) -> dict[str, np.ndarray]:
    recs: dict[str, np.ndarray] = {"meta.activation": np.array([[ACTIVATION_CODE[activation]]])}
    if source is not None:
        recs.update(params_to_records(source, "source"))
    if target is not None:
        recs.update(params_to_records(target, "target"))
    if teacher is not None:
        recs.update(params_to_records(teacher.params, "teacher"))
    return recs


def write_run(result: RunResult, out_dir: str | Path) -> None:
    """metrics.csv, summary.json, best.lsbp (best-val branches) and last.lsbp."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    act = result.cfg.activation
    (out / "metrics.csv").write_text(metrics_csv(result.records))
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    write_checkpoint(out / "best.lsbp", checkpoint_records(result.best_source, result.best_target, None, act))
    st = result.state
    write_checkpoint(out / "last.lsbp", checkpoint_records(st.source, st.target, st.teacher, act))


def config_keys() -> list[str]:
    return list(KEYS)
