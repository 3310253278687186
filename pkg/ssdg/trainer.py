"""
训练主循环模块

每一步：
1. 每个源域抽 B 个标注样本和 muB 个未标注样本，未标注样本生成弱/强两个增强视图
2. 弱视图预测经伪标签选择器得到伪标签和掩码（CAT 为每域自适应阈值，基线为固定阈值）
3. L_s：标注样本交叉熵；L_u：强视图对已选伪标签的交叉熵，分母为整批未标注样本数；
   L_scl：batch 内 clean set 成员的监督对比损失 + 其余未标注样本的实例对比损失
4. L_T = L_s + lambda_u * L_u + lambda_scl * L_scl，一步 SGD，然后用本步弱视图预测更新阈值

CAT 先做 warmup_epochs 个预热 epoch（标注交叉熵 + 全部未标注样本的实例对比），
主训练阶段每 refine_interval 步用 kNN 修正刷新一次 clean set。
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .augment import AugmentConfig, FeatureAugmenter
from .contrastive import ContrastiveConfig, supcon_loss, unsup_nce_loss
from .datamodel import DomainDataset, LabelOracle, SsdgSplit, TrainingView, build_lodo_folds
from .errors import ConfigError, TrainingAborted
from .model import Gradients, ModelParams, accuracy, backward, cross_entropy_loss, forward
from .pseudo_label import (
    METHOD_CAT,
    METHOD_FIXMATCH,
    METHOD_FULL_LABELS,
    METHODS,
    create_selector,
)
from .refine import CleanSet, RefineConfig, refine
from .report import aggregate_folds, comparison_table, final_score, summarize_folds, trajectory_frame
from .threshold import PseudoLabelBatch, ThresholdConfig
from .trainer_state import TrainState, create_train_state

logger = logging.getLogger(__name__)

UNSUP_POOLED = "pooled"
UNSUP_PER_DOMAIN = "per_domain"

AXIS_LABELS = "labels_per_class"
AXIS_SOURCES = "num_sources"
AXIS_METHOD = "method"
AXIS_ALIASES = {
    "labels": AXIS_LABELS,
    "labels_per_class": AXIS_LABELS,
    "k": AXIS_SOURCES,
    "num_sources": AXIS_SOURCES,
    "method": AXIS_METHOD,
}


@dataclass(frozen=True)
class TrainConfig:
    method: str = METHOD_CAT
    epochs: int = 20
    steps_per_epoch: int = 20
    labeled_batch: int = 16
    unlabeled_ratio: int = 1
    lr: float = 0.003
    momentum: float = 0.9
    lambda_u: float = 1.0
    lambda_scl: float = 1.0
    refine_interval: Optional[int] = None  # None 表示每个 epoch 一次
    unsup_reduction: str = UNSUP_POOLED
    labels_per_class: Optional[int] = 10
    num_sources: Optional[int] = None
    hidden_layers: Tuple[int, ...] = (64, 64)
    proj_dim: int = 32
    final_epochs: int = 5
    seed: int = 0
    workers: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    @property
    def effective_refine_interval(self) -> int:
        return self.refine_interval or self.steps_per_epoch

    @property
    def unlabeled_batch(self) -> int:
        return self.unlabeled_ratio * self.labeled_batch

    @property
    def uses_unlabeled(self) -> bool:
        return self.method in (METHOD_CAT, METHOD_FIXMATCH)

    @property
    def uses_contrastive(self) -> bool:
        return self.method == METHOD_CAT

    @property
    def warmup_epochs(self) -> int:
        return self.contrastive.warmup_epochs if self.uses_contrastive else 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"未知训练方法 {self.method!r}, 可选: {', '.join(METHODS)}")
        for name in ("epochs", "steps_per_epoch", "labeled_batch", "unlabeled_ratio", "proj_dim",
                     "final_epochs", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} 必须 >= 1: {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError(f"lr 必须 > 0: {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum 必须在 [0, 1) 内: {self.momentum}")
        if self.lambda_u < 0 or self.lambda_scl < 0:
            raise ConfigError("lambda_u / lambda_scl 不能为负")
        if self.refine_interval is not None and self.refine_interval < 1:
            raise ConfigError(f"refine_interval 必须 >= 1: {self.refine_interval}")
        if self.unsup_reduction not in (UNSUP_POOLED, UNSUP_PER_DOMAIN):
            raise ConfigError(f"unsup_reduction 只能是 {UNSUP_POOLED} 或 {UNSUP_PER_DOMAIN}: {self.unsup_reduction}")
        if self.labels_per_class is not None and self.labels_per_class < 1:
            raise ConfigError(f"labels_per_class 必须 >= 1: {self.labels_per_class}")
        if self.num_sources is not None and self.num_sources < 1:
            raise ConfigError(f"num_sources 必须 >= 1: {self.num_sources}")
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigError(f"hidden_layers 每层宽度必须 >= 1: {self.hidden_layers}")
        self.augment.validate()
        self.threshold.validate()
        self.refine.validate()
        self.contrastive.validate()


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    unsupervised: float = 0.0
    supcon: float = 0.0
    nce: float = 0.0
    lambda_u: float = 1.0
    lambda_scl: float = 1.0

    @property
    def contrastive(self) -> float:
        return self.supcon + self.nce

    @property
    def total(self) -> float:
        return self.supervised + self.lambda_u * self.unsupervised + self.lambda_scl * self.contrastive

    def as_dict(self) -> Dict[str, float]:
        return {
            "loss_s": self.supervised,
            "loss_u": self.unsupervised,
            "loss_scl": self.contrastive,
            "loss_supcon": self.supcon,
            "loss_nce": self.nce,
            "loss_total": self.total,
        }


@dataclass
class StepPlan:
    """
    一步训练的全部输入（随机抽样和伪标签选择已完成）

    strong_x 的行是本步全部未标注样本；clean_rows / nce_rows 是其中的行号，
    weak_x 与 nce_rows 逐行对应。unsup_weights 已包含掩码和归一化。
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    strong_x: np.ndarray
    pseudo_labels: np.ndarray
    unsup_weights: np.ndarray
    clean_rows: np.ndarray
    clean_labels: np.ndarray
    nce_rows: np.ndarray
    weak_x: np.ndarray
    lambda_u: float = 1.0
    lambda_scl: float = 1.0
    temperature: float = 0.1

    @property
    def num_selected(self) -> int:
        return int(np.sum(self.unsup_weights > 0))

    def diagnostics(self) -> Dict[str, np.ndarray]:
        return {
            "labeled_x": self.labeled_x,
            "labeled_y": self.labeled_y,
            "strong_x": self.strong_x,
            "pseudo_labels": self.pseudo_labels,
            "unsup_weights": self.unsup_weights,
            "clean_rows": self.clean_rows,
            "nce_rows": self.nce_rows,
            "weak_x": self.weak_x,
        }


@dataclass
class StepResult:
    losses: LossBreakdown
    batches: List[PseudoLabelBatch]
    warmup: bool = False


def _add(a: Gradients, b: Gradients) -> Gradients:
    return a.map(lambda x, y: x + y, b, into=Gradients)


def evaluate_objective(params: ModelParams, plan: StepPlan) -> Tuple[LossBreakdown, Gradients]:
    """
    计算 L_T 及其对全部参数的梯度

    只对有贡献的部分做前向/反向：lambda_u=0 且没有对比损失时，梯度与纯监督训练逐位一致。
    """
    trace_l = forward(params, plan.labeled_x)
    loss_s, d_l = cross_entropy_loss(trace_l.logits, plan.labeled_y)
    grads = backward(params, trace_l, d_l)

    loss_u = supcon = nce = 0.0
    has_mask = bool(np.any(plan.unsup_weights > 0))
    if len(plan.strong_x) and (has_mask or len(plan.clean_rows) or len(plan.nce_rows)):
        trace_s = forward(params, plan.strong_x)
        loss_u, d_u = cross_entropy_loss(trace_s.logits, plan.pseudo_labels, plan.unsup_weights, 1.0)
        d_emb = np.zeros_like(trace_s.embeddings)
        contributes = plan.lambda_u > 0 and has_mask

        if len(plan.clean_rows) >= 2:
            supcon, dz = supcon_loss(trace_s.embeddings[plan.clean_rows], plan.clean_labels, plan.temperature)
            np.add.at(d_emb, plan.clean_rows, plan.lambda_scl * dz)
            contributes = contributes or plan.lambda_scl > 0

        if len(plan.nce_rows):
            trace_w = forward(params, plan.weak_x)
            nce, d_anchor, d_pos = unsup_nce_loss(
                trace_w.embeddings, trace_s.embeddings[plan.nce_rows], plan.temperature
            )
            if plan.lambda_scl > 0:
                np.add.at(d_emb, plan.nce_rows, plan.lambda_scl * d_pos)
                grads = _add(grads, backward(params, trace_w, np.zeros_like(trace_w.logits),
                                             plan.lambda_scl * d_anchor))
                contributes = True

        if contributes:
            grads = _add(grads, backward(params, trace_s, plan.lambda_u * d_u, d_emb))

    losses = LossBreakdown(loss_s, loss_u, supcon, nce, plan.lambda_u, plan.lambda_scl)
    return losses, grads


def _draw(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(n, size=size, replace=n < size)


def build_step_plan(
    state: TrainState,
    view: TrainingView,
    config: TrainConfig,
    augmenter: FeatureAugmenter,
    warmup: bool = False,
) -> Tuple[StepPlan, List[PseudoLabelBatch]]:
    """
    抽样、增强并选择伪标签

    三个随机数流互相独立：标注采样只用 rng_labeled，因此是否使用未标注数据
    不会改变标注 batch 的抽取结果。
    """
    lab_x, lab_y = [], []
    for dom in view.domains:
        idx = _draw(state.rng_labeled, len(dom.labeled_y), config.labeled_batch)
        lab_x.append(dom.labeled_x[idx])
        lab_y.append(dom.labeled_y[idx])
    labeled_x = np.concatenate(lab_x)
    labeled_y = np.concatenate(lab_y)

    d = view.feature_dim
    empty_rows = np.zeros(0, dtype=np.int64)
    plan = StepPlan(
        labeled_x=labeled_x,
        labeled_y=labeled_y,
        strong_x=np.zeros((0, d)),
        pseudo_labels=empty_rows,
        unsup_weights=np.zeros(0),
        clean_rows=empty_rows,
        clean_labels=empty_rows,
        nce_rows=empty_rows,
        weak_x=np.zeros((0, d)),
        lambda_u=config.lambda_u,
        lambda_scl=config.lambda_scl,
        temperature=config.contrastive.temperature,
    )
    if not config.uses_unlabeled:
        return plan, []

    weak, strong, ids, sizes, doms = [], [], [], [], []
    for dom in view.domains:
        idx = _draw(state.rng_unlabeled, len(dom.unlabeled_ids), config.unlabeled_batch)
        if len(idx) == 0:
            continue
        x = dom.unlabeled_x[idx]
        weak.append(augmenter.weak(x, state.rng_augment))
        strong.append(augmenter.strong(x, state.rng_augment))
        ids.append(dom.unlabeled_ids[idx])
        sizes.append(len(idx))
        doms.append(dom.domain_id)
    if not sizes:
        return plan, []

    weak_x = np.concatenate(weak)
    plan.strong_x = np.concatenate(strong)
    unl_ids = np.concatenate(ids)
    m = len(unl_ids)
    rows = np.arange(m)

    if warmup:
        plan.pseudo_labels = np.zeros(m, dtype=np.int64)
        plan.unsup_weights = np.zeros(m)
        plan.nce_rows = rows
        plan.weak_x = weak_x
        return plan, []

    probs = forward(state.params, weak_x).probs
    batches = []
    offset = 0
    for domain_id, n_d in zip(doms, sizes):
        part = slice(offset, offset + n_d)
        batches.append(state.selector.select(probs[part], domain_id, unl_ids[part]))
        offset += n_d

    mask = np.concatenate([b.selected for b in batches]).astype(np.float64)
    plan.pseudo_labels = np.concatenate([b.pseudo_labels for b in batches])
    if config.unsup_reduction == UNSUP_PER_DOMAIN:
        plan.unsup_weights = mask / np.repeat(np.asarray(sizes, dtype=np.float64) * len(sizes), sizes)
    else:
        plan.unsup_weights = mask / m

    if config.uses_contrastive and config.refine.enabled and state.has_clean_set:
        in_clean = np.array([int(i) in state.clean_labels for i in unl_ids], dtype=bool)
        plan.clean_rows = rows[in_clean]
        plan.clean_labels = np.array([state.clean_labels[int(i)] for i in unl_ids[in_clean]], dtype=np.int64)
        plan.nce_rows = rows[~in_clean]
        plan.weak_x = weak_x[~in_clean]
    return plan, batches


def train_step(
    state: TrainState,
    view: TrainingView,
    config: TrainConfig,
    augmenter: Optional[FeatureAugmenter] = None,
    warmup: bool = False,
) -> StepResult:
    """
    执行一步训练：抽样 -> 伪标签 -> L_T 与梯度 -> SGD -> 阈值更新

    Raises:
        TrainingAborted: 损失或梯度出现 NaN/Inf，异常中附带本步 batch
    """
    augmenter = augmenter or FeatureAugmenter(config.augment)
    plan, batches = build_step_plan(state, view, config, augmenter, warmup)
    losses, grads = evaluate_objective(state.params, plan)

    if not np.isfinite(losses.total) or not np.all(np.isfinite(grads.flat())):
        step = state.warmup_step if warmup else state.global_step
        raise TrainingAborted(
            f"第 {state.epoch} 个 epoch 第 {step} 步损失非有限值: {losses.as_dict()}",
            plan.diagnostics(),
        )

    state.params = state.optimizer.step(state.params, grads)
    if warmup:
        state.warmup_step += 1
    else:
        if batches:
            state.selector.observe({int(b.domain_ids[0]): b.distributions for b in batches})
        state.global_step += 1
    return StepResult(losses, batches, warmup)


def refresh_clean_set(state: TrainState, view: TrainingView, config: TrainConfig) -> CleanSet:
    """在未增强的全部未标注样本上按当前阈值选择伪标签，合并各源域后做 kNN 修正"""
    pool_x, pool_ids, pool_doms = view.unlabeled_pool()
    if len(pool_ids) == 0:
        state.set_clean_set(CleanSet.empty())
        return state.clean_set

    trace = forward(state.params, pool_x)
    batches, embeddings = [], []
    for domain_id in view.domain_ids:
        rows = pool_doms == domain_id
        if not np.any(rows):
            continue
        batches.append(state.selector.select(trace.probs[rows], domain_id, pool_ids[rows]))
        embeddings.append(trace.embeddings[rows])
    batch = PseudoLabelBatch.concat(batches)
    clean = refine(np.concatenate(embeddings), batch, config.refine)
    state.set_clean_set(clean)
    return clean


@dataclass
class FoldResult:
    """单折训练结果"""

    held_out_domain: int
    source_domains: Tuple[int, ...]
    method: str
    history: List[Dict[str, Any]]
    final_score: float
    trajectory: pd.DataFrame
    params: ModelParams
    refinement_report: Optional[pd.DataFrame] = None

    def summary(self) -> Dict[str, Any]:
        last = self.history[-1] if self.history else {}
        return {
            "held_out_domain": self.held_out_domain,
            "source_domains": list(self.source_domains),
            "method": self.method,
            "final_score": self.final_score,
            "epochs": sum(1 for h in self.history if h["phase"] == "main"),
            "last_target_acc": last.get("target_acc"),
            "last_source_acc": last.get("source_acc"),
            "clean_size": last.get("clean_size"),
            "clean_acc": last.get("clean_acc"),
        }


def _precision(oracle: LabelOracle, batch: PseudoLabelBatch) -> Tuple[int, int]:
    chosen = batch.selected
    if not np.any(chosen) or batch.example_ids is None:
        return 0, 0
    return oracle.count_correct(batch.example_ids[chosen], batch.pseudo_labels[chosen])


def _ratio(num: float, den: float) -> float:
    return float(num) / den if den else float("nan")


def run_fold(split: SsdgSplit, config: TrainConfig) -> FoldResult:
    """
    训练并评估一个留一域折

    Returns:
        FoldResult，最终得分为主训练阶段最后 final_epochs 个 epoch 的目标域准确率均值
    """
    config.validate()
    view = split.training_view()
    oracle = split.oracle()
    fold = split.held_out_domain
    selector = create_selector(config.method, view.domain_ids, split.num_classes, config.threshold)
    state = create_train_state(
        split.feature_dim, split.num_classes, config.hidden_layers, config.proj_dim,
        config.lr, config.momentum, selector, config.seed, fold,
    )
    augmenter = FeatureAugmenter(config.augment)
    interval = config.effective_refine_interval
    refine_on = config.uses_contrastive and config.refine.enabled

    history: List[Dict[str, Any]] = []
    trajectory: List[Dict[str, Any]] = []
    last_report = None

    phases = [("warmup", config.warmup_epochs), ("main", config.epochs)]
    for phase, num_epochs in phases:
        warmup = phase == "warmup"
        for epoch in range(1, num_epochs + 1):
            state.epoch = epoch
            losses: List[LossBreakdown] = []
            counts = {d: np.zeros(4) for d in view.domain_ids}  # 选中数, 总数, 正确数, 可核对数

            for _ in range(config.steps_per_epoch):
                result = train_step(state, view, config, augmenter, warmup)
                losses.append(result.losses)
                snapshot = state.selector.snapshot() if result.batches else {}
                for batch in result.batches:
                    domain_id = int(batch.domain_ids[0])
                    correct, known = _precision(oracle, batch)
                    counts[domain_id] += (batch.num_selected, len(batch), correct, known)
                    snap = snapshot[domain_id]
                    row = {"step": state.global_step, "domain": domain_id, "tau_g": snap["tau_g"]}
                    for c in range(split.num_classes):
                        row[f"E_{c}"] = snap["expectations"][c] if snap["expectations"] is not None else np.nan
                    row["yield"] = batch.yield_rate
                    row["precision"] = _ratio(correct, known)
                    trajectory.append(row)

                if refine_on and not warmup and state.global_step % interval == 0:
                    clean = refresh_clean_set(state, view, config)
                    last_report = clean.report

            loss_dicts = [l.as_dict() for l in losses]
            clean_correct, clean_known = oracle.count_correct(
                state.clean_set.member_ids, state.clean_set.corrected_labels
            )
            record = {
                "fold": fold,
                "phase": phase,
                "epoch": epoch,
                "target_acc": accuracy(state.params, oracle.target_x, oracle.target_y),
                "source_acc": accuracy(state.params, oracle.source_x, oracle.source_y),
                **{k: float(np.mean([d[k] for d in loss_dicts])) for k in loss_dicts[0]},
                "yield": {d: _ratio(c[0], c[1]) if c[1] else 0.0 for d, c in counts.items()},
                "precision": {d: _ratio(c[2], c[3]) for d, c in counts.items()},
                "clean_size": len(state.clean_set),
                "clean_acc": _ratio(clean_correct, clean_known),
                "thresholds": state.selector.snapshot() if state.selector is not None else {},
            }
            history.append(record)
            logger.info(
                "折 %s [%s] epoch %s/%s: 目标域准确率=%.4f, 源域准确率=%.4f, L_T=%.4f, clean set=%s",
                fold, phase, epoch, num_epochs, record["target_acc"], record["source_acc"],
                record["loss_total"], record["clean_size"],
            )

    score = final_score(history, config.final_epochs)
    logger.info("折 %s 完成: 方法=%s, 源域=%s, 最终得分=%.4f", fold, config.method, list(split.source_domains), score)
    return FoldResult(
        held_out_domain=fold,
        source_domains=tuple(split.source_domains),
        method=config.method,
        history=history,
        final_score=score,
        trajectory=trajectory_frame(trajectory, split.num_classes),
        params=state.params,
        refinement_report=last_report,
    )


@dataclass
class LodoResult:
    folds: List[FoldResult]

    @property
    def scores(self) -> Dict[int, float]:
        return {f.held_out_domain: f.final_score for f in self.folds}

    @property
    def average(self) -> float:
        return aggregate_folds(self.scores)["Avg"]

    def summary(self) -> Dict[str, Any]:
        return summarize_folds([f.summary() for f in self.folds])


def build_folds(dataset: DomainDataset, config: TrainConfig) -> List[SsdgSplit]:
    labels = None if config.method == METHOD_FULL_LABELS else config.labels_per_class
    return build_lodo_folds(dataset, labels, config.seed, config.num_sources)


def run_lodo(dataset: DomainDataset, config: TrainConfig) -> LodoResult:
    """
    留一域评估：每个域轮流作为目标域

    workers > 1 时各折在独立进程中运行；结果按折顺序合并，与并行度无关。
    """
    config.validate()
    folds = build_folds(dataset, config)
    if config.workers > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(folds))) as executor:
            futures = [executor.submit(run_fold, split, config) for split in folds]
            results = [f.result() for f in futures]
    else:
        results = [run_fold(split, config) for split in folds]

    lodo = LodoResult(results)
    logger.info("留一域评估完成: 方法=%s, 每折=%s, 平均=%.4f", config.method,
                {d: round(s, 4) for d, s in lodo.scores.items()}, lodo.average)
    return lodo


def normalize_axis(axis: str) -> str:
    key = axis.strip().lower()
    if key not in AXIS_ALIASES:
        raise ConfigError(f"不支持的 sweep 维度 {axis!r}, 可选: {', '.join(sorted(AXIS_ALIASES))}")
    return AXIS_ALIASES[key]


def check_axis_value(axis: str, value: Any, dataset: DomainDataset) -> Any:
    """校验并转换 sweep 取值，非法时报错并列出合法取值"""
    if axis == AXIS_METHOD:
        if value not in METHODS:
            raise ConfigError(f"非法方法 {value!r}, 可选: {', '.join(METHODS)}")
        return value
    try:
        number = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{axis} 的取值必须是整数: {value!r}")
    if axis == AXIS_SOURCES:
        valid = list(range(1, dataset.num_domains))
        if number not in valid:
            raise ConfigError(f"非法源域数量 K={number}, 可选: {valid}")
    elif number < 1:
        raise ConfigError(f"labels_per_class 必须 >= 1: {number}")
    return number


def sweep(
    dataset: DomainDataset,
    config: TrainConfig,
    axis: str,
    values: Sequence[Any],
    methods: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """
    按单个维度扫描

    每个 (取值, 方法, 种子) 跑一次 run_lodo，多种子的同一格取均值。

    Returns:
        对比表：axis, method, seeds, D0.., Avg
    """
    axis = normalize_axis(axis)
    if not values:
        raise ConfigError("sweep 取值列表为空")
    values = [check_axis_value(axis, v, dataset) for v in values]
    methods = list(methods or [config.method])
    for m in methods:
        check_axis_value(AXIS_METHOD, m, dataset)
    seeds = list(seeds if seeds is not None else [config.seed])

    rows = []
    for value in values:
        for method in ([value] if axis == AXIS_METHOD else methods):
            for seed in seeds:
                cell = replace(config, method=method, seed=seed)
                if axis != AXIS_METHOD:
                    cell = replace(cell, **{axis: value})
                lodo = run_lodo(dataset, cell)
                rows.append({axis: value, "method": method, "seed": seed, **aggregate_folds(lodo.scores)})
                logger.info("sweep %s=%s 方法=%s 种子=%s: 平均=%.4f", axis, value, method, seed, lodo.average)

    index = [axis] if axis == AXIS_METHOD else [axis, "method"]
    return comparison_table(rows, index)
