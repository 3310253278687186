"""
有限差分梯度自检模块

对每个损失在随机小规模实例上比较解析梯度与中心差分：
交叉熵、带掩码的伪标签损失、监督对比损失、NT-Xent，以及完整训练目标 L_T。
误差按参数块统计：max|a - n| / max(max|a|, max|n|, floor)。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .contrastive import supcon_loss, unsup_nce_loss
from .errors import ConfigError
from .model import Gradients, ModelParams, backward, cross_entropy_loss, forward, init_params
from .trainer import StepPlan, evaluate_objective

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_EPS = 1e-6
ERROR_FLOOR = 1e-6

SUITE_CE = "cross_entropy"
SUITE_MASKED = "masked_unsup"
SUITE_SUPCON = "supcon"
SUITE_NCE = "nt_xent"
SUITE_TOTAL = "total_objective"
SUITES = (SUITE_CE, SUITE_MASKED, SUITE_SUPCON, SUITE_NCE, SUITE_TOTAL)

# (损失值, 解析梯度) = fn(params)
Objective = Callable[[ModelParams], Tuple[float, Gradients]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_gradients(loss_fn: Callable[[ModelParams], float], params: ModelParams,
                      eps: float = DEFAULT_EPS) -> Dict[str, np.ndarray]:
    """对每个参数块逐元素做中心差分"""
    blocks = {k: v.copy() for k, v in params.blocks().items()}
    out = {}
    for name, value in blocks.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn(ModelParams.from_blocks(blocks))
            flat[i] = original - eps
            minus = loss_fn(ModelParams.from_blocks(blocks))
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
        out[name] = grad
    return out


@dataclass
class SuiteResult:
    suite: str
    instances: int
    block_errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)

    @property
    def worst_block(self) -> Optional[str]:
        if not self.block_errors:
            return None
        return max(self.block_errors, key=self.block_errors.get)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


@dataclass
class GradcheckReport:
    results: List[SuiteResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[SuiteResult]:
        return [r for r in self.results if not r.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "suite": r.suite,
                "instances": r.instances,
                "max_rel_error": r.max_error,
                "worst_block": r.worst_block,
                "passed": r.passed,
            }
            for r in self.results
        ])

    def format(self) -> str:
        lines = [
            f"{r.suite:<16} instances={r.instances:<3} max_rel_error={r.max_error:.3e} "
            f"worst={r.worst_block} {'OK' if r.passed else 'FAIL'}"
            for r in self.results
        ]
        for r in self.failures:
            lines.append(f"失败: 损失 {r.suite} 参数块 {r.worst_block} 相对误差 {r.max_error:.3e} > {r.tolerance:g}")
        return "\n".join(lines)


def _small_params(rng: np.random.Generator, input_dim: int = 4, num_classes: int = 3) -> ModelParams:
    return init_params(input_dim, num_classes, hidden_dims=(5,), proj_dim=3, seed=rng)


def _ce_objective(rng: np.random.Generator) -> Tuple[ModelParams, Objective]:
    params = _small_params(rng)
    x = rng.standard_normal((6, params.input_dim))
    y = rng.integers(0, params.num_classes, size=6)

    def fn(p):
        trace = forward(p, x)
        loss, d = cross_entropy_loss(trace.logits, y)
        return loss, backward(p, trace, d)

    return params, fn


def _masked_objective(rng: np.random.Generator) -> Tuple[ModelParams, Objective]:
    params = _small_params(rng)
    n = 8
    x = rng.standard_normal((n, params.input_dim))
    y = rng.integers(0, params.num_classes, size=n)
    mask = rng.random(n) < 0.5
    mask[0] = True

    def fn(p):
        trace = forward(p, x)
        loss, d = cross_entropy_loss(trace.logits, y, weights=mask.astype(np.float64), denominator=n)
        return loss, backward(p, trace, d)

    return params, fn


def _supcon_objective(rng: np.random.Generator) -> Tuple[ModelParams, Objective]:
    params = _small_params(rng)
    x = rng.standard_normal((6, params.input_dim))
    labels = rng.integers(0, 2, size=6)
    temperature = float(rng.uniform(0.2, 1.0))

    def fn(p):
        trace = forward(p, x)
        loss, dz = supcon_loss(trace.embeddings, labels, temperature)
        return loss, backward(p, trace, np.zeros_like(trace.logits), dz)

    return params, fn


def _nce_objective(rng: np.random.Generator) -> Tuple[ModelParams, Objective]:
    params = _small_params(rng)
    x = rng.standard_normal((8, params.input_dim))
    x_pos = x + 0.3 * rng.standard_normal(x.shape)
    temperature = float(rng.uniform(0.2, 1.0))

    def fn(p):
        ta = forward(p, x)
        tp = forward(p, x_pos)
        loss, da, dp = unsup_nce_loss(ta.embeddings, tp.embeddings, temperature)
        ga = backward(p, ta, np.zeros_like(ta.logits), da)
        gp = backward(p, tp, np.zeros_like(tp.logits), dp)
        return loss, ga.map(lambda a, b: a + b, gp, into=Gradients)

    return params, fn


def toy_plan(rng: np.random.Generator, input_dim: int = 4, num_classes: int = 3, n: int = 10) -> StepPlan:
    """随机构造一步训练输入：n 个标注样本、n 个未标注样本，部分入选、部分在 clean set"""
    strong = rng.standard_normal((n, input_dim))
    rows = np.arange(n)
    clean_rows = rows[:4]
    nce_rows = rows[4:]
    mask = (rng.random(n) < 0.6).astype(np.float64)
    mask[0] = 1.0
    return StepPlan(
        labeled_x=rng.standard_normal((n, input_dim)),
        labeled_y=rng.integers(0, num_classes, size=n),
        strong_x=strong,
        pseudo_labels=rng.integers(0, num_classes, size=n),
        unsup_weights=mask / n,
        clean_rows=clean_rows,
        clean_labels=np.array([0, 0, 1, 1]),
        nce_rows=nce_rows,
        weak_x=strong[nce_rows] + 0.2 * rng.standard_normal((len(nce_rows), input_dim)),
        lambda_u=float(rng.uniform(0.5, 1.5)),
        lambda_scl=float(rng.uniform(0.5, 1.5)),
        temperature=float(rng.uniform(0.2, 1.0)),
    )


def _total_objective(rng: np.random.Generator) -> Tuple[ModelParams, Objective]:
    params = _small_params(rng)
    plan = toy_plan(rng, params.input_dim, params.num_classes)

    def fn(p):
        losses, grads = evaluate_objective(p, plan)
        return losses.total, grads

    return params, fn


_BUILDERS = {
    SUITE_CE: _ce_objective,
    SUITE_MASKED: _masked_objective,
    SUITE_SUPCON: _supcon_objective,
    SUITE_NCE: _nce_objective,
    SUITE_TOTAL: _total_objective,
}


def check_objective(params: ModelParams, objective: Objective, eps: float = DEFAULT_EPS,
                    perturb: bool = False) -> Dict[str, float]:
    """
    单个实例的逐块相对误差

    perturb=True 时故意把解析梯度放大 1%（用于验证检查本身能发现错误）。
    """
    _, analytic = objective(params)
    numeric = numeric_gradients(lambda p: objective(p)[0], params, eps)
    errors = {}
    for name, a in analytic.blocks().items():
        if perturb:
            a = a * 1.01 + 1e-3
        errors[name] = relative_error(a, numeric[name])
    return errors


def run_suite(suite: str, seed: int = 0, instances: int = 20, tolerance: float = DEFAULT_TOLERANCE,
              perturb: bool = False) -> SuiteResult:
    rng = np.random.default_rng([seed, SUITES.index(suite)])
    result = SuiteResult(suite, instances, tolerance=tolerance)
    for _ in range(instances):
        params, objective = _BUILDERS[suite](rng)
        for name, err in check_objective(params, objective, perturb=perturb).items():
            result.block_errors[name] = max(result.block_errors.get(name, 0.0), err)
    logger.info("梯度自检 %s: 最大相对误差=%.3e (%s)", suite, result.max_error, result.worst_block)
    return result


def run_gradcheck(seed: int = 0, instances: int = 20, tolerance: float = DEFAULT_TOLERANCE,
                  perturb: Optional[str] = None) -> GradcheckReport:
    """
    运行全部梯度自检

    Args:
        seed: 随机种子，相同种子报告完全一致
        instances: 每个损失的随机实例数
        tolerance: 最大允许相对误差
        perturb: 需要故意扰动解析梯度的损失名（测试钩子）
    """
    if perturb is not None and perturb not in SUITES:
        raise ConfigError(f"未知梯度自检项 {perturb!r}, 可选: {', '.join(SUITES)}")
    return GradcheckReport([
        run_suite(s, seed, instances, tolerance, perturb=(s == perturb)) for s in SUITES
    ])
