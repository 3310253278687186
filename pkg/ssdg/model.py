"""
小型可微网络模块

骨干网络 g(x)：若干 仿射+ReLU 层；分类头输出 C 个 logits；投影头输出 L2 归一化嵌入 z。
前向保留反向传播所需的中间量，反向传播为手写链式法则，全程 float64。
"""

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from common.atomic_io import atomic_write_bytes
from .errors import ContractViolation, DataError, NumericError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
_NORM_EPS = 1e-12


@dataclass
class Layer:
    """仿射层，weight 形状 (fan_in, fan_out)，前向为 x @ weight + bias"""

    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ModelParams:
    backbone: List[Layer]
    classifier: Layer
    projector: Layer

    @property
    def input_dim(self) -> int:
        first = self.backbone[0] if self.backbone else self.classifier
        return first.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier.weight.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.projector.weight.shape[1]

    @property
    def hidden_dims(self) -> Tuple[int, ...]:
        return tuple(layer.weight.shape[1] for layer in self.backbone)

    def blocks(self) -> Dict[str, np.ndarray]:
        """按固定顺序列出全部参数块"""
        out: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.backbone):
            out[f"backbone.{i}.weight"] = layer.weight
            out[f"backbone.{i}.bias"] = layer.bias
        out["classifier.weight"] = self.classifier.weight
        out["classifier.bias"] = self.classifier.bias
        out["projector.weight"] = self.projector.weight
        out["projector.bias"] = self.projector.bias
        return out

    @classmethod
    def from_blocks(cls, blocks: Dict[str, np.ndarray]):
        depth = len([k for k in blocks if k.startswith("backbone.") and k.endswith(".weight")])
        backbone = [
            Layer(np.array(blocks[f"backbone.{i}.weight"]), np.array(blocks[f"backbone.{i}.bias"]))
            for i in range(depth)
        ]
        return cls(
            backbone=backbone,
            classifier=Layer(np.array(blocks["classifier.weight"]), np.array(blocks["classifier.bias"])),
            projector=Layer(np.array(blocks["projector.weight"]), np.array(blocks["projector.bias"])),
        )

    def map(self, fn: Callable[..., np.ndarray], *others: "ModelParams", into=None):
        """对每个参数块（以及 others 中同名块）逐块应用 fn，返回同结构的新对象"""
        target_cls = into or type(self)
        mine = self.blocks()
        theirs = [o.blocks() for o in others]
        for o in theirs:
            if o.keys() != mine.keys() or any(o[k].shape != mine[k].shape for k in mine):
                raise ContractViolation("参数结构不一致")
        return target_cls.from_blocks({k: fn(v, *(o[k] for o in theirs)) for k, v in mine.items()})

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self, into=None):
        return self.map(np.zeros_like, into=into)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.blocks().values()])


class Gradients(ModelParams):
    """与 ModelParams 同结构的梯度"""


def init_params(
    input_dim: int,
    num_classes: int,
    hidden_dims: Sequence[int] = (64, 64),
    proj_dim: int = 32,
    seed: Union[int, Sequence[int]] = 0,
) -> ModelParams:
    """
    He 风格初始化：骨干层 N(0, 2/fan_in)，两个头 N(0, 1/fan_in)，偏置为 0
    """
    rng = np.random.default_rng(seed)
    backbone = []
    fan_in = input_dim
    for width in hidden_dims:
        w = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        backbone.append(Layer(w, np.zeros(width)))
        fan_in = width
    classifier = Layer(rng.standard_normal((fan_in, num_classes)) * np.sqrt(1.0 / fan_in), np.zeros(num_classes))
    projector = Layer(rng.standard_normal((fan_in, proj_dim)) * np.sqrt(1.0 / fan_in), np.zeros(proj_dim))
    return ModelParams(backbone, classifier, projector)


@dataclass
class ForwardTrace:
    """前向中间量：activations[0] 为输入，activations[i+1] = relu(pre_activations[i])"""

    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    proj_raw: np.ndarray
    proj_norm: np.ndarray
    embeddings: np.ndarray

    @property
    def hidden(self) -> np.ndarray:
        return self.activations[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(params: ModelParams, batch: np.ndarray) -> ForwardTrace:
    """
    前向传播

    Args:
        params: 模型参数
        batch: 特征矩阵 (n, d)

    Returns:
        ForwardTrace，包含每行的 softmax 概率和单位范数嵌入
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ContractViolation(f"输入形状 {x.shape} 与模型输入维度 {params.input_dim} 不匹配")
    if not np.all(np.isfinite(x)):
        raise NumericError("输入包含 NaN/Inf")

    pre_activations = []
    activations = [x]
    h = x
    for layer in params.backbone:
        pre = h @ layer.weight + layer.bias
        h = np.maximum(pre, 0.0)
        pre_activations.append(pre)
        activations.append(h)

    logits = h @ params.classifier.weight + params.classifier.bias
    proj_raw = h @ params.projector.weight + params.projector.bias
    proj_norm = np.maximum(np.linalg.norm(proj_raw, axis=1, keepdims=True), _NORM_EPS)
    return ForwardTrace(
        pre_activations=pre_activations,
        activations=activations,
        logits=logits,
        probs=softmax(logits),
        proj_raw=proj_raw,
        proj_norm=proj_norm,
        embeddings=proj_raw / proj_norm,
    )


def cross_entropy_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: Optional[np.ndarray] = None,
    denominator: Optional[float] = None,
) -> Tuple[float, np.ndarray]:
    """
    交叉熵（log-sum-exp 形式，避免概率下溢）

    loss = sum_i w_i * (-log p_i[y_i]) / denominator，默认 w_i = 1、denominator = n；
    伪标签损失用 0/1 掩码作为 w，分母仍为整批样本数。

    Returns:
        (loss, dLoss/dLogits)
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ContractViolation(f"标签形状 {labels.shape} 与 logits 行数 {n} 不一致")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractViolation(f"标签越界 [0, {num_classes})")

    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = float(n if denominator is None else denominator)

    logp = log_softmax(logits)
    nll = -logp[np.arange(n), labels]
    loss = float(np.sum(w * nll) / denom)

    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / denom)[:, None]
    return loss, grad


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_logits: np.ndarray,
    d_embeddings: Optional[np.ndarray] = None,
) -> Gradients:
    """
    反向传播

    分类头与投影头回传到共享骨干的梯度相加；投影头先经过 L2 归一化的雅可比：
    du = (dz - z * <z, dz>) / ||u||。

    Args:
        params: 前向时使用的参数
        trace: 对应的 ForwardTrace
        d_logits: dLoss/dLogits，形状同 logits
        d_embeddings: dLoss/dz，可为 None（视为 0）

    Returns:
        与 params 同结构的梯度
    """
    n = trace.logits.shape[0]
    if d_logits.shape != trace.logits.shape:
        raise ContractViolation(f"d_logits 形状 {d_logits.shape} 与 logits {trace.logits.shape} 不一致")
    if d_embeddings is None:
        d_embeddings = np.zeros_like(trace.embeddings)
    if d_embeddings.shape != trace.embeddings.shape:
        raise ContractViolation(f"d_embeddings 形状 {d_embeddings.shape} 与嵌入 {trace.embeddings.shape} 不一致")

    h = trace.hidden
    z = trace.embeddings

    cls_w = h.T @ d_logits
    cls_b = d_logits.sum(axis=0)
    dh = d_logits @ params.classifier.weight.T

    d_raw = (d_embeddings - z * np.sum(z * d_embeddings, axis=1, keepdims=True)) / trace.proj_norm
    proj_w = h.T @ d_raw
    proj_b = d_raw.sum(axis=0)
    dh = dh + d_raw @ params.projector.weight.T

    backbone_grads: List[Layer] = [None] * len(params.backbone)
    for i in range(len(params.backbone) - 1, -1, -1):
        d_pre = dh * (trace.pre_activations[i] > 0)
        prev = trace.activations[i]
        backbone_grads[i] = Layer(prev.T @ d_pre, d_pre.sum(axis=0))
        if i > 0:
            dh = d_pre @ params.backbone[i].weight.T

    if n == 0:
        logger.debug("空 batch 反向传播，梯度全为 0")
    return Gradients(backbone_grads, Layer(cls_w, cls_b), Layer(proj_w, proj_b))


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[ModelParams] = None,
) -> Tuple[ModelParams, ModelParams]:
    """
    带动量的 SGD：v <- m*v + g；p <- p - lr*v

    Returns:
        (新参数, 新动量缓冲)
    """
    if velocity is None:
        velocity = params.zeros_like(into=ModelParams)
    new_velocity = velocity.map(lambda v, g: momentum * v + g, grads, into=ModelParams)
    new_params = params.map(lambda p, v: p - lr * v, new_velocity, into=ModelParams)
    return new_params, new_velocity


class SGDOptimizer:
    """持有动量缓冲的 SGD，单个训练过程内单写者使用"""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: Optional[ModelParams] = None

    def step(self, params: ModelParams, grads: ModelParams) -> ModelParams:
        params, self.velocity = sgd_step(params, grads, self.lr, self.momentum, self.velocity)
        return params


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    if len(features) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(forward(params, features).logits, axis=1)


def accuracy(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(params, features) == labels))


def save_checkpoint(path: Union[str, Path], params: ModelParams, metadata: Optional[dict] = None) -> Path:
    """
    保存模型检查点（.npz）

    归档内容：format_version（整数标量）、meta（JSON 字符串标量）以及每个参数块
    （键名如 backbone.0.weight，形状由 npy 头记录），float64 原样保存，读写逐位一致。
    """
    buf = io.BytesIO()
    np.savez(
        buf,
        format_version=np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64),
        meta=np.array(json.dumps(metadata or {}, sort_keys=True)),
        **params.blocks(),
    )
    return atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        version = int(archive["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise DataError(f"不支持的检查点版本 {version}（当前 {CHECKPOINT_FORMAT_VERSION}）")
        meta = json.loads(str(archive["meta"]))
        blocks = {k: archive[k] for k in archive.files if k not in ("format_version", "meta")}
    return ModelParams.from_blocks(blocks), meta
