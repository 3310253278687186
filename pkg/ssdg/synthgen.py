"""
合成多域数据生成模块

包含可控域偏移的高斯簇数据生成，以及外部特征嵌入 CSV 的读写。

CSV 格式: 表头 `domain,label,f0,...,f{d-1}`；domain 为 >= 0 的整数，
label 为 [-1, C) 的整数（-1 表示无标签），特征为十进制小数，UTF-8，换行分隔。
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from common.atomic_io import atomic_write_text
from .datamodel import DomainDataset, Example
from .errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SynthConfig:
    """合成数据配置"""

    num_classes: int = 5
    num_domains: int = 4
    feature_dim: int = 20
    samples_per_class_per_domain: int = 100
    class_separation: float = 6.0
    domain_shift: float = 1.0
    noise_sigma: float = 1.5
    label_noise_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes 必须 >= 2, 当前 {self.num_classes}")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains 必须 >= 2, 当前 {self.num_domains}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim 必须 >= 2, 当前 {self.feature_dim}")
        if self.samples_per_class_per_domain < 1:
            raise ConfigError("samples_per_class_per_domain 必须 >= 1")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma 不能为负: {self.noise_sigma}")
        if not 0 <= self.label_noise_rate < 1:
            raise ConfigError(f"label_noise_rate 必须在 [0, 1) 内: {self.label_noise_rate}")
        if self.class_separation < 0 or self.domain_shift < 0:
            raise ConfigError("class_separation 与 domain_shift 不能为负")


def class_centroids(config: SynthConfig) -> np.ndarray:
    """
    生成各类基准中心

    中心取自 N(0, s^2 I)，s = class_separation / sqrt(2d)，使两中心间期望距离约为
    class_separation；同一种子下距离与 class_separation 严格成正比。
    """
    rng = np.random.default_rng([config.seed, 0xC1A55])
    raw = rng.standard_normal((config.num_classes, config.feature_dim))
    return raw * (config.class_separation / math.sqrt(2 * config.feature_dim))


def domain_transform(config: SynthConfig, domain_id: int):
    """
    生成第 domain_id 个域的仿射变换 (R, t)

    R 为随机二维平面内的旋转，角度 = domain_shift * U(-1, 1)（弧度）；
    t 为平移，期望范数约为 domain_shift。domain_shift=0 时为恒等变换。
    随机数消耗量与 domain_shift 无关。
    """
    d = config.feature_dim
    rng = np.random.default_rng([config.seed, domain_id, 2])
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    u, v = basis[:, 0], basis[:, 1]
    theta = config.domain_shift * rng.uniform(-1.0, 1.0)
    direction = rng.standard_normal(d) / math.sqrt(d)

    rotation = (
        np.eye(d)
        + (math.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + math.sin(theta) * (np.outer(v, u) - np.outer(u, v))
    )
    translation = config.domain_shift * direction
    return rotation, translation


def generate(config: SynthConfig) -> DomainDataset:
    """
    生成合成多域数据集

    每个域的随机流由 (seed, domain_id) 派生：样本噪声、标签噪声、域变换各用独立流，
    因此开启标签噪声不改变特征取值，和干净数据逐样本可比。

    Args:
        config: 合成数据配置

    Returns:
        DomainDataset，样本编号按 域 -> 类 -> 样本 顺序连续编号
    """
    config.validate()
    centroids = class_centroids(config)
    n = config.samples_per_class_per_domain
    C = config.num_classes

    domains: List[List[Example]] = []
    next_id = 0
    flipped = 0
    for domain_id in range(config.num_domains):
        rotation, translation = domain_transform(config, domain_id)
        shifted = centroids @ rotation.T + translation

        sample_rng = np.random.default_rng([config.seed, domain_id, 0])
        noise_rng = np.random.default_rng([config.seed, domain_id, 1])

        examples = []
        for c in range(C):
            feats = shifted[c] + config.noise_sigma * sample_rng.standard_normal((n, config.feature_dim))
            coin = noise_rng.random(n)
            offset = noise_rng.integers(1, C, size=n)
            for i in range(n):
                label = c
                if coin[i] < config.label_noise_rate:
                    label = int((c + offset[i]) % C)
                    flipped += 1
                examples.append(Example(feats[i].copy(), label, domain_id, next_id))
                next_id += 1
        domains.append(examples)

    logger.info(
        "合成数据生成完成: 类别=%s, 域=%s, 维度=%s, 样本=%s, 标签噪声翻转=%s",
        C, config.num_domains, config.feature_dim, next_id, flipped,
    )
    return DomainDataset(domains=domains, num_classes=C, feature_dim=config.feature_dim)


def dataset_to_frame(dataset: DomainDataset) -> pd.DataFrame:
    rows = dataset.all_examples()
    frame = pd.DataFrame(
        np.stack([ex.features for ex in rows]),
        columns=[f"f{j}" for j in range(dataset.feature_dim)],
    )
    frame.insert(0, "label", [(-1 if ex.label is None else ex.label) for ex in rows])
    frame.insert(0, "domain", [ex.domain_id for ex in rows])
    return frame


def write_embeddings_csv(dataset: DomainDataset, path: PathLike) -> Path:
    """按 CSV 格式写出数据集（原子写入），浮点数以可往返精度输出"""
    frame = dataset_to_frame(dataset)
    text = frame.to_csv(index=False, lineterminator="\n", float_format="%.17g")
    return atomic_write_text(path, text)


def load_embeddings_csv(path: PathLike, num_classes: Optional[int] = None) -> DomainDataset:
    """
    读取外部特征嵌入 CSV

    Args:
        path: 文件路径
        num_classes: 类别数；未提供时取 max(label)+1

    Returns:
        DomainDataset；label=-1 的行成为无标签样本

    Raises:
        ParseError: 行字段数不一致、特征非数值、标签越界等，携带行号
    """
    path = Path(path)
    rows: List[tuple] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "文件为空")
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "domain" or header[1] != "label":
            raise ParseError(1, "表头必须为 domain,label,f0,...")
        expected_features = [f"f{j}" for j in range(len(header) - 2)]
        if header[2:] != expected_features:
            raise ParseError(1, f"特征列必须依次命名为 f0..f{len(header) - 3}")
        width = len(header)

        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != width:
                raise ParseError(line_no, f"字段数 {len(record)} 与表头 {width} 不一致")
            try:
                domain = int(record[0])
            except ValueError:
                raise ParseError(line_no, f"domain 不是整数: {record[0]!r}") from None
            try:
                label = int(record[1])
            except ValueError:
                raise ParseError(line_no, f"label 不是整数: {record[1]!r}") from None
            try:
                feats = np.array([float(v) for v in record[2:]], dtype=np.float64)
            except ValueError:
                raise ParseError(line_no, "特征包含非数值字段") from None
            if not np.all(np.isfinite(feats)):
                raise ParseError(line_no, "特征包含 NaN/Inf")
            if domain < 0:
                raise ParseError(line_no, f"domain 不能为负: {domain}")
            if label < -1 or (num_classes is not None and label >= num_classes):
                bound = num_classes if num_classes is not None else "C"
                raise ParseError(line_no, f"label {label} 越界 [-1, {bound})")
            rows.append((line_no, domain, label, feats))

    if not rows:
        raise DataError(f"{path} 中没有数据行")

    if num_classes is None:
        num_classes = max(label for _, _, label, _ in rows) + 1

    num_domains = max(domain for _, domain, _, _ in rows) + 1
    by_domain: Dict[int, List[Example]] = {k: [] for k in range(num_domains)}
    for example_id, (_, domain, label, feats) in enumerate(rows):
        by_domain[domain].append(Example(feats, None if label < 0 else label, domain, example_id))

    missing = [k for k, items in by_domain.items() if not items]
    if missing:
        raise DataError(f"域编号必须从 0 连续编号, 缺少域 {missing}")

    dataset = DomainDataset(
        domains=[by_domain[k] for k in range(num_domains)],
        num_classes=num_classes,
        feature_dim=width - 2,
    )
    logger.info("读取嵌入文件 %s: 样本=%s, 域=%s, 类别=%s, 维度=%s",
                path, len(dataset), num_domains, num_classes, width - 2)
    return dataset
