"""
结果汇总与输出模块

基于 pandas：最终得分（最后 N 个 epoch 的目标域准确率均值）、阈值轨迹表、
逐 epoch 指标 NDJSON、汇总 JSON 以及 sweep 对比表。
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from common.atomic_io import atomic_write_text

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
AVG_COLUMN = "Avg"


def final_score(history: Sequence[Dict[str, Any]], last_n: int = 5, column: str = "target_acc") -> float:
    """取主训练阶段最后 last_n 个 epoch 的 column 均值；不足 last_n 个时对全部 epoch 取均值并警告"""
    df = history_frame(history)
    if "phase" in df:
        df = df[df["phase"] == "main"]
    if df.empty:
        logger.warning("没有主训练阶段的 epoch 记录, 最终得分记为 NaN")
        return float("nan")
    if len(df) < last_n:
        logger.warning("只有 %s 个 epoch, 少于 %s 个, 最终得分对全部 epoch 取均值", len(df), last_n)
    return float(df[column].tail(last_n).mean())


def history_frame(history: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """把逐 epoch 记录展开为表格，嵌套字典展开为 a.b 形式的列"""
    if not history:
        return pd.DataFrame()
    return pd.json_normalize(list(history), sep=".")


def fold_column(domain_id: int) -> str:
    return f"D{domain_id}"


def aggregate_folds(scores: Dict[int, float]) -> Dict[str, float]:
    """每折得分 + 算术平均，列顺序按域编号"""
    row = {fold_column(d): float(scores[d]) for d in sorted(scores)}
    row[AVG_COLUMN] = float(np.mean([scores[d] for d in sorted(scores)])) if scores else float("nan")
    return row


def trajectory_frame(rows: Iterable[Dict[str, Any]], num_classes: int) -> pd.DataFrame:
    """阈值轨迹表：step,domain,tau_g,E_0..E_{C-1},yield,precision"""
    columns = ["step", "domain", "tau_g"] + [f"E_{c}" for c in range(num_classes)] + ["yield", "precision"]
    return pd.DataFrame(list(rows), columns=columns)


def comparison_table(rows: Iterable[Dict[str, Any]], index: Sequence[str]) -> pd.DataFrame:
    """
    sweep 对比表

    rows 为 {axis 值, method, D0.., Avg} 记录；多个种子的同一格取均值。
    """
    df = pd.DataFrame(list(rows))
    if df.empty:
        return df
    value_cols = [c for c in df.columns if c not in index and c != "seed"]
    fold_cols = sorted((c for c in value_cols if c != AVG_COLUMN), key=lambda c: int(c[1:]))
    table = df.groupby(list(index), sort=False)[fold_cols + [AVG_COLUMN]].mean().reset_index()
    if "seed" in df:
        table.insert(len(index), "seeds", df.groupby(list(index), sort=False)["seed"].nunique().values)
    return table


def format_table(table: pd.DataFrame, percent: bool = True) -> str:
    """人读格式：准确率按百分比保留两位小数"""
    if table.empty:
        return "(empty)"
    shown = table.copy()
    for col in shown.columns:
        if col == AVG_COLUMN or (col.startswith("D") and col[1:].isdigit()):
            shown[col] = shown[col] * (100.0 if percent else 1.0)
    return shown.to_string(index=False, float_format=lambda v: f"{v:.2f}")


def _clean_value(value: Any) -> Any:
    """JSON 输出前的转换：numpy 标量转 Python 值，NaN/Inf 转 None"""
    if isinstance(value, dict):
        return {str(k): _clean_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean_value(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean_value(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def to_json(data: Any, indent: Optional[int] = 2) -> str:
    return json.dumps(_clean_value(data), sort_keys=True, indent=indent, ensure_ascii=False)


def write_json(data: Any, path: PathLike) -> Path:
    return atomic_write_text(path, to_json(data) + "\n")


def write_ndjson(records: Iterable[Dict[str, Any]], path: PathLike) -> Path:
    lines = [to_json(r, indent=None) for r in records]
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def write_frame_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n", float_format="%.10g"))


def summarize_folds(fold_summaries: List[Dict[str, Any]]) -> Dict[str, Any]:
    """汇总 JSON 内容：各折摘要 + 每折得分 + 平均，不含时间戳"""
    scores = {int(f["held_out_domain"]): f["final_score"] for f in fold_summaries}
    return {"folds": fold_summaries, "scores": aggregate_folds(scores)}
