"""
命令行入口

子命令：gen-data / train / eval / sweep / gradcheck。
退出码：0 成功；1 梯度自检失败；2 用法或配置错误；3 数据或解析错误；4 训练出现 NaN 中止；5 其他内部错误。
"""

import argparse
import io
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from common.atomic_io import atomic_write_bytes, atomic_write_text
from common.config import EFFECTIVE_CONFIG_FILE, LOG_SUBDIR, NAN_DUMP_FILE, SUMMARY_FILE
from common.logging_config import setup_logging
from common.run_config import (
    ConfigKey,
    RunConfig,
    RunConfigError,
    describe_schema,
    load_run_config,
    optional,
    parse_bool,
    parse_int_tuple,
)

from .augment import AugmentConfig
from .contrastive import ContrastiveConfig
from .datamodel import DomainDataset, stack_examples
from .errors import ConfigError, DataError, NumericError, SsdgError, TrainingAborted
from .gradcheck import SUITES, run_gradcheck
from .model import accuracy, load_checkpoint, save_checkpoint
from .pseudo_label import METHODS
from .refine import RefineConfig
from .report import aggregate_folds, format_table, write_frame_csv, write_json, write_ndjson
from .synthgen import SynthConfig, generate, load_embeddings_csv, write_embeddings_csv
from .threshold import ThresholdConfig
from .trainer import TrainConfig, run_lodo, sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ABORTED = 4
EXIT_INTERNAL = 5

SECTION_SYNTH = "synth"

SCHEMA = (
    ConfigKey("SEED", int, 0, "随机种子（数据生成、标注切分、训练）", "run"),
    ConfigKey("METHOD", str.lower, "cat", f"训练方法: {', '.join(METHODS)}", "run"),
    ConfigKey("WORKERS", int, 1, "并行训练的折数（进程数）", "run"),
    ConfigKey("NUM_SEEDS", int, 1, "sweep 每格使用的种子个数（SEED, SEED+1, ...）", "run"),
    ConfigKey("EPOCHS", int, 20, "主训练阶段 epoch 数"),
    ConfigKey("STEPS_PER_EPOCH", int, 20, "每个 epoch 的步数"),
    ConfigKey("LABELED_BATCH", int, 16, "每个源域每步的标注样本数 B"),
    ConfigKey("UNLABELED_RATIO", int, 1, "未标注样本倍数 mu（每域每步 mu*B 个）"),
    ConfigKey("LR", float, 0.003, "学习率"),
    ConfigKey("MOMENTUM", float, 0.9, "SGD 动量"),
    ConfigKey("LAMBDA_U", float, 1.0, "伪标签损失权重"),
    ConfigKey("LAMBDA_SCL", float, 1.0, "对比损失权重"),
    ConfigKey("REFINE_INTERVAL", optional(int), None, "clean set 刷新间隔（步），空为每个 epoch 一次"),
    ConfigKey("UNSUP_REDUCTION", str.lower, "pooled", "伪标签损失归一化: pooled 或 per_domain"),
    ConfigKey("LABELS_PER_CLASS", optional(int), 10, "每个源域每类标注数 n_L"),
    ConfigKey("NUM_SOURCES", optional(int), None, "源域数量 K，空为其余全部域"),
    ConfigKey("HIDDEN_LAYERS", parse_int_tuple, (64, 64), "骨干网络各隐层宽度，逗号分隔"),
    ConfigKey("PROJ_DIM", int, 32, "投影嵌入维度"),
    ConfigKey("FINAL_EPOCHS", int, 5, "最终得分取最后几个 epoch 的均值"),
    ConfigKey("EMA_LAMBDA", float, 0.999, "阈值 EMA 系数 lambda", "threshold"),
    ConfigKey("PER_DOMAIN_THRESHOLDS", parse_bool, True, "每个源域独立维护阈值", "threshold"),
    ConfigKey("FIXED_TAU", float, 0.95, "固定阈值基线的阈值", "threshold"),
    ConfigKey("K_NEIGHBORS", int, 10, "kNN 邻居数", "refine"),
    ConfigKey("ALPHA", float, 0.5, "clean set 分位数 alpha", "refine"),
    ConfigKey("MIN_CLASS_SIZE", int, 2, "参与筛选的伪标签类别最少样本数", "refine"),
    ConfigKey("GLOBAL_FRACTILE", parse_bool, False, "所有类别共用一个分位数门限", "refine"),
    ConfigKey("REFINE_ENABLED", parse_bool, True, "启用 kNN 修正与对比损失", "refine"),
    ConfigKey("TEMPERATURE", float, 0.1, "对比损失温度", "contrastive"),
    ConfigKey("WARMUP_EPOCHS", int, 1, "实例对比预热 epoch 数（仅 cat）", "contrastive"),
    ConfigKey("WEAK_SIGMA", float, 0.1, "弱增强高斯噪声标准差", "augment"),
    ConfigKey("STRONG_SIGMA", float, 0.4, "强增强高斯噪声标准差", "augment"),
    ConfigKey("STRONG_DROPOUT", float, 0.2, "强增强逐坐标置零概率", "augment"),
    ConfigKey("SYNTH_NUM_CLASSES", int, 5, "合成数据类别数 C", SECTION_SYNTH),
    ConfigKey("SYNTH_NUM_DOMAINS", int, 4, "合成数据域数", SECTION_SYNTH),
    ConfigKey("SYNTH_FEATURE_DIM", int, 20, "特征维度 d", SECTION_SYNTH),
    ConfigKey("SYNTH_SAMPLES_PER_CLASS", int, 100, "每域每类样本数", SECTION_SYNTH),
    ConfigKey("SYNTH_CLASS_SEPARATION", float, 6.0, "类中心间距", SECTION_SYNTH),
    ConfigKey("SYNTH_DOMAIN_SHIFT", float, 1.0, "域偏移强度（旋转角度与平移）", SECTION_SYNTH),
    ConfigKey("SYNTH_NOISE_SIGMA", float, 1.5, "类内高斯噪声标准差", SECTION_SYNTH),
    ConfigKey("SYNTH_LABEL_NOISE_RATE", float, 0.0, "对称标签噪声比例", SECTION_SYNTH),
)


class UsageError(Exception):
    """命令行用法错误"""


def build_synth_config(rc: RunConfig) -> SynthConfig:
    config = SynthConfig(
        num_classes=rc["SYNTH_NUM_CLASSES"],
        num_domains=rc["SYNTH_NUM_DOMAINS"],
        feature_dim=rc["SYNTH_FEATURE_DIM"],
        samples_per_class_per_domain=rc["SYNTH_SAMPLES_PER_CLASS"],
        class_separation=rc["SYNTH_CLASS_SEPARATION"],
        domain_shift=rc["SYNTH_DOMAIN_SHIFT"],
        noise_sigma=rc["SYNTH_NOISE_SIGMA"],
        label_noise_rate=rc["SYNTH_LABEL_NOISE_RATE"],
        seed=rc["SEED"],
    )
    config.validate()
    return config


def build_train_config(rc: RunConfig) -> TrainConfig:
    config = TrainConfig(
        method=rc["METHOD"],
        epochs=rc["EPOCHS"],
        steps_per_epoch=rc["STEPS_PER_EPOCH"],
        labeled_batch=rc["LABELED_BATCH"],
        unlabeled_ratio=rc["UNLABELED_RATIO"],
        lr=rc["LR"],
        momentum=rc["MOMENTUM"],
        lambda_u=rc["LAMBDA_U"],
        lambda_scl=rc["LAMBDA_SCL"],
        refine_interval=rc["REFINE_INTERVAL"],
        unsup_reduction=rc["UNSUP_REDUCTION"],
        labels_per_class=rc["LABELS_PER_CLASS"],
        num_sources=rc["NUM_SOURCES"],
        hidden_layers=tuple(rc["HIDDEN_LAYERS"]),
        proj_dim=rc["PROJ_DIM"],
        final_epochs=rc["FINAL_EPOCHS"],
        seed=rc["SEED"],
        workers=rc["WORKERS"],
        augment=AugmentConfig(rc["WEAK_SIGMA"], rc["STRONG_SIGMA"], rc["STRONG_DROPOUT"]),
        threshold=ThresholdConfig(rc["EMA_LAMBDA"], rc["PER_DOMAIN_THRESHOLDS"], rc["FIXED_TAU"]),
        refine=RefineConfig(rc["K_NEIGHBORS"], rc["ALPHA"], rc["MIN_CLASS_SIZE"], rc["GLOBAL_FRACTILE"],
                            rc["REFINE_ENABLED"]),
        contrastive=ContrastiveConfig(rc["TEMPERATURE"], rc["WARMUP_EPOCHS"]),
    )
    config.validate()
    return config


def _split_list(text: Optional[str]) -> List[str]:
    if text is None:
        return []
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="KEY=VALUE 配置文件")
    common.add_argument("--seed", type=int, help="覆盖 SEED")
    common.add_argument("--out", type=Path, help="输出目录（日志写在 <out>/logs）")
    common.add_argument("--log-level", default=None, help="控制台日志级别")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, help="特征嵌入 CSV（domain,label,f0..）")
    data.add_argument("--synth", action="store_true", help="使用 SYNTH_* 配置生成合成数据")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--method", choices=METHODS, help="覆盖 METHOD")
    train_opts.add_argument("--workers", type=int, help="覆盖 WORKERS")

    epilog = describe_schema(SCHEMA)
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="ssdg", description="半监督域泛化训练与评估（CAT）",
                                     epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="生成合成数据集 CSV", epilog=epilog, formatter_class=fmt)
    sub.add_parser("train", parents=[common, data, train_opts], help="留一域训练与评估",
                   epilog=epilog, formatter_class=fmt)

    p_eval = sub.add_parser("eval", parents=[common, data], help="加载各折检查点重新评估目标域",
                            epilog=epilog, formatter_class=fmt)
    p_eval.add_argument("--checkpoint", type=Path, required=True, help="含 fold_*.npz 的目录")

    p_sweep = sub.add_parser("sweep", parents=[common, data, train_opts], help="单维度扫描对比",
                             epilog=epilog, formatter_class=fmt)
    p_sweep.add_argument("--axis", required=True, help="labels_per_class(labels) / num_sources(K) / method")
    p_sweep.add_argument("--values", required=True, help="逗号分隔的取值")
    p_sweep.add_argument("--methods", help="逗号分隔的方法列表，默认 METHOD")
    p_sweep.add_argument("--num-seeds", type=int, help="覆盖 NUM_SEEDS")

    p_grad = sub.add_parser("gradcheck", parents=[common], help="有限差分梯度自检",
                            epilog=epilog, formatter_class=fmt)
    p_grad.add_argument("--instances", type=int, default=20, help="每个损失的随机实例数")
    p_grad.add_argument("--tolerance", type=float, default=1e-4, help="最大允许相对误差")
    p_grad.add_argument("--perturb", choices=SUITES, help=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    rc = load_run_config(args.config, SCHEMA)
    return rc.with_overrides({
        "SEED": args.seed,
        "METHOD": getattr(args, "method", None),
        "WORKERS": getattr(args, "workers", None),
        "NUM_SEEDS": getattr(args, "num_seeds", None),
    })


def load_dataset(args: argparse.Namespace, rc: RunConfig) -> DomainDataset:
    """--data 优先；否则需要 --synth 或配置文件中的 SYNTH_* 配置"""
    if args.data is not None:
        return load_embeddings_csv(args.data)
    if args.synth or rc.has_explicit(SECTION_SYNTH):
        return generate(build_synth_config(rc))
    raise UsageError("缺少数据来源：请指定 --data，或使用 --synth / 在配置文件中给出 SYNTH_* 配置")


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} 需要 --out 输出目录")
    return args.out


def cmd_gen_data(args: argparse.Namespace, rc: RunConfig) -> int:
    out = _require_out(args)
    dataset = generate(build_synth_config(rc))
    path = write_embeddings_csv(dataset, out / "dataset.csv")
    rc.write(out / EFFECTIVE_CONFIG_FILE)
    logger.info("数据集已写入 %s（%s 行数据）", path, len(dataset))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, rc: RunConfig) -> int:
    out = _require_out(args)
    config = build_train_config(rc)
    dataset = load_dataset(args, rc)
    rc.write(out / EFFECTIVE_CONFIG_FILE)

    try:
        lodo = run_lodo(dataset, config)
    except TrainingAborted as e:
        buf = io.BytesIO()
        np.savez(buf, **e.batch)
        atomic_write_bytes(out / NAN_DUMP_FILE, buf.getvalue())
        logger.error("训练中止: %s；出错 batch 已保存到 %s", e, out / NAN_DUMP_FILE)
        return EXIT_ABORTED

    for fold in lodo.folds:
        k = fold.held_out_domain
        write_ndjson(fold.history, out / f"metrics_fold{k}.ndjson")
        write_json({**fold.summary(), "history": fold.history}, out / f"fold_{k}.json")
        write_frame_csv(fold.trajectory, out / f"thresholds_fold{k}.csv")
        if fold.refinement_report is not None:
            write_frame_csv(fold.refinement_report, out / f"refinement_fold{k}.csv")
        save_checkpoint(out / f"fold_{k}.npz", fold.params, {
            "held_out_domain": k,
            "source_domains": list(fold.source_domains),
            "method": fold.method,
            "seed": config.seed,
            "final_score": fold.final_score,
        })

    summary = {**lodo.summary(), "method": config.method, "seed": config.seed, "config": rc.values}
    write_json(summary, out / SUMMARY_FILE)
    logger.info("训练完成: 平均目标域准确率=%.4f, 结果目录 %s", lodo.average, out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, rc: RunConfig) -> int:
    out = _require_out(args)
    dataset = load_dataset(args, rc)
    paths = sorted(args.checkpoint.glob("fold_*.npz"))
    if not paths:
        raise DataError(f"{args.checkpoint} 下没有 fold_*.npz 检查点")

    scores = {}
    for path in paths:
        params, meta = load_checkpoint(path)
        k = int(meta["held_out_domain"])
        if not 0 <= k < dataset.num_domains:
            raise DataError(f"{path}: 目标域 {k} 不在数据集中（共 {dataset.num_domains} 个域）")
        target = [ex for ex in dataset.domains[k] if ex.label is not None]
        x, y, _ = stack_examples(target, dataset.feature_dim)
        scores[k] = accuracy(params, x, y)
        logger.info("检查点 %s: 目标域 %s 准确率=%.4f", path.name, k, scores[k])

    write_json({"checkpoint_dir": str(args.checkpoint), "scores": aggregate_folds(scores)}, out / "eval.json")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, rc: RunConfig) -> int:
    out = _require_out(args)
    values = _split_list(args.values)
    if not values:
        raise UsageError("--values 不能为空")
    config = build_train_config(rc)
    dataset = load_dataset(args, rc)
    methods = _split_list(args.methods) or [config.method]
    num_seeds = rc["NUM_SEEDS"]
    if num_seeds < 1:
        raise ConfigError(f"NUM_SEEDS 必须 >= 1: {num_seeds}")
    seeds = [config.seed + i for i in range(num_seeds)]

    rc.write(out / EFFECTIVE_CONFIG_FILE)
    table = sweep(dataset, config, args.axis, values, methods, seeds)
    text = format_table(table)
    write_frame_csv(table, out / "sweep.csv")
    atomic_write_text(out / "sweep.txt", text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, rc: RunConfig) -> int:
    report = run_gradcheck(rc["SEED"], args.instances, args.tolerance, perturb=args.perturb)
    text = report.format()
    print(text)
    if args.out is not None:
        write_frame_csv(report.to_frame(), args.out / "gradcheck.csv")
    return EXIT_OK if report.passed else EXIT_GRADCHECK_FAILED


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log_dir = args.out / LOG_SUBDIR if args.out is not None else None
    setup_logging("ssdg", log_dir, args.log_level)

    try:
        rc = resolve_config(args)
        return COMMANDS[args.command](args, rc)
    except (UsageError, ConfigError, RunConfigError) as e:
        logger.error("配置错误: %s", e)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        logger.error("数据错误: %s", e)
        return EXIT_DATA
    except NumericError as e:
        logger.error("数值错误, 训练中止: %s", e)
        return EXIT_ABORTED
    except SsdgError as e:
        logger.exception("内部错误: %s", e)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
