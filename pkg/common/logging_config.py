import logging
from pathlib import Path
from typing import Optional, Union

from .config import LOG_FORMAT, LOG_LEVEL


def setup_logging(log_name: str = "ssdg", log_dir: Optional[Union[str, Path]] = None,
                  level: Optional[str] = None):
    """
    配置日志系统：
    - 控制台输出：level（默认 LOG_LEVEL）
    - 给出 log_dir 时额外写文件：
      - 正常日志：{log_name}.log (INFO 及以上)
      - 错误日志：error.log (ERROR 及以上)
    """
    # 清除现有处理器（避免重复添加）
    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)
        handler.close()

    root_level = logging._nameToLevel.get((level or LOG_LEVEL).upper(), logging.INFO)
    logging.root.setLevel(min(root_level, logging.INFO) if log_dir is not None else root_level)

    formatter = logging.Formatter(LOG_FORMAT)

    if log_dir is not None:
        path = Path(log_dir).resolve()
        path.mkdir(parents=True, exist_ok=True)

        # 正常日志文件处理器 (INFO 及以上)
        normal_handler = logging.FileHandler(path / f"{log_name}.log", encoding="utf-8")
        normal_handler.setLevel(logging.INFO)
        normal_handler.setFormatter(formatter)
        logging.root.addHandler(normal_handler)

        # 错误日志文件处理器 (ERROR 及以上)
        error_handler = logging.FileHandler(path / "error.log", encoding="utf-8")
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(formatter)
        logging.root.addHandler(error_handler)

    # 控制台处理器
    console_handler = logging.StreamHandler()
    console_handler.setLevel(root_level)
    console_handler.setFormatter(formatter)
    logging.root.addHandler(console_handler)
