"""
运行配置文件模块

配置文件为 dotenv 风格的 KEY=VALUE 文本（# 开头为注释），用 python-dotenv 解析。
键名大小写不敏感，统一转为大写；未知键名直接报错。
优先级：schema 默认值 < 配置文件 < 命令行参数。
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values

from .atomic_io import atomic_write_text

PathLike = Union[str, Path]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_NONE = {"", "none", "null"}


class RunConfigError(ValueError):
    """配置文件或配置项取值非法"""


def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ValueError(f"无法解析为布尔值: {text!r}")


def parse_int_tuple(text: str) -> Tuple[int, ...]:
    value = text.strip()
    if not value:
        return ()
    return tuple(int(part) for part in value.split(","))


def optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str) -> Any:
        return None if text.strip().lower() in _NONE else parser(text)
    parse.__name__ = f"optional_{parser.__name__}"
    return parse


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ConfigKey:
    """一个配置项：键名、解析函数、默认值、说明"""

    name: str
    parser: Callable[[str], Any]
    default: Any
    help: str
    section: str = "train"


class RunConfig:
    """按 schema 校验后的配置取值"""

    def __init__(self, schema: Sequence[ConfigKey], values: Mapping[str, Any], explicit: Iterable[str] = ()):
        self.schema = tuple(schema)
        self._keys = {k.name: k for k in self.schema}
        self.values: Dict[str, Any] = dict(values)
        self.explicit = frozenset(explicit)  # 由配置文件或命令行显式给出的键

    def __getitem__(self, name: str) -> Any:
        return self.values[name.upper()]

    def has_explicit(self, section: str) -> bool:
        return any(self._keys[name].section == section for name in self.explicit)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """命令行覆盖：值为 None 的项视为未给出"""
        values = dict(self.values)
        explicit = set(self.explicit)
        for raw_name, value in overrides.items():
            if value is None:
                continue
            name = raw_name.upper()
            if name not in self._keys:
                raise RunConfigError(f"未知配置项 {raw_name}")
            values[name] = _coerce(self._keys[name], value) if isinstance(value, str) else value
            explicit.add(name)
        return RunConfig(self.schema, values, explicit)

    def to_env_text(self) -> str:
        lines = [f"{k.name}={format_value(self.values[k.name])}" for k in self.schema]
        return "\n".join(lines) + "\n"

    def write(self, path: PathLike) -> Path:
        return atomic_write_text(path, self.to_env_text())


def _coerce(key: ConfigKey, text: str) -> Any:
    try:
        return key.parser(text)
    except (TypeError, ValueError) as e:
        raise RunConfigError(f"配置项 {key.name} 取值非法 {text!r}: {e}")


def defaults(schema: Sequence[ConfigKey]) -> RunConfig:
    return RunConfig(schema, {k.name: k.default for k in schema})


def load_run_config(path: Optional[PathLike], schema: Sequence[ConfigKey]) -> RunConfig:
    """
    读取配置文件

    Args:
        path: 配置文件路径，None 表示只用默认值
        schema: 配置项定义

    Raises:
        RunConfigError: 文件不存在、未知键名或取值无法解析
    """
    base = defaults(schema)
    if path is None:
        return base
    file_path = Path(path)
    if not file_path.is_file():
        raise RunConfigError(f"配置文件不存在: {file_path}")

    keys = {k.name: k for k in schema}
    raw = dotenv_values(file_path, interpolate=False)
    unknown = sorted(name for name in raw if name.upper() not in keys)
    if unknown:
        raise RunConfigError(
            f"{file_path}: 未知配置项 {', '.join(unknown)}；可用配置项: {', '.join(keys)}"
        )

    values = dict(base.values)
    explicit: List[str] = []
    for name, text in raw.items():
        key = keys[name.upper()]
        values[key.name] = _coerce(key, text or "")
        explicit.append(key.name)
    return RunConfig(schema, values, explicit)


def describe_schema(schema: Sequence[ConfigKey]) -> str:
    """--help 末尾的配置项清单：键名、默认值、说明"""
    width = max(len(k.name) for k in schema)
    lines = ["配置项（配置文件 KEY=VALUE，键名大小写不敏感）:"]
    section = None
    for k in schema:
        if k.section != section:
            section = k.section
            lines.append(f"  [{section}]")
        lines.append(f"    {k.name:<{width}}  默认 {format_value(k.default) or '(空)'}  {k.help}")
    return "\n".join(lines)
