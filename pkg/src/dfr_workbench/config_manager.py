"""
配置管理器 - 负责加载、保存和校验实验配置
"""

import copy
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .datagen import DatasetSpec
from .dfr import DfrConfig
from .errors import SpecificationError
from .interpret import TaxonomyThresholds
from .nn import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    "dataset": {
        "image_size": 32,
        "channels": 3,
        "n_train_per_class": 500,
        "n_val_per_class": 120,
        "n_test_per_class": 250,
        "train_correlation": 0.95,
        "train_patch_rates": None,
        "patch_size": 6,
        "noise_sigma": 0.05,
        "faint_core_rate": 0.5,
    },
    "train": {
        "learning_rate": 0.05,
        "momentum": 0.9,
        "epochs": 30,
        "batch_size": 32,
        "weight_decay": 1e-4,
        "widths": [16, 32, 64],
        "progress": False,
    },
    "dfr": {
        "l1_lambda": 0.05,
        "max_iters": 5000,
        "step_size": 0.1,
        "tol": 1e-8,
        "n_subset_repeats": 1,
        "standardize": False,
        "workers": 1,
    },
    "eval": {
        "threshold": 0.5,
    },
    "taxonomy": {
        "tau_hi": 0.5,
        "tau_lo": 0.2,
        "eps_act": 1e-6,
        "max_probes": 400,
    },
    "pipeline": {
        "seed": 0,
        "n_runs": 5,
        "output_dir": "dfr_output",
        "workers": 1,
        "panel_per_group": 2,
        "lambda_sweep": [0.0, 0.01, 0.1, 1.0],
        "weight_grid_width": None,
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    """完整流水线配置（已校验的类型化视图）"""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    dfr: DfrConfig = field(default_factory=DfrConfig)
    eval_threshold: float = 0.5
    taxonomy: TaxonomyThresholds = field(default_factory=TaxonomyThresholds)
    max_probes: int = 400
    n_runs: int = 5
    seed: int = 0
    output_dir: str = "dfr_output"
    workers: int = 1
    panel_per_group: int = 2
    lambda_sweep: Tuple[float, ...] = (0.0, 0.01, 0.1, 1.0)
    weight_grid_width: Optional[int] = None

    def validate(self) -> None:
        """校验所有嵌套配置，错误信息带点号字段路径"""
        for section, spec in (("dataset", self.dataset), ("train", self.train),
                              ("dfr", self.dfr), ("taxonomy", self.taxonomy)):
            try:
                spec.validate()
            except SpecificationError as e:
                field_name = e.field if e.field.startswith(section) else f"{section}.{e.field}"
                raise SpecificationError(field_name, str(e).split(": ", 1)[-1]) from e
        factor = 2 ** len(self.train.widths)
        if self.dataset.image_size % factor:
            raise SpecificationError(
                "dataset.image_size",
                f"must be a multiple of {factor} for {len(self.train.widths)} pooling stages, "
                f"got {self.dataset.image_size}",
            )
        if not 0.0 <= self.eval_threshold <= 1.0:
            raise SpecificationError("eval.threshold", f"must lie in [0, 1], got {self.eval_threshold}")
        if self.n_runs < 1:
            raise SpecificationError("pipeline.n_runs", f"must be >= 1, got {self.n_runs}")
        if not 0 <= self.seed < (1 << 64):
            raise SpecificationError("pipeline.seed", "must be an unsigned 64-bit integer")
        if not 0 <= self.seed + self.n_runs - 1 < (1 << 64):
            raise SpecificationError("pipeline.seed", "seed + run index overflows 64 bits")
        if self.workers < 1:
            raise SpecificationError("pipeline.workers", f"must be >= 1, got {self.workers}")
        if self.panel_per_group < 0:
            raise SpecificationError("pipeline.panel_per_group", f"must be >= 0, got {self.panel_per_group}")
        if self.max_probes < 4:
            raise SpecificationError("taxonomy.max_probes", f"must be >= 4, got {self.max_probes}")
        if self.weight_grid_width is not None and self.weight_grid_width < 1:
            raise SpecificationError("pipeline.weight_grid_width", "must be >= 1 or null")
        if any(lam < 0 for lam in self.lambda_sweep):
            raise SpecificationError("pipeline.lambda_sweep", "lambdas must be >= 0")

    def run_seed(self, run_index: int) -> int:
        return self.seed + run_index

    def for_run(self, run_index: int) -> Tuple[DatasetSpec, TrainConfig, DfrConfig]:
        """第 run_index 次运行的配置：所有种子取 seed + run_index"""
        seed = self.run_seed(run_index)
        dataset = DatasetSpec(**{**asdict(self.dataset), "seed": seed})
        train = TrainConfig(**{**asdict(self.train), "seed": seed})
        dfr = DfrConfig(**{**asdict(self.dfr), "seed": seed})
        return dataset, train, dfr

    def to_dict(self) -> Dict[str, Any]:
        """导出为与 DEFAULT_CONFIG 同结构的字典（用于报告回显）"""
        dataset = self.dataset.to_dict()
        dataset.pop("seed", None)
        train = asdict(self.train)
        train.pop("seed", None)
        train["widths"] = list(self.train.widths)
        dfr = asdict(self.dfr)
        dfr.pop("seed", None)
        return {
            "dataset": dataset,
            "train": train,
            "dfr": dfr,
            "eval": {"threshold": self.eval_threshold},
            "taxonomy": {**asdict(self.taxonomy), "max_probes": self.max_probes},
            "pipeline": {
                "seed": self.seed,
                "n_runs": self.n_runs,
                "output_dir": self.output_dir,
                "workers": self.workers,
                "panel_per_group": self.panel_per_group,
                "lambda_sweep": list(self.lambda_sweep),
                "weight_grid_width": self.weight_grid_width,
            },
        }


class ConfigManager:
    """配置管理器，负责持久化实验配置"""

    def __init__(self, config_file: Optional[Path] = None):
        self.config_file = Path(config_file) if config_file else None
        self.default_config = copy.deepcopy(DEFAULT_CONFIG)
        # 加载配置
        self.config = self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """加载配置文件，与默认配置深度合并"""
        config = copy.deepcopy(self.default_config)
        if self.config_file is None:
            return config
        if not self.config_file.exists():
            logger.info(f"配置文件不存在，使用默认配置: {self.config_file}")
            return config
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded_config = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"加载配置文件失败: {e}")
            raise SpecificationError("config", f"cannot read {self.config_file}: {e}") from e
        if not isinstance(loaded_config, dict):
            raise SpecificationError("config", "top level of the config file must be an object")
        self._check_keys(loaded_config, self.default_config, "")
        self._deep_merge(config, loaded_config)
        logger.info(f"配置文件已加载: {self.config_file}")
        return config

    def save_config(self, path: Optional[Path] = None) -> bool:
        """保存配置文件"""
        target = Path(path) if path else self.config_file
        if target is None:
            logger.error("保存配置文件失败: 未指定路径")
            return False
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "w", encoding="utf-8") as f:
                json.dump(self.config, f, indent=2, ensure_ascii=False)
            logger.info(f"配置文件已保存: {target}")
            return True
        except OSError as e:
            logger.error(f"保存配置文件失败: {e}")
            return False

    def get(self, key_path: str, default=None) -> Any:
        """获取配置值，支持点号路径如 'dfr.l1_lambda'"""
        keys = key_path.split(".")
        value = self.config

        try:
            for key in keys:
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key_path: str, value: Any) -> None:
        """设置配置值，支持点号路径"""
        keys = key_path.split(".")
        config = self.config

        # 导航到倒数第二层
        for key in keys[:-1]:
            if key not in config:
                config[key] = {}
            config = config[key]

        # 设置最后一层的值
        config[keys[-1]] = value

    def apply_overrides(self, seed: Optional[int] = None, runs: Optional[int] = None,
                        output_dir: Optional[str] = None) -> None:
        """命令行参数覆盖配置文件中的值"""
        if seed is not None:
            self.set("pipeline.seed", int(seed))
        if runs is not None:
            self.set("pipeline.n_runs", int(runs))
        if output_dir is not None:
            self.set("pipeline.output_dir", str(output_dir))

    def get_output_directory(self) -> Path:
        """获取输出目录路径"""
        return Path(self.get("pipeline.output_dir", "dfr_output"))

    def get_log_directory(self) -> Path:
        """获取日志目录路径"""
        log_dir = self.get_output_directory() / "logs"
        try:
            log_dir.mkdir(parents=True, exist_ok=True)
            return log_dir
        except (PermissionError, OSError):
            # 如果无法创建日志目录，使用临时目录
            temp_log_dir = Path(tempfile.gettempdir()) / "dfr_workbench_logs"
            try:
                temp_log_dir.mkdir(parents=True, exist_ok=True)
                return temp_log_dir
            except OSError:
                # 最后的后备方案：返回当前目录
                return Path(".")

    def to_pipeline_config(self) -> PipelineConfig:
        """构建并校验类型化的 PipelineConfig"""
        try:
            dataset = dict(self.get("dataset"))
            rates = dataset.get("train_patch_rates")
            dataset["train_patch_rates"] = tuple(float(r) for r in rates) if rates is not None else None
            train = dict(self.get("train"))
            train["widths"] = tuple(int(w) for w in train["widths"])
            taxonomy = dict(self.get("taxonomy"))
            max_probes = int(taxonomy.pop("max_probes"))
            pipeline = self.get("pipeline")
            config = PipelineConfig(
                dataset=DatasetSpec(**dataset, seed=int(pipeline["seed"])),
                train=TrainConfig(**train, seed=int(pipeline["seed"])),
                dfr=DfrConfig(**self.get("dfr"), seed=int(pipeline["seed"])),
                eval_threshold=float(self.get("eval.threshold")),
                taxonomy=TaxonomyThresholds(**taxonomy),
                max_probes=max_probes,
                n_runs=int(pipeline["n_runs"]),
                seed=int(pipeline["seed"]),
                output_dir=str(pipeline["output_dir"]),
                workers=int(pipeline["workers"]),
                panel_per_group=int(pipeline["panel_per_group"]),
                lambda_sweep=tuple(float(v) for v in pipeline["lambda_sweep"]),
                weight_grid_width=(None if pipeline["weight_grid_width"] is None
                                   else int(pipeline["weight_grid_width"])),
            )
            config.validate()
        except (TypeError, ValueError) as e:
            if isinstance(e, SpecificationError):
                raise
            raise SpecificationError("config", f"invalid value: {e}") from e
        return config

    def _check_keys(self, source: dict, reference: dict, prefix: str) -> None:
        """拒绝默认配置中不存在的键"""
        for key, value in source.items():
            dotted = f"{prefix}{key}"
            if key not in reference:
                raise SpecificationError(dotted, "unknown configuration key")
            if isinstance(reference[key], dict):
                if not isinstance(value, dict):
                    raise SpecificationError(dotted, "expected an object")
                self._check_keys(value, reference[key], f"{dotted}.")

    def _deep_merge(self, target: dict, source: dict) -> None:
        """深度合并字典"""
        for key, value in source.items():
            if key in target and isinstance(target[key], dict) and isinstance(value, dict):
                self._deep_merge(target[key], value)
            else:
                target[key] = value


def log_level_from_env(default: str = "INFO") -> Tuple[int, Optional[str]]:
    """读取 DFR_WORKBENCH_LOG_LEVEL；返回 (级别, 无效值或 None)"""
    raw = os.environ.get("DFR_WORKBENCH_LOG_LEVEL", default).strip().upper()
    level = logging.getLevelName(raw)
    if isinstance(level, int):
        return level, None
    return logging.getLevelName(default), raw
