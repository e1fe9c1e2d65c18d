"""
DFR Workbench - 命令行入口
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config_manager import ConfigManager, log_level_from_env
from .errors import PipelineStageError, SpecificationError, WorkbenchError
from .interpret import select_exemplar_neurons
from .services import report_service
from .services.pipeline_service import ERM_MODEL_FILE, PipelineService
from .nn import load_model

COMMANDS = ("generate", "train", "dfr", "eval", "cam", "neurons", "report", "pipeline")

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _unsigned(value: str) -> int:
    number = int(value)
    if not 0 <= number < (1 << 64):
        raise argparse.ArgumentTypeError(f"{value} is not an unsigned 64-bit integer")
    return number


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfr-workbench",
        description="Synthetic spurious-correlation benchmark for last-layer feature reweighting",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS, help="stage to run")
    parser.add_argument("--config", type=Path, help="JSON config file merged over the defaults")
    parser.add_argument("--out", type=Path, help="output directory (overrides pipeline.output_dir)")
    parser.add_argument("--seed", type=_unsigned, help="base seed (overrides pipeline.seed)")
    parser.add_argument("--runs", type=_positive, help="number of runs (overrides pipeline.n_runs)")
    return parser


class DfrWorkbenchApp:
    """命令行应用：解析参数、初始化日志、分派到流水线服务"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.config_manager: Optional[ConfigManager] = None

    def setup_logging(self, log_dir: Optional[Path] = None):
        """设置日志系统"""
        level, invalid = log_level_from_env()
        handlers: List[logging.Handler] = [logging.StreamHandler()]  # 至少保证控制台输出
        file_error = None
        if log_dir is not None:
            log_file = Path(log_dir) / "dfr_workbench.log"
            try:
                handlers.append(logging.FileHandler(str(log_file), encoding="utf-8"))
            except (PermissionError, OSError) as e:
                file_error = f"⚠️ 无法创建日志文件 {log_file}: {e}"

        logging.basicConfig(
            level=level,
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=handlers,
            force=True,
        )
        if file_error:
            self.logger.warning(file_error)
            self.logger.info("📝 将仅使用控制台日志输出")
        if invalid:
            self.logger.warning(f"⚠️ 无效的 DFR_WORKBENCH_LOG_LEVEL={invalid!r}，使用 INFO")
        self.logger.debug("日志系统初始化完成")

    def main(self, argv: Optional[List[str]] = None) -> int:
        args = build_parser().parse_args(argv)
        try:
            self.config_manager = ConfigManager(args.config)
            self.config_manager.apply_overrides(seed=args.seed, runs=args.runs,
                                                output_dir=str(args.out) if args.out else None)
            config = self.config_manager.to_pipeline_config()
        except SpecificationError as e:
            self.setup_logging()
            self.logger.error(f"❌ 配置错误: {e}")
            print(f"dfr-workbench: config error: {e}", file=sys.stderr)
            return EXIT_CONFIG_ERROR

        self.setup_logging(self.config_manager.get_log_directory())
        service = PipelineService(config)
        try:
            self.dispatch(args.command, service)
        except PipelineStageError as e:
            print(f"dfr-workbench: {args.command}: stage '{e.stage}' failed: {e.cause}", file=sys.stderr)
            return EXIT_STAGE_FAILURE
        except SpecificationError as e:
            self.logger.error(f"❌ 配置错误: {e}")
            print(f"dfr-workbench: config error: {e}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        except WorkbenchError as e:
            self.logger.error(f"❌ {args.command} 失败: {e}")
            print(f"dfr-workbench: {args.command}: {e}", file=sys.stderr)
            return EXIT_STAGE_FAILURE
        except Exception as e:
            self.logger.exception(f"❌ 未预期的错误: {e}")
            print(f"dfr-workbench: {args.command}: unexpected error: {e}", file=sys.stderr)
            return EXIT_STAGE_FAILURE
        return EXIT_OK

    def dispatch(self, command: str, service: PipelineService) -> None:
        """执行单个子命令；产物写入输出目录"""
        out = service.output_dir
        out.mkdir(parents=True, exist_ok=True)
        report_service.clear_failure_marker(out)
        if command == "pipeline":
            service.run_all()
            return
        if command == "report":
            with service.stage("report", out):
                record = report_service.record_from_artifacts(out, seed=service.config.seed)
                report = report_service.build_report([record], service.config.to_dict())
                report_service.write_report(report, out)
                problems = report_service.verify_report(report, out)
                if problems:
                    raise WorkbenchError("; ".join(problems))
            return

        with service.stage("generate", out):
            dataset = service.generate(out) if command == "generate" else service.load_or_generate(out)
        if command == "generate":
            return
        if command == "train":
            with service.stage("train", out):
                service.train(out, dataset)
            return
        if command == "dfr":
            with service.stage("dfr", out):
                service.retrain(out, dataset, load_model(out / ERM_MODEL_FILE))
            return

        with service.stage("load", out):
            erm, dfr_model, _ = service.load_models(out)
        if command == "eval":
            with service.stage("eval", out):
                service.evaluate(out, dataset, erm, dfr_model)
        elif command == "neurons":
            with service.stage("neurons", out):
                service.analyse_neurons(out, dataset, erm, dfr_model)
        elif command == "cam":
            with service.stage("cam", out):
                neurons_csv = out / report_service.NEURONS_CSV
                exemplars = None
                if neurons_csv.exists():
                    exemplars = select_exemplar_neurons(report_service.read_neurons_csv(neurons_csv))
                service.export_cams(out, dataset, erm, dfr_model, exemplars)


def main(argv: Optional[List[str]] = None) -> int:
    return DfrWorkbenchApp().main(argv)
