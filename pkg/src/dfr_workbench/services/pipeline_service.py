"""
流水线服务 - 编排 生成数据 → ERM 训练 → 评估 → DFR 重训练 → 评估 → 解释 的各个阶段
每个阶段既可单独调用（命令行子命令），也可由 run_all 串联成多次运行
"""

import contextlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..config_manager import PipelineConfig
from ..datagen import ALL_GROUPS, DATASET_FILE, GroupedDataset, GroupId, Sample, generate_dataset
from ..datagen import load_dataset as read_dataset
from ..datagen import save_dataset
from ..dfr import DfrResult, apply_dfr, extract_features, load_dfr_result, retrain_head, save_dfr_result, sparsity_path
from ..errors import PipelineStageError, WorkbenchError
from ..evaluation import GroupMetrics, group_accuracies, worst_group
from ..image_export import export_heatmap, export_image, export_weight_grid
from ..interpret import (
    NeuronReport,
    cam,
    cam_focus,
    classify_neurons,
    default_grid_width,
    neuron_map,
    select_exemplar_neurons,
    taxonomy_contrast,
    taxonomy_counts,
    weight_heatmap,
)
from ..nn import TrainedModel, load_model, save_model, train_erm
from . import report_service
from .report_service import RunRecord

logger = logging.getLogger(__name__)

DATASET_DIR = "dataset"
ERM_MODEL_FILE = "erm_model.dfrt"
DFR_MODEL_FILE = "dfr_model.dfrt"
DFR_RESULT_FILE = "dfr_result.json"
TRAIN_LOG_FILE = "train_log.json"
CAM_DIR = "cam"
WEIGHTS_DIR = "weights"


def panel_samples(samples: List[Sample], per_group: int) -> List[Tuple[GroupId, int, Sample]]:
    """每组取前 per_group 个样本（按数据集顺序），组序 0..3"""
    panel = []
    for group in ALL_GROUPS:
        members = [s for s in samples if s.group == group][:per_group]
        panel.extend((group, j, s) for j, s in enumerate(members))
    return panel


def probe_samples(samples: List[Sample], max_probes: int) -> List[Sample]:
    """神经元分类的探针集：每组至多 max_probes // 4 个样本"""
    per_group = max(1, max_probes // len(ALL_GROUPS))
    probe = []
    for group in ALL_GROUPS:
        probe.extend([s for s in samples if s.group == group][:per_group])
    return probe


class PipelineService:
    """流水线服务 - 按阶段执行实验并写出产物"""

    def __init__(self, config: PipelineConfig, output_dir: Optional[Path] = None):
        """
        初始化流水线服务

        Args:
            config: 已校验的流水线配置
            output_dir: 输出目录（默认取 config.output_dir）
        """
        config.validate()
        self.config = config
        self.output_dir = Path(output_dir or config.output_dir)

    def run_directory(self, run_index: int) -> Path:
        return self.output_dir / f"run_{run_index}"

    @contextlib.contextmanager
    def stage(self, name: str, work_dir: Path, run_index: Optional[int] = None) -> Iterator[None]:
        """阶段边界：失败时记录日志、写 FAILED 标记并抛出 PipelineStageError"""
        where = f"[run {run_index}] " if run_index is not None else ""
        logger.info(f"{where}开始阶段: {name}")
        try:
            yield
        except PipelineStageError:
            raise
        except Exception as e:
            logger.error(f"❌ {where}阶段 {name} 失败: {e}")
            report_service.write_failure_marker(work_dir, name, e)
            raise PipelineStageError(name, e, run_index) from e
        logger.info(f"✅ {where}阶段完成: {name}")

    # ---- 单阶段 ----

    def generate(self, work_dir: Path, run_index: int = 0, save: bool = True) -> GroupedDataset:
        spec, _, _ = self.config.for_run(run_index)
        dataset = generate_dataset(spec)
        counts = dataset.group_counts()
        logger.info(f"数据集已生成: train={counts['train']}, valid={counts['valid']}, test={counts['test']}")
        if save:
            save_dataset(dataset, Path(work_dir) / DATASET_DIR)
        return dataset

    def load_or_generate(self, work_dir: Path, run_index: int = 0) -> GroupedDataset:
        directory = Path(work_dir) / DATASET_DIR
        if (directory / DATASET_FILE).exists():
            logger.info(f"读取已有数据集: {directory}")
            return read_dataset(directory)
        logger.info("未找到数据集，重新生成")
        return self.generate(work_dir, run_index)

    def train(self, work_dir: Path, dataset: GroupedDataset, run_index: int = 0) -> TrainedModel:
        _, train_cfg, _ = self.config.for_run(run_index)
        model = train_erm(dataset, train_cfg)
        work_dir = Path(work_dir)
        save_model(model, work_dir / ERM_MODEL_FILE)
        report_service.write_json(asdict(model.log), work_dir / TRAIN_LOG_FILE)
        return model

    def retrain(self, work_dir: Path, dataset: GroupedDataset, model: TrainedModel,
                run_index: int = 0) -> Tuple[DfrResult, TrainedModel, Dict[str, float]]:
        """在验证集的组平衡子集上重训练分类头；同时扫描 lambda 得到稀疏度曲线"""
        _, _, dfr_cfg = self.config.for_run(run_index)
        features = extract_features(model, dataset.valid)
        result = retrain_head(features, dfr_cfg)
        dfr_model = apply_dfr(model, result)
        sweep: Dict[str, float] = {}
        if self.config.lambda_sweep:
            fractions = sparsity_path(features, dfr_cfg, self.config.lambda_sweep)
            sweep = {repr(lam): frac for lam, frac in zip(self.config.lambda_sweep, fractions)}
        work_dir = Path(work_dir)
        save_dfr_result(result, work_dir / DFR_RESULT_FILE)
        save_model(dfr_model, work_dir / DFR_MODEL_FILE)
        logger.info(f"零权重比例: {result.zero_fraction:.3f}")
        return result, dfr_model, sweep

    def load_models(self, work_dir: Path) -> Tuple[TrainedModel, TrainedModel, DfrResult]:
        work_dir = Path(work_dir)
        erm = load_model(work_dir / ERM_MODEL_FILE)
        dfr_model = load_model(work_dir / DFR_MODEL_FILE)
        result = load_dfr_result(work_dir / DFR_RESULT_FILE)
        return erm, dfr_model, result

    def evaluate(self, work_dir: Path, dataset: GroupedDataset, erm: TrainedModel, dfr_model: TrainedModel,
                 run_index: int = 0) -> Tuple[GroupMetrics, GroupMetrics]:
        """测试集上的分组准确率；最差组由 ERM 结果决定"""
        threshold = self.config.eval_threshold
        erm_metrics = group_accuracies(erm, dataset.test, threshold)
        dfr_metrics = group_accuracies(dfr_model, dataset.test, threshold)
        worst = worst_group(erm_metrics)
        for metrics in (erm_metrics, dfr_metrics):
            metrics.worst_group = worst
            metrics.run_id = run_index
        logger.info(
            f"最差组 {worst.name}: ERM={erm_metrics.per_group_accuracy[worst.index]:.3f}, "
            f"DFR={dfr_metrics.per_group_accuracy[worst.index]:.3f}"
        )
        work_dir = Path(work_dir)
        report_service.write_json({"erm": erm_metrics.to_dict(), "dfr": dfr_metrics.to_dict()},
                                  work_dir / report_service.METRICS_JSON)
        record = RunRecord(run_index, self.config.run_seed(run_index), erm_metrics, dfr_metrics, float("nan"))
        report_service.write_metrics_csv([record], work_dir / report_service.METRICS_CSV)
        return erm_metrics, dfr_metrics

    def analyse_neurons(self, work_dir: Path, dataset: GroupedDataset, erm: TrainedModel,
                        dfr_model: TrainedModel) -> List[NeuronReport]:
        probe = probe_samples(dataset.test, self.config.max_probes)
        reports = classify_neurons(erm, probe, dfr_model.head, self.config.taxonomy)
        report_service.write_neurons_csv(reports, Path(work_dir) / report_service.NEURONS_CSV)
        logger.info(f"神经元分类: {taxonomy_counts(reports)}")
        return reports

    def export_cams(self, work_dir: Path, dataset: GroupedDataset, erm: TrainedModel, dfr_model: TrainedModel,
                    exemplars: Optional[Dict[str, Optional[int]]] = None) -> List[Path]:
        """样本面板的原图、ERM/DFR CAM、典型神经元图，以及两组头部权重网格"""
        work_dir = Path(work_dir)
        written: List[Path] = []
        for group, j, sample in panel_samples(dataset.test, self.config.panel_per_group):
            stem = work_dir / CAM_DIR / f"{group.name}_{j}"
            written.append(export_image(sample.image, f"{stem}_image.ppm").path)
            written.append(export_heatmap(cam(erm, sample.image), f"{stem}_erm_cam.ppm", "diverging").path)
            written.append(export_heatmap(cam(dfr_model, sample.image), f"{stem}_dfr_cam.ppm", "diverging").path)
            for kind, k in sorted((exemplars or {}).items()):
                if k is None:
                    continue
                heatmap = neuron_map(erm, sample.image, k)
                written.append(export_heatmap(heatmap, f"{stem}_neuron{k}_{kind}.pgm", "gray").path)
        d = erm.head.dim
        grid_w = self.config.weight_grid_width or default_grid_width(d)
        for label, model in (("erm", erm), ("dfr", dfr_model)):
            grid = weight_heatmap(model.head, grid_w)
            written.append(export_weight_grid(grid, work_dir / WEIGHTS_DIR / f"{label}_weights.ppm").path)
        logger.info(f"已导出 {len(written)} 个图像文件")
        return written

    # ---- 完整运行 ----

    def run(self, run_index: int) -> RunRecord:
        """单次运行：所有产物写入 run_<i>/"""
        work_dir = self.run_directory(run_index)
        work_dir.mkdir(parents=True, exist_ok=True)
        report_service.clear_failure_marker(work_dir)
        with self.stage("generate", work_dir, run_index):
            dataset = self.generate(work_dir, run_index, save=False)
        with self.stage("train", work_dir, run_index):
            erm = self.train(work_dir, dataset, run_index)
        with self.stage("dfr", work_dir, run_index):
            result, dfr_model, sweep = self.retrain(work_dir, dataset, erm, run_index)
        with self.stage("eval", work_dir, run_index):
            erm_metrics, dfr_metrics = self.evaluate(work_dir, dataset, erm, dfr_model, run_index)
        with self.stage("neurons", work_dir, run_index):
            reports = self.analyse_neurons(work_dir, dataset, erm, dfr_model)
            exemplars = select_exemplar_neurons(reports)
            contrast = taxonomy_contrast(reports)
        with self.stage("cam", work_dir, run_index):
            images = self.export_cams(work_dir, dataset, erm, dfr_model, exemplars)
            focus = {"erm": cam_focus(erm, dataset.test), "dfr": cam_focus(dfr_model, dataset.test)}

        artifacts = [work_dir / name for name in (
            ERM_MODEL_FILE, DFR_MODEL_FILE, DFR_RESULT_FILE, TRAIN_LOG_FILE,
            report_service.METRICS_JSON, report_service.METRICS_CSV, report_service.NEURONS_CSV,
        )] + images
        return RunRecord(
            run=run_index,
            seed=self.config.run_seed(run_index),
            erm=erm_metrics,
            dfr=dfr_metrics,
            zero_fraction=result.zero_fraction,
            converged=result.converged,
            sparsity_path=sweep,
            taxonomy_counts=taxonomy_counts(reports),
            taxonomy_contrast=contrast.to_dict(),
            exemplars=exemplars,
            cam_focus=focus,
            files=[path.relative_to(self.output_dir).as_posix() for path in artifacts],
        )

    def run_all(self) -> Dict:
        """执行 n_runs 次运行（可并发），汇总并写出 report.json 与 metrics.csv"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        report_service.clear_failure_marker(self.output_dir)
        indices = range(self.config.n_runs)
        logger.info(f"开始流水线: {self.config.n_runs} 次运行, 种子 {self.config.seed}..., 输出 {self.output_dir}")
        try:
            if self.config.workers > 1 and self.config.n_runs > 1:
                with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
                    records = list(executor.map(self.run, indices))
            else:
                records = [self.run(i) for i in indices]
        except PipelineStageError as e:
            report_service.write_failure_marker(self.output_dir, e.stage, e)
            raise

        with self.stage("report", self.output_dir):
            report_service.write_metrics_csv(records, self.output_dir / report_service.METRICS_CSV)
            report = report_service.build_report(records, self.config.to_dict())
            report["files"] = sorted(report["files"] + [{"path": report_service.METRICS_CSV, "format": "csv"}],
                                     key=lambda entry: entry["path"])
            report_service.write_report(report, self.output_dir)
            problems = report_service.verify_report(report, self.output_dir)
            if problems:
                raise WorkbenchError("; ".join(problems))
        self._log_summary(report)
        return report

    def _log_summary(self, report: Dict) -> None:
        summary = report["summary"]
        worst = summary["worst_group_name"]
        erm = summary["stats"]["erm"]["worst_group"]
        dfr = summary["stats"]["dfr"]["worst_group"]
        zero = float(np.mean(report["zero_fraction"]))
        logger.info(
            f"✅ 流水线完成: 最差组 {worst} ERM {erm['mean']:.3f}±{erm['std']:.3f} → "
            f"DFR {dfr['mean']:.3f}±{dfr['std']:.3f}, 平均零权重比例 {zero:.3f}"
        )
        if summary["single_run"]:
            logger.info("单次运行：标准差记为 0")


def run_pipeline(config: PipelineConfig, output_dir: Optional[Path] = None) -> Dict:
    """完整流水线：n_runs 次运行后写出并返回报告"""
    return PipelineService(config, output_dir).run_all()
