"""
报告服务 - 汇总多次运行的结果并写出 report.json / metrics.csv / neurons.csv
同时负责校验报告中引用的文件
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from ..container import load_container
from ..errors import FormatError
from ..evaluation import GroupMetrics, RunSummary, metric_rows, summarize_runs, summary_table
from ..image_export import read_pnm
from ..interpret import NeuronReport, Taxonomy, taxonomy_contrast, taxonomy_counts

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
REPORT_FILE = "report.json"
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
NEURONS_CSV = "neurons.csv"
FAILED_MARKER = "FAILED"

METRIC_FIELDS = ["run", "stage", "group", "n", "accuracy"]
NEURON_FIELDS = ["k", "w_erm", "w_dfr", "core_score", "spurious_score", "taxonomy"]

# 文件扩展名 -> 声明格式
FORMATS = {".pgm": "pgm", ".ppm": "ppm", ".json": "json", ".csv": "csv", ".dfrt": "dfrt"}


@dataclass
class RunRecord:
    """单次运行的结果记录"""

    run: int
    seed: int
    erm: GroupMetrics
    dfr: GroupMetrics
    zero_fraction: float
    converged: bool = True
    sparsity_path: Dict[str, float] = field(default_factory=dict)
    taxonomy_counts: Dict[str, int] = field(default_factory=dict)
    taxonomy_contrast: Dict[str, Any] = field(default_factory=dict)
    exemplars: Dict[str, Optional[int]] = field(default_factory=dict)
    cam_focus: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run": self.run,
            "seed": self.seed,
            "erm": self.erm.to_dict(),
            "dfr": self.dfr.to_dict(),
            "zero_fraction": self.zero_fraction,
            "converged": self.converged,
            "sparsity_path": self.sparsity_path,
            "taxonomy_counts": self.taxonomy_counts,
            "taxonomy_contrast": self.taxonomy_contrast,
            "exemplars": self.exemplars,
            "cam_focus": self.cam_focus,
        }


def _file_entry(path: str) -> Dict[str, str]:
    return {"path": path, "format": FORMATS.get(Path(path).suffix, "unknown")}


def build_report(records: Sequence[RunRecord], config: Dict[str, Any],
                 generated_at: Optional[str] = None) -> Dict[str, Any]:
    """组装报告字典；除 generated_at 外完全由输入决定"""
    records = sorted(records, key=lambda r: r.run)
    summary: RunSummary = summarize_runs([(r.erm, r.dfr) for r in records])
    contrasts = [r.taxonomy_contrast.get("holds") for r in records]
    files = sorted({path for r in records for path in r.files})
    return {
        "report_version": REPORT_VERSION,
        "generated_at": generated_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config,
        "runs": [r.to_dict() for r in records],
        "summary": summary.to_dict(),
        "table": summary_table(summary),
        "zero_fraction": [r.zero_fraction for r in records],
        "taxonomy_contrast_holds": {
            "runs_holding": sum(1 for h in contrasts if h is True),
            "runs_evaluated": sum(1 for h in contrasts if h is not None),
        },
        "files": [_file_entry(path) for path in files],
    }


def write_json(data: Dict[str, Any], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
    return path


def read_json(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_report(report: Dict[str, Any], out_dir: Path) -> Path:
    path = write_json(report, Path(out_dir) / REPORT_FILE)
    logger.info(f"✅ 报告已写出: {path}")
    return path


def write_metrics_csv(records: Sequence[RunRecord], path: Path) -> Path:
    """每次运行每个阶段：四个组加平均，一行一个"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for record in sorted(records, key=lambda r: r.run):
            writer.writerows(metric_rows(record.run, "erm", record.erm))
            writer.writerows(metric_rows(record.run, "dfr", record.dfr))
    return path


def write_neurons_csv(reports: Sequence[NeuronReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=NEURON_FIELDS)
        writer.writeheader()
        writer.writerows(report.to_row() for report in reports)
    return path


def read_neurons_csv(path: Path) -> List[NeuronReport]:
    """neurons.csv 读回为 NeuronReport（mean_mass 未持久化，记为 nan）"""
    reports = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            reports.append(NeuronReport(
                k=int(row["k"]),
                w_erm=float(row["w_erm"]),
                w_dfr=float(row["w_dfr"]),
                core_score=float(row["core_score"]),
                spurious_score=float(row["spurious_score"]),
                mean_mass=float("nan"),
                taxonomy=Taxonomy(row["taxonomy"]),
            ))
    return reports


def record_from_artifacts(work_dir: Path, run: int = 0, seed: int = 0) -> RunRecord:
    """从单次命令产生的 metrics.json / dfr_result.json / neurons.csv 重建 RunRecord"""
    work_dir = Path(work_dir)
    metrics = read_json(work_dir / METRICS_JSON)
    dfr_result = read_json(work_dir / "dfr_result.json")
    record = RunRecord(
        run=run,
        seed=seed,
        erm=GroupMetrics.from_dict(metrics["erm"]),
        dfr=GroupMetrics.from_dict(metrics["dfr"]),
        zero_fraction=float(dfr_result["zero_fraction"]),
        converged=bool(dfr_result["converged"]),
    )
    neurons_path = work_dir / NEURONS_CSV
    if neurons_path.exists():
        reports = read_neurons_csv(neurons_path)
        record.taxonomy_counts = taxonomy_counts(reports)
        record.taxonomy_contrast = taxonomy_contrast(reports).to_dict()
    else:
        logger.warning(f"⚠️ 未找到 {neurons_path}，报告中不含神经元分类")
    record.files = [name for name in (METRICS_JSON, METRICS_CSV, NEURONS_CSV, "dfr_result.json")
                    if (work_dir / name).exists()]
    return record


def _check_file(path: Path, declared: str) -> None:
    if declared in ("pgm", "ppm"):
        pixels = read_pnm(path)
        if (pixels.ndim == 3) != (declared == "ppm"):
            raise FormatError(0, f"{path} is not a {declared.upper()} file")
    elif declared == "json":
        read_json(path)
    elif declared == "csv":
        with open(path, "r", encoding="utf-8", newline="") as f:
            if next(csv.reader(f), None) is None:
                raise FormatError(0, f"{path} has no header row")
    elif declared == "dfrt":
        load_container(path)
    else:
        raise FormatError(0, f"{path} has unknown format {declared!r}")


def verify_report(report: Dict[str, Any], out_dir: Path) -> List[str]:
    """检查报告引用的每个文件都存在且可按声明格式解析；返回问题列表"""
    out_dir = Path(out_dir)
    problems = []
    if report.get("report_version") != REPORT_VERSION:
        problems.append(f"unsupported report_version {report.get('report_version')!r}")
    for entry in report.get("files", []):
        path = out_dir / entry["path"]
        if not path.exists():
            problems.append(f"missing file: {entry['path']}")
            continue
        try:
            _check_file(path, entry["format"])
        except (FormatError, ValueError, OSError) as e:
            problems.append(f"{entry['path']}: {e}")
    if problems:
        logger.warning(f"⚠️ 报告校验发现 {len(problems)} 个问题")
    else:
        logger.info(f"✅ 报告校验通过: {len(report.get('files', []))} 个文件")
    return problems


def write_failure_marker(directory: Path, stage: str, error: BaseException) -> Path:
    """写出 FAILED 标记文件，记录失败阶段"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / FAILED_MARKER
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"stage: {stage}\nerror: {type(error).__name__}: {error}\n")
    return path


def clear_failure_marker(directory: Path) -> bool:
    """删除上一次失败留下的 FAILED 标记；返回是否删除了文件"""
    path = Path(directory) / FAILED_MARKER
    if not path.exists():
        return False
    path.unlink()
    logger.info(f"已清除旧的失败标记: {path}")
    return True
