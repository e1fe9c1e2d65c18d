"""
服务层 - 流水线编排与报告输出
"""

from .pipeline_service import PipelineService, run_pipeline
from .report_service import RunRecord, build_report, verify_report

__all__ = ["PipelineService", "run_pipeline", "RunRecord", "build_report", "verify_report"]
