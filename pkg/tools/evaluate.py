"""
Tool for the baseline-versus-intervention evaluation battery.
"""
from typing import Any, Dict

from core.eval_harness import SCENE_HEADER, STEP_HEADER, run_ab
from core.store import ArtifactStore
from tools.common import error_result, load_workspace, parse_config
from tools.generate_captions import intervention_from
from utils.logger import setup_logger, log_tool_execution

logger = setup_logger(__name__)


class EvaluateTool:
    """Run the A/B battery and write the report and per-scene breakdown."""

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            input_data: RunConfig fields (alpha, beta, compare_persist, t, ktop, ...)

        Returns:
            Dictionary containing:
                - report_path: EvalReport JSON
                - report: The report as a dict
                - success / error / exit_code
        """
        try:
            cfg = parse_config(input_data, "eval")
            model, scenes, store = load_workspace(cfg)
            profile = store.load_profile(cfg.profile_path)

            evaluation = run_ab(
                scenes,
                model,
                profile,
                intervention_from(cfg),
                max_new=cfg.max_new,
                compare_persist=cfg.compare_persist,
                t=cfg.t,
                k_top=cfg.ktop,
                workers=cfg.workers,
            )
            report_path = store.save_report(evaluation.report)
            store.write_csv(ArtifactStore.SCENES, SCENE_HEADER, evaluation.scene_rows())
            if cfg.trace:
                store.write_csv(ArtifactStore.STEPS, STEP_HEADER, evaluation.step_rows())

            result = {
                "report_path": str(report_path),
                "report": evaluation.report.model_dump(mode="json"),
                "success": True,
                "exit_code": 0,
            }
            log_tool_execution("EvaluateTool", input_data, result)
            return result

        except Exception as e:
            return error_result("EvaluateTool", e)
