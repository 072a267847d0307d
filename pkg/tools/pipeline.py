"""
Tool for orchestrating the complete lab pipeline.
Runs: Calibrate → Rank heads → Evaluate in a single operation.
"""
from typing import Any, Dict

from tools.calibrate_profile import CalibrateProfileTool
from tools.evaluate import EvaluateTool
from tools.rank_heads import RankHeadsTool
from utils.logger import setup_logger, log_tool_execution

logger = setup_logger(__name__)


class PipelineTool:
    """Tool for running the complete calibrate / rank / eval pipeline."""

    def __init__(self):
        """Initialize pipeline tools."""
        self.calibrate_tool = CalibrateProfileTool()
        self.rank_tool = RankHeadsTool()
        self.eval_tool = EvaluateTool()

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Run the complete pipeline with one set of RunConfig fields.

        Returns:
            Dictionary containing:
                - profile_path / report_path: Written artifacts
                - report: The EvalReport as a dict
                - pipeline_steps: Status of each pipeline step
                - success / error / exit_code
        """
        pipeline_steps = {
            "calibrate": {"completed": False, "error": None},
            "rank_heads": {"completed": False, "error": None},
            "eval": {"completed": False, "error": None},
        }
        stages = (
            ("calibrate", self.calibrate_tool),
            ("rank_heads", self.rank_tool),
            ("eval", self.eval_tool),
        )
        outputs: Dict[str, Dict[str, Any]] = {}
        for number, (name, tool) in enumerate(stages, start=1):
            logger.info(f"Pipeline: Step {number} - {name}")
            stage_result = tool.run(input_data)
            if not stage_result.get("success"):
                pipeline_steps[name]["error"] = stage_result.get("error")
                return {
                    "success": False,
                    "error": f"{name} failed: {stage_result.get('error')}",
                    "exit_code": stage_result.get("exit_code", 1),
                    "pipeline_steps": pipeline_steps,
                }
            pipeline_steps[name]["completed"] = True
            outputs[name] = stage_result

        result = {
            "profile_path": outputs["rank_heads"]["profile_path"],
            "report_path": outputs["eval"]["report_path"],
            "report": outputs["eval"]["report"],
            "success": True,
            "exit_code": 0,
            "pipeline_steps": pipeline_steps,
        }
        log_tool_execution("PipelineTool", input_data, result)
        logger.info("Pipeline completed successfully")
        return result
