"""
Tool for generating baseline and intervened captions per scene.
"""
from typing import Any, Dict

from core.eval_harness import STEP_HEADER, run_scene
from core.havae import InterventionSpec, mode_for
from core.store import ArtifactStore
from tools.common import error_result, load_workspace, parse_config
from utils.logger import setup_logger, log_tool_execution
from utils.parallel import map_ordered

logger = setup_logger(__name__)


def intervention_from(cfg) -> InterventionSpec:
    return InterventionSpec(
        alpha=cfg.alpha,
        beta=cfg.beta,
        renormalize=cfg.renormalize,
        mode=mode_for(cfg.alpha, cfg.beta),
    )


class GenerateCaptionsTool:
    """Decode every scene with and without the intervention hook."""

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            input_data: RunConfig fields (alpha, beta, renormalize, trace, profile, ...)

        Returns:
            Dictionary containing:
                - captions_path: JSON dump of token sequences per scene
                - steps_path: Per-step HAR/NHAR dump when trace is set
                - success / error / exit_code
        """
        try:
            cfg = parse_config(input_data, "generate")
            model, scenes, store = load_workspace(cfg)
            profile = store.load_profile(cfg.profile_path).require_thresholds()
            spec = intervention_from(cfg)

            runs = map_ordered(lambda s: run_scene(s, model, profile, spec, cfg.max_new), scenes, cfg.workers)
            runs.sort(key=lambda r: r.scene_id)
            captions = {
                "config": {"mode": spec.mode, "alpha": spec.alpha, "beta": spec.beta, "renormalize": spec.renormalize},
                "scenes": [
                    {
                        "scene_id": r.scene_id,
                        "inert": sorted(r.inert),
                        "baseline": r.baseline_tokens,
                        "intervened": r.intervened_tokens,
                    }
                    for r in runs
                ],
            }
            result = {
                "captions_path": str(store.write_json(ArtifactStore.CAPTIONS, captions)),
                "success": True,
                "exit_code": 0,
            }
            if cfg.trace:
                rows = [row for r in runs for row in r.step_rows]
                result["steps_path"] = str(store.write_csv(ArtifactStore.STEPS, STEP_HEADER, rows))

            log_tool_execution("GenerateCaptionsTool", input_data, result)
            logger.info(f"Generated captions for {len(runs)} scenes ({spec.mode}, alpha={spec.alpha})")
            return result

        except Exception as e:
            return error_result("GenerateCaptionsTool", e)
