"""
Tool for ranking attention heads and recording the target set in the profile.
"""
from typing import Any, Dict

from core.head_metrics import HEAD_HEADER, rank_heads
from core.store import ArtifactStore
from tools.common import error_result, load_workspace, parse_config
from utils.logger import setup_logger, log_tool_execution

logger = setup_logger(__name__)


class RankHeadsTool:
    """Score every head by mean NHAR and store the top-K in the profile."""

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            input_data: RunConfig fields (k, no_gt, criterion, profile, ...)

        Returns:
            Dictionary containing:
                - profile_path: Updated profile
                - h_target: Selected [layer, head] pairs
                - har_real_mean / har_hal_mean: Pre-selected head HAR summaries
                - success / error / exit_code
        """
        try:
            cfg = parse_config(input_data, "rank-heads")
            model, scenes, store = load_workspace(cfg)
            profile = store.load_profile(cfg.profile_path)

            updated, table = rank_heads(
                scenes,
                model,
                profile,
                k=cfg.k,
                no_gt=cfg.no_gt,
                criterion=cfg.criterion,
                max_new=cfg.max_new,
                alpha=cfg.alpha,
                workers=cfg.workers,
            )
            profile_path = store.save_profile(updated, cfg.profile_path)
            store.write_csv(ArtifactStore.HEADS, HEAD_HEADER, table.rows())
            har_real, har_hal = table.har_separation()

            result = {
                "profile_path": str(profile_path),
                "h_target": [list(h) for h in updated.h_target],
                "har_real_mean": har_real,
                "har_hal_mean": har_hal,
                "success": True,
                "exit_code": 0,
            }
            log_tool_execution("RankHeadsTool", input_data, result)
            return result

        except Exception as e:
            return error_result("RankHeadsTool", e)
