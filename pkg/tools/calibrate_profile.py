"""
Tool for calibrating a hijack profile over a scene corpus.
"""
from typing import Any, Dict

from core.habi import HISTOGRAM_HEADER, CalibrationKnobs, calibrate_with_stats, histogram_rows
from core.logit_lens import TRACE_HEADER, trace_rows
from core.store import ArtifactStore
from tools.common import error_result, load_workspace, parse_config
from utils.logger import setup_logger, log_tool_execution

logger = setup_logger(__name__)


class CalibrateProfileTool:
    """Run calibration and write the profile plus histogram and trace dumps."""

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            input_data: RunConfig fields (scenes, seed, model dims, iqr_mult,
                salient_frac, skip_salient, out, profile, scene_dir)

        Returns:
            Dictionary containing:
                - profile_path: Where the profile JSON was written
                - anchors: Hijacking anchor word ids
                - tau_s, tau_r: Calibrated thresholds
                - warning: "degenerate_otsu" when no inert tokens are detectable
                - success / error / exit_code
        """
        try:
            cfg = parse_config(input_data, "calibrate")
            model, scenes, store = load_workspace(cfg)
            knobs = CalibrationKnobs(
                iqr_multiplier=cfg.iqr_mult,
                salient_fraction=cfg.salient_frac,
                skip_salient_filter=cfg.skip_salient,
                max_new=cfg.max_new,
                k=cfg.k,
                alpha=cfg.alpha,
                seed=cfg.seed,
            )
            run = calibrate_with_stats(scenes, model, knobs, workers=cfg.workers)

            profile_path = store.save_profile(run.profile, cfg.profile_path)
            histograms = histogram_rows(run.scores, "scores") + histogram_rows(
                run.ratios, "ratios_salient", value_range=(0.0, 1.0)
            )
            store.write_csv(ArtifactStore.HISTOGRAMS, HISTOGRAM_HEADER, histograms)
            store.write_csv(
                ArtifactStore.TRACES,
                TRACE_HEADER,
                [row for obs in run.observations for row in trace_rows(obs.scene_id, obs.traces)],
            )

            result = {
                "profile_path": str(profile_path),
                "anchors": run.profile.anchors,
                "tau_s": run.profile.tau_s,
                "tau_r": run.profile.tau_r,
                "warning": run.profile.meta.warning,
                "success": True,
                "exit_code": 0,
            }
            log_tool_execution("CalibrateProfileTool", input_data, result)
            return result

        except Exception as e:
            return error_result("CalibrateProfileTool", e)
