"""
Tool for writing planted fixture scenes to a scene directory.
"""
from pathlib import Path
from typing import Any, Dict

from core.model_loader import ModelLoader
from core.store import ArtifactStore
from tools.common import error_result, parse_config
from utils.logger import setup_logger, log_tool_execution

logger = setup_logger(__name__)


class MakeScenesTool:
    """Generate scenes from the run seed and save one JSON file per scene."""

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            input_data: RunConfig fields; scene_dir defaults to <out>/scenes

        Returns:
            Dictionary containing:
                - scene_dir: Directory the scenes were written to
                - n_scenes: Number of scenes written
                - success / error / exit_code
        """
        try:
            cfg = parse_config(input_data, "make-scenes")
            model = ModelLoader.get_model(cfg.toy_config())
            scenes = ModelLoader.get_scenes(model, cfg.scenes, cfg.seed, cfg.scene_params())
            scene_dir = Path(cfg.scene_dir) if cfg.scene_dir else Path(cfg.out) / "scenes"
            ArtifactStore(cfg.out).save_scenes(scenes, scene_dir)

            result = {
                "scene_dir": str(scene_dir),
                "n_scenes": len(scenes),
                "success": True,
                "exit_code": 0,
            }
            log_tool_execution("MakeScenesTool", input_data, result)
            logger.info(f"Wrote {len(scenes)} scenes to {scene_dir}")
            return result

        except Exception as e:
            return error_result("MakeScenesTool", e)
