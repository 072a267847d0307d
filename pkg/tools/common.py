"""
Shared plumbing for the pipeline tools: config parsing, model and scene
loading, and the error-to-result convention.
"""
from typing import Any, Dict, List, Tuple

from pydantic import ValidationError

from config.run_config import RunConfig
from core.errors import HijackLensError
from core.model_loader import ModelLoader
from core.store import ArtifactStore
from core.toy_lvlm import ToyScene, ToyTransformer
from utils.logger import setup_logger

logger = setup_logger(__name__)


def parse_config(input_data: Dict[str, Any], command: str) -> RunConfig:
    return RunConfig(**{**input_data, "command": command})


def load_workspace(cfg: RunConfig) -> Tuple[ToyTransformer, List[ToyScene], ArtifactStore]:
    store = ArtifactStore(cfg.out)
    model = ModelLoader.get_model(cfg.toy_config())
    if cfg.scene_dir:
        scenes = store.load_scenes(cfg.scene_dir)
    else:
        scenes = ModelLoader.get_scenes(model, cfg.scenes, cfg.seed, cfg.scene_params())
    return model, scenes, store


def error_result(tool_name: str, e: Exception) -> Dict[str, Any]:
    if isinstance(e, ValidationError):
        error_msg, exit_code = f"{tool_name}: invalid configuration: {e}", 2
    elif isinstance(e, HijackLensError):
        error_msg, exit_code = f"{tool_name} failed: {e}", e.exit_code
    else:
        error_msg, exit_code = f"{tool_name} failed unexpectedly: {e!r}", 1
    logger.error(error_msg)
    return {"success": False, "error": error_msg, "exit_code": exit_code}
