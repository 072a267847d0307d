"""
Model and scene loader.
Builds toy models from their config and caches them per config.
"""
from typing import Dict, List, Optional

from core.toy_lvlm import ModelConfig, SceneParams, ToyScene, ToyTransformer, init_model, make_scenes
from utils.logger import setup_logger

logger = setup_logger(__name__)


class ModelLoader:
    """Handles construction and caching of toy models."""

    _models: Dict[ModelConfig, ToyTransformer] = {}

    @classmethod
    def get_model(cls, config: ModelConfig) -> ToyTransformer:
        """Get or build the model for config."""
        if config not in cls._models:
            cls._models[config] = init_model(config)
            logger.info(f"Toy model initialized: {config.n_layers}x{config.n_heads}, d_model={config.d_model}")
        return cls._models[config]

    @classmethod
    def get_scenes(
        cls,
        model: ToyTransformer,
        n_scenes: int,
        seed: int,
        params: Optional[SceneParams] = None,
    ) -> List[ToyScene]:
        return make_scenes(model, params or SceneParams(), seed, n_scenes)

    @classmethod
    def reset(cls):
        """Reset cached models (useful for testing)."""
        cls._models = {}
