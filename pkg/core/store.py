import csv
import json
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Union

from config.settings import settings
from core.errors import ConfigurationError, InputError, ProfileIncompleteError
from core.eval_harness import EvalReport
from core.habi import HijackProfile
from core.toy_lvlm import ToyScene
from utils.logger import setup_logger

logger = setup_logger(__name__)

PathLike = Union[str, Path]


class ArtifactStore:
    """File-based storage for scenes, profiles, reports and CSV dumps."""

    PROFILE = "profile.json"
    REPORT = "report.json"
    CAPTIONS = "captions.json"
    HISTOGRAMS = "histograms.csv"
    HEADS = "heads.csv"
    SCENES = "scenes.csv"
    STEPS = "steps.csv"
    TRACES = "traces.csv"

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root if root is not None else settings.OUTPUT_DIR)

    def path(self, name: PathLike) -> Path:
        name = Path(name)
        return name if name.is_absolute() else self.root / name

    def write_text(self, name: PathLike, text: str) -> Path:
        target = self.path(name)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        except OSError as e:
            logger.error(f"Failed to write {target}: {e}")
            raise ConfigurationError(f"cannot write {target}: {e}") from e
        logger.debug(f"Wrote {target}")
        return target

    def write_json(self, name: PathLike, data: Any) -> Path:
        return self.write_text(name, json.dumps(data, indent=2) + "\n")

    def write_csv(self, name: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with target.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    writer.writerow(["" if v is None else v for v in row])
        except OSError as e:
            logger.error(f"Failed to write {target}: {e}")
            raise ConfigurationError(f"cannot write {target}: {e}") from e
        logger.debug(f"Wrote {target}")
        return target

    def save_profile(self, profile: HijackProfile, name: PathLike = PROFILE) -> Path:
        return self.write_text(name, profile.to_json())

    def load_profile(self, name: PathLike = PROFILE) -> HijackProfile:
        source = self.path(name)
        try:
            text = source.read_text(encoding="utf-8")
        except OSError as e:
            raise ProfileIncompleteError(f"cannot read profile {source}: {e}") from e
        return HijackProfile.from_json(text)

    def save_report(self, report: EvalReport, name: PathLike = REPORT) -> Path:
        return self.write_text(name, report.to_json())

    def save_scenes(self, scenes: Sequence[ToyScene], directory: PathLike) -> List[Path]:
        return [
            self.write_json(Path(directory) / f"scene_{scene.scene_id}.json", scene.to_dict())
            for scene in scenes
        ]

    def load_scenes(self, directory: PathLike) -> List[ToyScene]:
        folder = self.path(directory)
        files = sorted(folder.glob("scene_*.json")) if folder.is_dir() else []
        if not files:
            raise InputError(f"no scene files in {folder}")
        scenes = []
        for file in files:
            try:
                scenes.append(ToyScene.from_dict(json.loads(file.read_text(encoding="utf-8"))))
            except (OSError, json.JSONDecodeError) as e:
                raise InputError(f"unreadable scene file {file}: {e}") from e
        logger.info(f"Loaded {len(scenes)} scenes from {folder}")
        return scenes
