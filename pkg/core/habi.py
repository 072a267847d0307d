"""
Hijacking anchor-based identification.

Calibration generates over a corpus of scenes, scores every vision token by
dominance x frequency x attention of its trace anchor, keeps anchor words
whose mean score clears an IQR outlier threshold, and splits the resulting
per-token hijacking ratios with Otsu's method. Identification then flags
vision tokens whose ratio exceeds that split.
"""
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import Literal

from core.errors import ConfigurationError, DegenerateDistributionError, DomainError, ProfileIncompleteError
from core.logit_lens import AnchorResult, Trace, decode_all_traces, trace_anchor
from core.toy_lvlm import ForwardCapture, ToyScene, ToyTransformer, default_prompt, generate_greedy
from utils.logger import setup_logger
from utils.parallel import map_ordered

logger = setup_logger(__name__)

PROFILE_SCHEMA = "hijacklens.profile/1"
OTSU_BINS = 256
DEGENERATE_OTSU = "degenerate_otsu"

ScorePopulation = Literal["scores", "anchor_means"]


@dataclass(frozen=True)
class HijackComponents:
    dominance: float
    frequency: float
    attention: float

    def __post_init__(self):
        for name in ("dominance", "frequency", "attention"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise DomainError(f"{name} must be finite and >= 0, got {value}")
        if self.dominance > 1:
            raise DomainError(f"dominance must be <= 1, got {self.dominance}")

    @classmethod
    def from_raw(cls, dominance: float, anchor_count: int, mean_attention: float) -> "HijackComponents":
        """Apply the log1p smoothing to the raw frequency and attention."""
        return cls(dominance, float(np.log1p(anchor_count)), float(np.log1p(mean_attention)))


def hijack_score(c: HijackComponents) -> float:
    return c.dominance * c.frequency * c.attention


def component_attention(captures: Sequence[ForwardCapture], vision_pos: int, n_steps: int = 10) -> float:
    """Mean attention from each step's query to vision_pos, over layers, heads and the first n_steps."""
    steps = captures[:n_steps]
    if not steps:
        raise DomainError("no decoding steps to average attention over")
    return float(np.mean([c.query_rows()[:, :, vision_pos].mean() for c in steps]))


def vision_attention(captures: Sequence[ForwardCapture], n_steps: int = 10) -> np.ndarray:
    """component_attention for every vision position at once."""
    steps = captures[:n_steps]
    if not steps:
        raise DomainError("no decoding steps to average attention over")
    v0, v1 = steps[0].seq.vision_span
    per_step = [c.query_rows()[:, :, v0:v1].mean(axis=(0, 1)) for c in steps]
    return np.mean(per_step, axis=0)


def quartile_threshold(values: Iterable[float], multiplier: float) -> float:
    """Q3 + multiplier * IQR, quartiles interpolated linearly at index (n - 1) q."""
    values = np.asarray(list(values), dtype=float)
    if values.size < 2:
        raise DomainError("quartile threshold needs at least 2 values")
    q1, q3 = np.quantile(values, [0.25, 0.75], method="linear")
    return float(q3 + multiplier * (q3 - q1))


@dataclass
class AnchorTable:
    scores: Dict[int, List[float]] = field(default_factory=dict)

    def add(self, word: int, score: float) -> None:
        if score < 0:
            raise DomainError(f"hijack score must be >= 0, got {score}")
        self.scores.setdefault(int(word), []).append(float(score))

    def mean(self, word: int) -> float:
        return float(np.mean(self.scores[word]))

    def words(self) -> List[int]:
        return sorted(self.scores)

    def __len__(self) -> int:
        return len(self.scores)


def discover_anchors(
    table: AnchorTable,
    all_scores: Sequence[float],
    multiplier: float,
    population: ScorePopulation = "scores",
) -> Tuple[FrozenSet[int], float]:
    """Anchor words whose mean score strictly exceeds the outlier threshold."""
    if population == "anchor_means":
        tau_s = quartile_threshold([table.mean(w) for w in table.words()], multiplier)
    else:
        if len(all_scores) == 0:
            raise DomainError("no scores to threshold")
        tau_s = quartile_threshold(sorted(all_scores), multiplier)
    anchors = frozenset(w for w in table.words() if table.mean(w) > tau_s)
    return anchors, tau_s


def hijacking_ratio(trace: Trace, anchors: Iterable[int]) -> float:
    if len(trace) == 0:
        raise DomainError("cannot take the hijacking ratio of an empty trace")
    anchors = set(anchors)
    return sum(1 for w in trace.words if w in anchors) / len(trace)


def otsu_threshold(values: Iterable[float], bins: int = OTSU_BINS) -> float:
    """
    Otsu split of values in [0, 1] over equal-width bins.

    Returns the upper edge of the last bin of the lower class. Between-class
    variance is compared in exact rational arithmetic on bin counts, so
    plateaus tie exactly and the lowest threshold wins.
    """
    values = np.asarray(list(values), dtype=float)
    if values.size < 2:
        raise DomainError("Otsu threshold needs at least 2 values")
    if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
        raise DomainError("Otsu threshold expects values in [0, 1]")
    hist, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    counts = [int(c) for c in hist]

    # bin centers in units of 1 / (2 bins): center_i = 2i + 1
    total_w = sum(counts)
    total_s = sum(c * (2 * i + 1) for i, c in enumerate(counts))
    best: Optional[Fraction] = None
    best_t = -1
    w0 = s0 = 0
    for t in range(bins - 1):
        w0 += counts[t]
        s0 += counts[t] * (2 * t + 1)
        w1 = total_w - w0
        if w0 == 0 or w1 == 0:
            continue
        s1 = total_s - s0
        between = Fraction((s0 * w1 - s1 * w0) ** 2, w0 * w1)
        if best is None or between > best:
            best, best_t = between, t
    if best is None or best == 0:
        raise DegenerateDistributionError("all values fall in one bin; no between-class variance")
    return (best_t + 1) / bins


def salient_filter(mean_attention: Sequence[float], fraction: float = 0.05) -> FrozenSet[int]:
    """Smallest set of highest-attention positions holding at least fraction of the total mass."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"salient fraction must be in (0, 1], got {fraction}")
    mass = np.asarray(mean_attention, dtype=float)
    if fraction == 1.0:
        return frozenset(range(mass.size))
    if mass.size == 0 or not np.any(mass > 0):
        return frozenset()
    order = sorted(range(mass.size), key=lambda i: (-mass[i], i))
    cumulative = np.cumsum(mass[order])
    count = int(np.searchsorted(cumulative, fraction * cumulative[-1], side="left")) + 1
    return frozenset(order[:count])


class ProfileMeta(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    n_scenes: int
    seed: int
    smoothing: Literal["log1p"] = "log1p"
    schema_tag: str = Field(default=PROFILE_SCHEMA, alias="schema")
    tau_s_population: ScorePopulation = "scores"
    model: Dict[str, int] = Field(default_factory=dict)
    warning: Optional[str] = None

    @field_validator("schema_tag")
    @classmethod
    def _known_schema(cls, value: str) -> str:
        if value != PROFILE_SCHEMA:
            raise ValueError(f"unknown profile schema {value!r}")
        return value


class HijackProfile(BaseModel):
    """Calibration artifact, progressively enriched by head ranking."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    anchors: List[int]
    tau_s: Optional[float] = None
    tau_r: Optional[float] = None
    iqr_multiplier: float = 1.5
    salient_fraction: float = 0.05
    skip_salient_filter: bool = False
    heads: List[Tuple[int, int, float]] = Field(default_factory=list)
    h_target: List[Tuple[int, int]] = Field(default_factory=list)
    k: int = 0
    alpha: float = 0.1
    meta: ProfileMeta

    @field_validator("tau_r")
    @classmethod
    def _tau_r_in_unit(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError("tau_r must be in [0, 1]")
        return value

    @field_validator("anchors")
    @classmethod
    def _anchor_ids(cls, value: List[int]) -> List[int]:
        if any(w < 0 for w in value):
            raise ValueError("anchor ids must be vocabulary ids")
        return value

    @model_validator(mode="after")
    def _target_size(self) -> "HijackProfile":
        if self.h_target and len(self.h_target) != self.k:
            raise ValueError(f"h_target has {len(self.h_target)} heads but k={self.k}")
        return self

    def require_thresholds(self) -> "HijackProfile":
        if self.tau_s is None or self.tau_r is None:
            raise ProfileIncompleteError("profile has no calibrated thresholds; run calibrate first")
        return self

    def require_heads(self) -> "HijackProfile":
        self.require_thresholds()
        if not self.h_target:
            raise ProfileIncompleteError("profile has no target heads; run rank-heads first")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "HijackProfile":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ProfileIncompleteError(f"profile is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ProfileIncompleteError("profile must be a JSON object")
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ProfileIncompleteError(f"profile rejected: {e}") from e


@dataclass(frozen=True)
class CalibrationKnobs:
    iqr_multiplier: float = 1.5
    salient_fraction: float = 0.05
    skip_salient_filter: bool = False
    tau_s_population: ScorePopulation = "scores"
    n_steps: int = 10
    max_new: int = 10
    k: int = 8
    alpha: float = 0.1
    seed: int = 0

    def validate(self) -> "CalibrationKnobs":
        if self.iqr_multiplier < 0:
            raise ConfigurationError("iqr_multiplier must be >= 0")
        if not 0.0 < self.salient_fraction <= 1.0:
            raise ConfigurationError("salient_fraction must be in (0, 1]")
        if self.n_steps < 1 or self.max_new < 1:
            raise ConfigurationError("n_steps and max_new must be >= 1")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        return self


@dataclass(frozen=True)
class SceneObservation:
    scene_id: str
    traces: List[Trace]
    anchors: List[AnchorResult]
    attention: np.ndarray       # raw mean attention per vision position
    tokens: List[int]


@dataclass
class CalibrationRun:
    profile: HijackProfile
    scores: List[float]
    ratios: List[float]
    table: AnchorTable
    observations: List[SceneObservation]


def observe_scene(scene: ToyScene, model: ToyTransformer, knobs: CalibrationKnobs) -> SceneObservation:
    seq = scene.sequence(default_prompt(model.config))
    tokens, captures = generate_greedy(model, seq, max_new=knobs.max_new)
    traces = decode_all_traces(captures[0], model)
    logger.debug(f"Observed {scene.scene_id}: tokens={tokens}")
    return SceneObservation(
        scene_id=scene.scene_id,
        traces=traces,
        anchors=[trace_anchor(t) for t in traces],
        attention=vision_attention(captures, knobs.n_steps),
        tokens=tokens,
    )


def calibrate_with_stats(
    scenes: Sequence[ToyScene],
    model: ToyTransformer,
    knobs: CalibrationKnobs,
    workers: Optional[int] = None,
) -> CalibrationRun:
    if not scenes:
        raise DomainError("calibration needs at least one scene")
    knobs.validate()
    observations = map_ordered(lambda s: observe_scene(s, model, knobs), list(scenes), workers)

    anchor_counts = Counter(a.word for obs in observations for a in obs.anchors)
    table = AnchorTable()
    scores: List[float] = []
    for obs in observations:
        for anchor, raw in zip(obs.anchors, obs.attention):
            score = hijack_score(HijackComponents.from_raw(anchor.dominance, anchor_counts[anchor.word], raw))
            table.add(anchor.word, score)
            scores.append(score)
    scores.sort()
    anchors, tau_s = discover_anchors(table, scores, knobs.iqr_multiplier, knobs.tau_s_population)

    ratios: List[float] = []
    for obs in observations:
        if knobs.skip_salient_filter:
            positions = range(len(obs.traces))
        else:
            positions = sorted(salient_filter(obs.attention, knobs.salient_fraction))
        ratios.extend(hijacking_ratio(obs.traces[p], anchors) for p in positions)

    warning = None
    try:
        if len(ratios) < 2:
            raise DegenerateDistributionError("fewer than 2 salient tokens")
        tau_r = otsu_threshold(ratios)
    except DegenerateDistributionError as e:
        logger.warning(f"Otsu split unavailable ({e}); no inert tokens will be identified")
        tau_r, warning = 1.0, DEGENERATE_OTSU

    profile = HijackProfile(
        anchors=sorted(anchors),
        tau_s=tau_s,
        tau_r=tau_r,
        iqr_multiplier=knobs.iqr_multiplier,
        salient_fraction=knobs.salient_fraction,
        skip_salient_filter=knobs.skip_salient_filter,
        k=knobs.k,
        alpha=knobs.alpha,
        meta=ProfileMeta(
            n_scenes=len(scenes),
            seed=knobs.seed,
            tau_s_population=knobs.tau_s_population,
            model=model.config.to_dict(),
            warning=warning,
        ),
    )
    logger.info(f"Calibrated profile: {len(anchors)} anchors, tau_s={tau_s:.4f}, tau_r={tau_r:.4f}")
    return CalibrationRun(profile=profile, scores=scores, ratios=ratios, table=table, observations=observations)


def calibrate(
    scenes: Sequence[ToyScene],
    model: ToyTransformer,
    knobs: CalibrationKnobs,
    workers: Optional[int] = None,
) -> HijackProfile:
    return calibrate_with_stats(scenes, model, knobs, workers).profile


def identify_inert(
    captures: Union[ForwardCapture, Sequence[ForwardCapture]],
    model,
    profile: HijackProfile,
) -> FrozenSet[int]:
    """Vision positions whose trace ratio over the hijacking anchors exceeds tau_r."""
    profile.require_thresholds()
    capture = captures if isinstance(captures, ForwardCapture) else captures[0]
    anchors = set(profile.anchors)
    if not anchors:
        return frozenset()
    return frozenset(
        t.position for t in decode_all_traces(capture, model) if hijacking_ratio(t, anchors) > profile.tau_r
    )


HISTOGRAM_HEADER = ["bin_left", "bin_right", "count", "population"]


def histogram_rows(
    values: Sequence[float],
    population: str,
    bins: int = OTSU_BINS,
    value_range: Optional[Tuple[float, float]] = None,
) -> List[list]:
    if len(values) == 0:
        return []
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=value_range)
    return [[float(edges[i]), float(edges[i + 1]), int(c), population] for i, c in enumerate(counts)]
