"""
Per-head attention diagnostics and head selection.

HAR is the share of a head's vision attention that lands on inert tokens;
NHAR is the raw attention mass on non-inert vision tokens. Heads are ranked
by mean NHAR over real-object generation steps.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Literal

from core.errors import ConfigurationError, DomainError, NumericError
from core.habi import HijackProfile, identify_inert
from core.toy_lvlm import ForwardCapture, ModelConfig, ToyScene, ToyTransformer, default_prompt, generate_greedy
from utils.logger import setup_logger
from utils.parallel import map_ordered

logger = setup_logger(__name__)

Criterion = Literal["nhar", "total_attention"]
StepLabel = Literal["real", "hal", "other"]

HEAD_HEADER = ["layer", "head", "mean_nhar", "total_visual_attention", "har_real_mean", "har_hal_mean"]


@dataclass(frozen=True, order=True)
class HeadId:
    """1-based (layer, head) coordinates."""

    layer: int
    head: int

    @property
    def index(self) -> Tuple[int, int]:
        return self.layer - 1, self.head - 1

    def validate(self, config: ModelConfig) -> "HeadId":
        if not (1 <= self.layer <= config.n_layers and 1 <= self.head <= config.n_heads):
            raise ConfigurationError(f"head {self} outside a {config.n_layers}x{config.n_heads} model")
        return self


def all_heads(n_layers: int, n_heads: int) -> List[HeadId]:
    return [HeadId(l, h) for l in range(1, n_layers + 1) for h in range(1, n_heads + 1)]


def _query_row(capture: ForwardCapture, head: HeadId) -> np.ndarray:
    layer, h = head.index
    return capture.attn[layer, h, capture.query]


def _span(capture: ForwardCapture, vision_span: Optional[Tuple[int, int]]) -> Tuple[int, int]:
    return vision_span if vision_span is not None else capture.seq.vision_span


def _inert_in_span(inert: Iterable[int], span: Tuple[int, int]) -> List[int]:
    return sorted(p for p in inert if span[0] <= p < span[1])


def har(capture: ForwardCapture, head: HeadId, inert: Iterable[int], vision_span: Optional[Tuple[int, int]] = None) -> float:
    span = _span(capture, vision_span)
    row = _query_row(capture, head)
    total = row[span[0]:span[1]].sum()
    if total <= 0:
        raise NumericError(f"head {head} puts no attention on vision tokens; HAR undefined")
    return float(row[_inert_in_span(inert, span)].sum() / total)


def nhar(capture: ForwardCapture, head: HeadId, inert: Iterable[int], vision_span: Optional[Tuple[int, int]] = None) -> float:
    span = _span(capture, vision_span)
    row = _query_row(capture, head)
    keep = np.ones(span[1] - span[0], dtype=bool)
    keep[[p - span[0] for p in _inert_in_span(inert, span)]] = False
    return float(row[span[0]:span[1]][keep].sum())


def nhar_normalized(capture: ForwardCapture, head: HeadId, inert: Iterable[int], vision_span: Optional[Tuple[int, int]] = None) -> float:
    """NHAR divided by the head's total context attention."""
    return nhar(capture, head, inert, vision_span) / float(_query_row(capture, head).sum())


def total_visual_attention(captures: Sequence[ForwardCapture], head: HeadId) -> float:
    if not captures:
        raise DomainError("no steps captured")
    return float(sum(_query_row(c, head)[c.seq.vision_span[0]:c.seq.vision_span[1]].sum() for c in captures))


def mean_nhar(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise DomainError("no qualifying generation steps for mean NHAR")
    return float(np.mean(values))


def label_step(token: int, true_objects: Iterable[int], object_ids: range) -> StepLabel:
    if token in set(true_objects):
        return "real"
    if token in object_ids:
        return "hal"
    return "other"


def step_head_stats(capture: ForwardCapture, inert: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
    """(NHAR, HAR) for every head at one step, each (L, H); HAR is NaN where vision mass is 0."""
    v0, v1 = capture.seq.vision_span
    rows = capture.query_rows()[:, :, v0:v1]
    vision_mass = rows.sum(axis=-1)
    inert_idx = [p - v0 for p in _inert_in_span(inert, (v0, v1))]
    inert_mass = rows[:, :, inert_idx].sum(axis=-1)
    keep = np.ones(v1 - v0, dtype=bool)
    keep[inert_idx] = False
    nhar_values = rows[:, :, keep].sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        har_values = np.where(vision_mass > 0, inert_mass / vision_mass, np.nan)
    return nhar_values, har_values


@dataclass(frozen=True)
class HeadScore:
    mean_nhar: float
    total_visual_attention: float
    har_real_mean: Optional[float] = None
    har_hal_mean: Optional[float] = None


@dataclass
class HeadScoreTable:
    scores: Dict[HeadId, HeadScore] = field(default_factory=dict)
    n_real_steps: int = 0
    n_hal_steps: int = 0

    def __len__(self) -> int:
        return len(self.scores)

    def heads(self) -> List[HeadId]:
        return sorted(self.scores)

    def preselect(self, fraction: float = 0.25) -> List[HeadId]:
        """Heads with the highest total visual attention, at least one."""
        count = max(1, int(round(fraction * len(self.scores))))
        return select_heads(self, count, criterion="total_attention")

    def har_separation(self, fraction: float = 0.25) -> Tuple[Optional[float], Optional[float]]:
        """Mean HAR on real and on hallucinated steps over the pre-selected heads."""
        heads = self.preselect(fraction)
        real = [self.scores[h].har_real_mean for h in heads if self.scores[h].har_real_mean is not None]
        hal = [self.scores[h].har_hal_mean for h in heads if self.scores[h].har_hal_mean is not None]
        return (float(np.mean(real)) if real else None, float(np.mean(hal)) if hal else None)

    def rows(self) -> List[list]:
        out = []
        for head in self.heads():
            s = self.scores[head]
            out.append([head.layer, head.head, s.mean_nhar, s.total_visual_attention, s.har_real_mean, s.har_hal_mean])
        return out


def select_heads(table: HeadScoreTable, k: int, criterion: Criterion = "nhar") -> List[HeadId]:
    """Top-k heads; ties go to the lower (layer, head)."""
    if not 1 <= k <= len(table):
        raise ConfigurationError(f"K must be in [1, {len(table)}], got {k}")
    if criterion == "nhar":
        key = lambda h: (-table.scores[h].mean_nhar, h.layer, h.head)
    elif criterion == "total_attention":
        key = lambda h: (-table.scores[h].total_visual_attention, h.layer, h.head)
    else:
        raise ConfigurationError(f"unknown head criterion {criterion!r}")
    return sorted(table.scores, key=key)[:k]


def persistent_set(captures: Sequence[ForwardCapture], t: int = 5, k_top: int = 10) -> FrozenSet[int]:
    """Vision positions in the top-k_top of every one of the first t steps."""
    if t < 1 or k_top < 1:
        raise ConfigurationError("T and K_top must be >= 1")
    if len(captures) < t:
        raise DomainError(f"persistent set needs {t} steps, got {len(captures)}")
    result = None
    for capture in captures[:t]:
        v0, v1 = capture.seq.vision_span
        mean = capture.query_rows()[:, :, v0:v1].mean(axis=(0, 1))
        top = sorted(range(v1 - v0), key=lambda i: (-mean[i], i))[:k_top]
        step = {v0 + i for i in top}
        result = step if result is None else result & step
    return frozenset(result)


@dataclass
class SceneHeadStats:
    scene_id: str
    tokens: List[int]
    inert: FrozenSet[int]
    labels: List[StepLabel]
    nhar: np.ndarray            # (steps, L, H)
    har: np.ndarray             # (steps, L, H)
    visual_mass: np.ndarray     # (steps, L, H)


def scene_head_stats(scene: ToyScene, model: ToyTransformer, profile: HijackProfile, max_new: int = 10) -> SceneHeadStats:
    seq = scene.sequence(default_prompt(model.config))
    tokens, captures = generate_greedy(model, seq, max_new=max_new)
    inert = identify_inert(captures, model, profile)
    labels = [label_step(tok, scene.true_objects, model.config.object_ids) for tok in tokens]
    per_step = [step_head_stats(c, inert) for c in captures]
    visual = [c.query_rows()[:, :, c.seq.vision_span[0]:c.seq.vision_span[1]].sum(axis=-1) for c in captures]
    return SceneHeadStats(
        scene_id=scene.scene_id,
        tokens=tokens,
        inert=inert,
        labels=labels,
        nhar=np.stack([p[0] for p in per_step]),
        har=np.stack([p[1] for p in per_step]),
        visual_mass=np.stack(visual),
    )


def build_score_table(stats: Sequence[SceneHeadStats], config: ModelConfig, no_gt: bool = False) -> HeadScoreTable:
    """Merge per-scene statistics in scene-id order."""
    stats = sorted(stats, key=lambda s: s.scene_id)
    qualifying = ("real", "hal") if no_gt else ("real",)
    nhar_steps = [s.nhar[i] for s in stats for i, lab in enumerate(s.labels) if lab in qualifying]
    har_real = [s.har[i] for s in stats for i, lab in enumerate(s.labels) if lab == "real"]
    har_hal = [s.har[i] for s in stats for i, lab in enumerate(s.labels) if lab == "hal"]
    if not nhar_steps:
        mode = "object" if no_gt else "real-object"
        raise DomainError(f"no {mode} generation steps across {len(stats)} scenes")
    nhar_steps = np.stack(nhar_steps)
    visual_total = np.sum([s.visual_mass.sum(axis=0) for s in stats], axis=0)

    def _har_mean(values: List[np.ndarray], layer: int, head: int) -> Optional[float]:
        column = np.array([v[layer, head] for v in values])
        column = column[~np.isnan(column)]
        return float(column.mean()) if column.size else None

    table = HeadScoreTable(n_real_steps=len(har_real), n_hal_steps=len(har_hal))
    for head in all_heads(config.n_layers, config.n_heads):
        l, h = head.index
        table.scores[head] = HeadScore(
            mean_nhar=mean_nhar(nhar_steps[:, l, h]),
            total_visual_attention=float(visual_total[l, h]),
            har_real_mean=_har_mean(har_real, l, h),
            har_hal_mean=_har_mean(har_hal, l, h),
        )
    return table


def rank_heads(
    scenes: Sequence[ToyScene],
    model: ToyTransformer,
    profile: HijackProfile,
    k: int,
    no_gt: bool = False,
    criterion: Criterion = "nhar",
    max_new: int = 10,
    alpha: Optional[float] = None,
    workers: Optional[int] = None,
) -> Tuple[HijackProfile, HeadScoreTable]:
    """Fill the profile's head table and target heads."""
    profile.require_thresholds()
    if not scenes:
        raise DomainError("head ranking needs at least one scene")
    if not 1 <= k <= model.config.n_total_heads:
        raise ConfigurationError(f"K={k} exceeds the {model.config.n_total_heads} heads of the model")
    stats = map_ordered(lambda s: scene_head_stats(s, model, profile, max_new), list(scenes), workers)
    table = build_score_table(stats, model.config, no_gt=no_gt)
    targets = select_heads(table, k, criterion)
    updated = HijackProfile.model_validate({
        **profile.model_dump(by_alias=True),
        "heads": [(h.layer, h.head, table.scores[h].mean_nhar) for h in table.heads()],
        "h_target": [(h.layer, h.head) for h in sorted(targets)],
        "k": k,
        "alpha": profile.alpha if alpha is None else alpha,
    })
    logger.info(
        f"Ranked {len(table)} heads over {table.n_real_steps} real / {table.n_hal_steps} hallucinated steps; "
        f"targets={[(h.layer, h.head) for h in sorted(targets)]}"
    )
    return updated, table


def target_heads(profile: HijackProfile) -> FrozenSet[HeadId]:
    return frozenset(HeadId(layer, head) for layer, head in profile.h_target)
