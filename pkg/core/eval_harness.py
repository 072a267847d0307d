"""
Baseline-versus-intervention experiment battery on toy scenes.
"""
import json
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from core.errors import DomainError, InputError
from core.habi import HijackProfile, identify_inert
from core.havae import InterventionSpec, build_hook, zero_ablate
from core.head_metrics import HeadId, all_heads, label_step, persistent_set, step_head_stats, target_heads
from core.toy_lvlm import ForwardCapture, ToyScene, ToyTransformer, default_prompt, generate_greedy, substream
from utils.logger import setup_logger
from utils.parallel import map_ordered

logger = setup_logger(__name__)

SCENE_HEADER = ["scene_id", "condition", "chair_hit", "inert_share", "nhar_mean"]
STEP_HEADER = ["scene_id", "condition", "step", "token", "label", "har", "nhar"]


def object_mentions(tokens: Iterable[int], object_ids: Optional[range] = None) -> FrozenSet[int]:
    """Deduplicated object tokens of one caption."""
    return frozenset(int(t) for t in tokens if object_ids is None or t in object_ids)


def _same_ids(a: Mapping, b: Mapping, what: str) -> List[str]:
    if set(a) != set(b):
        raise InputError(f"{what}: scene ids differ ({len(set(a) ^ set(b))} unmatched)")
    return sorted(a)


def toy_chair(
    generated: Mapping[str, Iterable[int]],
    true_objects: Mapping[str, Iterable[int]],
    object_ids: Optional[range] = None,
) -> Tuple[float, float]:
    """(CHAIR_S, CHAIR_I) with mentions deduplicated per scene."""
    ids = _same_ids(generated, true_objects, "toy_chair")
    if not ids:
        raise DomainError("toy_chair needs at least one scene")
    mentions = hallucinated = dirty = 0
    for scene_id in ids:
        said = object_mentions(generated[scene_id], object_ids)
        wrong = said - set(true_objects[scene_id])
        mentions += len(said)
        hallucinated += len(wrong)
        dirty += bool(wrong)
    chair_i = hallucinated / mentions if mentions else 0.0
    return dirty / len(ids), chair_i


class IdentifierScores(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    accuracy: Optional[float] = None
    true_positive: int
    identified: int
    reference: int
    precision_excluded: int
    recall_excluded: int


def compare_identifiers(
    habi: Mapping[str, Iterable[int]],
    persist: Mapping[str, Iterable[int]],
    n_vision: Optional[int] = None,
) -> IdentifierScores:
    """Micro-averaged agreement of identified inert sets with persistent sets."""
    ids = _same_ids(habi, persist, "compare_identifiers")
    tp = identified = reference = 0
    precision_excluded = recall_excluded = 0
    for scene_id in ids:
        h, g = set(habi[scene_id]), set(persist[scene_id])
        tp += len(h & g)
        identified += len(h)
        reference += len(g)
        precision_excluded += not h
        recall_excluded += not g
    precision = tp / identified if identified else None
    recall = tp / reference if reference else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    accuracy = None
    if n_vision and ids:
        total = n_vision * len(ids)
        accuracy = (total - (identified - tp) - (reference - tp)) / total
    return IdentifierScores(
        precision=precision, recall=recall, f1=f1, accuracy=accuracy,
        true_positive=tp, identified=identified, reference=reference,
        precision_excluded=precision_excluded, recall_excluded=recall_excluded,
    )


def inert_share(captures: Sequence[ForwardCapture], inert: Iterable[int]) -> float:
    """Inert share of vision attention at the query, pooled over heads, averaged over layers and steps."""
    if not captures:
        raise DomainError("no steps captured")
    inert = list(inert)
    shares = []
    for capture in captures:
        v0, v1 = capture.seq.vision_span
        rows = capture.query_rows()[:, :, v0:v1]
        idx = sorted(p - v0 for p in inert if v0 <= p < v1)
        vision = rows.sum(axis=(1, 2))
        shares.append(rows[:, :, idx].sum(axis=(1, 2)) / vision)
    return float(np.mean(shares))


def background_rate(
    habi: Mapping[str, Iterable[int]],
    scenes: Sequence[ToyScene],
) -> Tuple[Optional[float], float]:
    """Share of identified tokens on scene background, and the share a random pick would get."""
    by_id = {s.scene_id: s for s in scenes}
    ids = _same_ids(habi, by_id, "background_rate")
    hits = total = 0
    for scene_id in ids:
        found = set(habi[scene_id])
        hits += len(found & by_id[scene_id].background)
        total += len(found)
    random = float(np.mean([len(by_id[i].background) / by_id[i].n_vision for i in ids]))
    return (hits / total if total else None), random


@dataclass
class SceneRun:
    scene_id: str
    true_objects: FrozenSet[int]
    inert: FrozenSet[int]
    baseline_tokens: List[int]
    intervened_tokens: List[int]
    baseline_share: float
    intervened_share: float
    baseline_nhar: float
    intervened_nhar: float
    object_ids: range = range(0)
    persist: Optional[FrozenSet[int]] = None
    har_real: List[float] = field(default_factory=list)
    har_hal: List[float] = field(default_factory=list)
    step_rows: List[list] = field(default_factory=list)


class ConditionSummary(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    chair_s: float
    chair_i: float
    inert_share: float
    nhar_mean: float


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_scenes: int
    baseline: ConditionSummary
    intervened: ConditionSummary
    share_reduced_fraction: float
    habi_vs_persist: Optional[IdentifierScores] = None
    background_rate: Optional[float] = None
    background_rate_random: float
    har_real_mean: Optional[float] = None
    har_hal_mean: Optional[float] = None
    config: Dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            return cls.model_validate(json.loads(text))
        except (json.JSONDecodeError, ValidationError) as e:
            raise InputError(f"unreadable eval report: {e}") from e


@dataclass
class EvalResult:
    report: EvalReport
    runs: List[SceneRun]

    def scene_rows(self) -> List[list]:
        rows = []
        for run in self.runs:
            for condition, tokens, share, nhar_mean in (
                ("baseline", run.baseline_tokens, run.baseline_share, run.baseline_nhar),
                ("intervened", run.intervened_tokens, run.intervened_share, run.intervened_nhar),
            ):
                hit = int(bool(object_mentions(tokens, run.object_ids) - run.true_objects))
                rows.append([run.scene_id, condition, hit, share, nhar_mean])
        return rows

    def step_rows(self) -> List[list]:
        return [row for run in self.runs for row in run.step_rows]


def _head_summary(captures: Sequence[ForwardCapture], inert: FrozenSet[int], heads: Sequence[HeadId]):
    """Per-step (NHAR, HAR) averaged over heads."""
    index = tuple(zip(*[h.index for h in heads]))
    out = []
    for capture in captures:
        nhar_values, har_values = step_head_stats(capture, inert)
        out.append((float(nhar_values[index].mean()), float(np.nanmean(har_values[index]))))
    return out


def run_scene(
    scene: ToyScene,
    model: ToyTransformer,
    profile: HijackProfile,
    spec: InterventionSpec,
    max_new: int = 10,
    compare_persist: bool = False,
    t: int = 5,
    k_top: int = 10,
) -> SceneRun:
    cfg = model.config
    seq = scene.sequence(default_prompt(cfg))
    base_tokens, base_caps = generate_greedy(model, seq, max_new)
    inert = identify_inert(base_caps, model, profile)
    scene_spec = spec.with_inert(inert)
    hook = build_hook(scene_spec, profile)
    int_tokens, int_caps = generate_greedy(model, seq, max_new, hook)

    every_head = all_heads(cfg.n_layers, cfg.n_heads)
    heads = sorted(scene_spec.h_target or target_heads(profile)) or every_head
    base_heads = _head_summary(base_caps, inert, heads)
    int_heads = _head_summary(int_caps, inert, heads)

    run = SceneRun(
        scene_id=scene.scene_id,
        true_objects=scene.true_objects,
        inert=inert,
        baseline_tokens=base_tokens,
        intervened_tokens=int_tokens,
        baseline_share=inert_share(base_caps, inert),
        intervened_share=inert_share(int_caps, inert),
        baseline_nhar=float(np.mean([s[0] for s in base_heads])),
        intervened_nhar=float(np.mean([s[0] for s in int_heads])),
        object_ids=cfg.object_ids,
        persist=persistent_set(base_caps, t, k_top) if compare_persist else None,
    )
    for condition, tokens, summary in (("baseline", base_tokens, base_heads), ("intervened", int_tokens, int_heads)):
        for step, (token, (nhar_mean, har_mean)) in enumerate(zip(tokens, summary), start=1):
            label = label_step(token, scene.true_objects, cfg.object_ids)
            run.step_rows.append([scene.scene_id, condition, step, token, label, har_mean, nhar_mean])

    for token, (_, har_mean) in zip(base_tokens, _head_summary(base_caps, inert, every_head)):
        label = label_step(token, scene.true_objects, cfg.object_ids)
        if label == "real":
            run.har_real.append(har_mean)
        elif label == "hal":
            run.har_hal.append(har_mean)
    logger.debug(f"{scene.scene_id}: inert={sorted(inert)} baseline={base_tokens} intervened={int_tokens}")
    return run


def _mean_or_none(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def run_ab(
    scenes: Sequence[ToyScene],
    model: ToyTransformer,
    profile: HijackProfile,
    spec: InterventionSpec,
    max_new: int = 10,
    compare_persist: bool = False,
    t: int = 5,
    k_top: int = 10,
    workers: Optional[int] = None,
) -> EvalResult:
    """Baseline and intervened generation on the same scenes, summarized into one report."""
    if not scenes:
        raise DomainError("evaluation needs at least one scene")
    profile.require_thresholds()
    spec.validate(model.config)
    runs = map_ordered(
        lambda s: run_scene(s, model, profile, spec, max_new, compare_persist, t, k_top),
        list(scenes),
        workers,
    )
    runs.sort(key=lambda r: r.scene_id)

    objects = model.config.object_ids
    truth = {r.scene_id: r.true_objects for r in runs}
    conditions = {}
    for name, attr, share, nhar_attr in (
        ("baseline", "baseline_tokens", "baseline_share", "baseline_nhar"),
        ("intervened", "intervened_tokens", "intervened_share", "intervened_nhar"),
    ):
        chair_s, chair_i = toy_chair({r.scene_id: getattr(r, attr) for r in runs}, truth, objects)
        conditions[name] = ConditionSummary(
            chair_s=chair_s,
            chair_i=chair_i,
            inert_share=float(np.mean([getattr(r, share) for r in runs])),
            nhar_mean=float(np.mean([getattr(r, nhar_attr) for r in runs])),
        )

    habi = {r.scene_id: r.inert for r in runs}
    comparison = None
    if compare_persist:
        comparison = compare_identifiers(habi, {r.scene_id: r.persist for r in runs}, model.config.n_vision)
    bg_rate, bg_random = background_rate(habi, scenes)

    report = EvalReport(
        n_scenes=len(runs),
        baseline=conditions["baseline"],
        intervened=conditions["intervened"],
        share_reduced_fraction=float(np.mean([r.intervened_share < r.baseline_share for r in runs])),
        habi_vs_persist=comparison,
        background_rate=bg_rate,
        background_rate_random=bg_random,
        har_real_mean=_mean_or_none([v for r in runs for v in r.har_real]),
        har_hal_mean=_mean_or_none([v for r in runs for v in r.har_hal]),
        config={
            "mode": spec.mode,
            "alpha": spec.alpha,
            "beta": spec.beta,
            "renormalize": spec.renormalize,
            "k": len(spec.h_target) or profile.k,
            "max_new": max_new,
            "compare_persist": compare_persist,
            "t": t,
            "k_top": k_top,
        },
    )
    logger.info(
        f"Evaluated {len(runs)} scenes: CHAIR_S {report.baseline.chair_s:.3f} -> {report.intervened.chair_s:.3f}, "
        f"inert share {report.baseline.inert_share:.4f} -> {report.intervened.inert_share:.4f}"
    )
    return EvalResult(report=report, runs=runs)


@dataclass
class ZeroAblationResult:
    scene_ids: List[str]
    inert_unchanged: List[bool]
    random_unchanged: List[bool]

    @property
    def inert_unchanged_fraction(self) -> float:
        return float(np.mean(self.inert_unchanged))

    @property
    def random_changed(self) -> int:
        return sum(not u for u in self.random_unchanged)

    @property
    def inert_changed(self) -> int:
        return sum(not u for u in self.inert_unchanged)


def zero_ablation_study(
    scenes: Sequence[ToyScene],
    model: ToyTransformer,
    profile: HijackProfile,
    seed: int,
    max_new: int = 10,
) -> ZeroAblationResult:
    """Greedy output stability when masking identified inert tokens vs an equal-sized random set."""
    result = ZeroAblationResult([], [], [])
    for index, scene in enumerate(scenes):
        seq = scene.sequence(default_prompt(model.config))
        baseline, captures = generate_greedy(model, seq, max_new)
        inert = sorted(identify_inert(captures, model, profile))
        others = [p for p in range(scene.n_vision) if p not in inert]
        rng = substream(seed, "noise", index)
        random_set = sorted(rng.choice(others, size=min(len(inert), len(others)), replace=False).tolist()) if inert else []

        def _masked(tokens: List[int]):
            return lambda layer, attn, s: zero_ablate(attn, tokens)

        inert_tokens, _ = generate_greedy(model, seq, max_new, _masked(inert))
        random_tokens, _ = generate_greedy(model, seq, max_new, _masked(random_set))
        result.scene_ids.append(scene.scene_id)
        result.inert_unchanged.append(inert_tokens == baseline)
        result.random_unchanged.append(random_tokens == baseline)
    logger.info(
        f"Zero ablation over {len(scenes)} scenes: inert changed {result.inert_changed}, "
        f"random changed {result.random_changed}"
    )
    return result
