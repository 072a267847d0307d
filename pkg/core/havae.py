"""
Inference-time attention interventions packaged as forward hooks.

enhance      add alpha x the layer's mean |attention| to vision keys of target heads
penalize     damp inert vision keys of target heads by (1 - beta)
zero_ablate  hide a key set from every other row on every head, then renormalize
compose      penalize, then enhance
"""
from dataclasses import dataclass, replace
from typing import Callable, FrozenSet, Iterable, Optional, Tuple

import numpy as np
from typing_extensions import Literal

from core.errors import ConfigurationError, DegenerateDistributionError, DomainError, ProfileIncompleteError
from core.habi import HijackProfile
from core.head_metrics import HeadId, target_heads
from core.toy_lvlm import AttentionHook, ModelConfig, SegmentedSequence

Mode = Literal["enhance", "penalize", "zero_ablate", "compose"]
MODES = ("enhance", "penalize", "zero_ablate", "compose")


@dataclass(frozen=True)
class InterventionSpec:
    h_target: FrozenSet[HeadId] = frozenset()
    alpha: float = 0.1
    beta: float = 0.0
    inert: FrozenSet[int] = frozenset()
    renormalize: bool = False
    mode: Mode = "enhance"

    def validate(self, config: Optional[ModelConfig] = None) -> "InterventionSpec":
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta must be in [0, 1], got {self.beta}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown intervention mode {self.mode!r}")
        if config is not None:
            for head in self.h_target:
                head.validate(config)
        return self

    def with_inert(self, inert: Iterable[int]) -> "InterventionSpec":
        return replace(self, inert=frozenset(int(p) for p in inert))

    def layer_heads(self, layer: int) -> Tuple[int, ...]:
        """0-based head indices targeted in a 1-based layer."""
        return tuple(sorted(h.head - 1 for h in self.h_target if h.layer == layer))


def _query(A: np.ndarray, query: Optional[int]) -> int:
    return A.shape[-1] - 1 if query is None else query


def enhance_attention(
    A: np.ndarray,
    layer: int,
    spec: InterventionSpec,
    vision_span: Tuple[int, int],
    query: Optional[int] = None,
) -> np.ndarray:
    """Reinforce the current query's vision attention on the target heads of this layer."""
    spec.validate()
    out = np.array(A, dtype=float, copy=True)
    heads = spec.layer_heads(layer)
    if not heads:
        return out
    q = _query(A, query)
    v0, v1 = vision_span
    boost = spec.alpha * np.abs(A[:, q, v0:v1]).mean(axis=0)
    for h in heads:
        out[h, q, v0:v1] = A[h, q, v0:v1] + boost
        if spec.renormalize:
            out[h, q] = out[h, q] / out[h, q].sum()
    return out


def penalize_inert(
    A: np.ndarray,
    layer: int,
    spec: InterventionSpec,
    vision_span: Tuple[int, int],
    query: Optional[int] = None,
) -> np.ndarray:
    spec.validate()
    out = np.array(A, dtype=float, copy=True)
    heads = spec.layer_heads(layer)
    inert = sorted(p for p in spec.inert if vision_span[0] <= p < vision_span[1])
    if not heads or not inert:
        return out
    q = _query(A, query)
    for h in heads:
        out[h, q, inert] = A[h, q, inert] * (1.0 - spec.beta)
    return out


def zero_ablate(A: np.ndarray, tokens: Iterable[int]) -> np.ndarray:
    """
    Hide masked tokens from every other token, on every head.

    Masked keys are zeroed on the unmasked rows from the first masked
    position on, and those rows are renormalized. Rows of masked tokens
    keep their own attention.
    """
    out = np.array(A, dtype=float, copy=True)
    mask = sorted(set(int(t) for t in tokens))
    if not mask:
        return out
    n = A.shape[-1]
    if mask[0] < 0 or mask[-1] >= n:
        raise DomainError(f"masked positions must lie in [0, {n})")
    if len(mask) == n:
        raise DegenerateDistributionError("masking every token leaves no attention support")
    rows = np.setdiff1d(np.arange(mask[0], n), mask)
    if rows.size == 0:
        return out
    block = out[:, rows, :]
    block[..., mask] = 0.0
    sums = block.sum(axis=-1)
    if np.any(sums <= 0):
        raise DegenerateDistributionError("masking removed the entire support of an attention row")
    out[:, rows, :] = block / sums[..., None]
    return out


def build_hook(spec: InterventionSpec, profile: Optional[HijackProfile] = None) -> AttentionHook:
    """
    Hook applying spec's mode at every layer of every decoding step.

    Without explicit target heads the profile's h_target is used; enhance
    and compose need one of the two.
    """
    if profile is not None and not spec.h_target and spec.mode != "zero_ablate":
        spec = replace(spec, h_target=target_heads(profile))
    spec.validate()
    if spec.mode in ("enhance", "compose", "penalize") and not spec.h_target:
        raise ProfileIncompleteError(f"mode {spec.mode!r} needs target heads; run rank-heads first")

    def hook(layer: int, attn: np.ndarray, seq: SegmentedSequence) -> np.ndarray:
        span = seq.vision_span
        if spec.mode == "zero_ablate":
            return zero_ablate(attn, spec.inert)
        if spec.mode == "penalize":
            return penalize_inert(attn, layer, spec, span)
        if spec.mode == "compose":
            attn = penalize_inert(attn, layer, spec, span)
        return enhance_attention(attn, layer, spec, span)

    return hook


def mode_for(alpha: float, beta: float) -> Mode:
    """Mode implied by a pair of CLI knobs."""
    if beta > 0 and alpha > 0:
        return "compose"
    if beta > 0:
        return "penalize"
    return "enhance"
