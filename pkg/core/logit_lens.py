"""
Logit lens over vision hidden states: layer-wise decoded words (traces)
and their anchors.
"""
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from typing_extensions import Protocol

from core.errors import DomainError, NumericError
from core.toy_lvlm import ForwardCapture


class LensModel(Protocol):
    unembed: np.ndarray


@dataclass(frozen=True)
class Trace:
    position: int
    words: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class AnchorResult:
    word: int
    dominance: float


def _logits(hidden: np.ndarray, model: LensModel) -> np.ndarray:
    hidden = np.asarray(hidden, dtype=float)
    if not np.all(np.isfinite(hidden)):
        raise NumericError("non-finite hidden state passed to the logit lens")
    return model.unembed @ hidden


def lens_distribution(hidden: np.ndarray, model: LensModel) -> np.ndarray:
    """softmax(W_unembed . h) as a probability vector over the vocabulary."""
    logits = _logits(hidden, model)
    logits = logits - logits.max()
    probs = np.exp(logits)
    return probs / probs.sum()


def _check_vision(capture: ForwardCapture, position: int) -> None:
    if position not in capture.seq.vision_positions:
        raise DomainError(f"position {position} is outside the vision span {capture.seq.vision_span}")


def decode_trace(capture: ForwardCapture, vision_pos: int, model: LensModel) -> Trace:
    """Argmax word at layers 1..L for one vision position; ties go to the smallest id."""
    _check_vision(capture, vision_pos)
    words = []
    for layer in range(1, capture.hidden.shape[0]):
        words.append(int(np.argmax(_logits(capture.hidden[layer, vision_pos], model))))
    return Trace(position=vision_pos, words=tuple(words))


def decode_all_traces(capture: ForwardCapture, model: LensModel) -> List[Trace]:
    """Traces for every vision position, vectorized over layers and positions."""
    v0, v1 = capture.seq.vision_span
    states = capture.hidden[1:, v0:v1]
    if not np.all(np.isfinite(states)):
        raise NumericError("non-finite hidden state passed to the logit lens")
    words = np.argmax(states @ model.unembed.T, axis=-1)  # (L, n_vision)
    return [Trace(position=v0 + i, words=tuple(int(w) for w in words[:, i])) for i in range(v1 - v0)]


def trace_anchor(trace: Trace) -> AnchorResult:
    if len(trace) == 0:
        raise DomainError("cannot take the anchor of an empty trace")
    counts = Counter(trace.words)
    top = max(counts.values())
    word = min(w for w, c in counts.items() if c == top)
    return AnchorResult(word=word, dominance=top / len(trace))


def trace_rows(scene_id: str, traces: Iterable[Trace]) -> List[Sequence]:
    """Rows for the scene_id,vision_pos,layer,word_id dump."""
    rows = []
    for trace in traces:
        for layer, word in enumerate(trace.words, start=1):
            rows.append([scene_id, trace.position, layer, word])
    return rows


TRACE_HEADER = ["scene_id", "vision_pos", "layer", "word_id"]
