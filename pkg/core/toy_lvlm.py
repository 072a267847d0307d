"""
Deterministic toy decoder-only multimodal transformer.

Attention-only residual stack (no MLP, no layer norm) with full capture of
hidden states and attention, greedy decoding with an attention-hook seam,
and fixture generators that plant inert vision tokens with known ground truth.

Residual layout (see ResidualLayout):
    channel 0   bias, 1.0 on every token; heads read it into query slot 0
    channel 1   sink key; heads read it into key slot 0. Positions carrying
                it are value-null and take no residual writes
    channel 2   visual marker, 1.0 on vision positions
    text        embeddings of vocabulary ids and position embeddings
    filler      unembedding rows of filler words (anchor candidates)
    object      unembedding rows of function and object words
"""
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import CapacityError, ConfigurationError, DomainError, FixtureValidationError, NumericError
from utils.logger import setup_logger

logger = setup_logger(__name__)

CH_BIAS = 0
CH_SINK = 1
CH_VISUAL = 2
N_RESERVED = 3

# Weight scales; pre-softmax logits stay O(1)
POSITION_SCALE = 0.3
CONTENT_QK_SCALE = 0.6
TEXT_QK_SCALE = 0.3
OV_GAIN = 1.0
OV_NOISE = 0.02
PRIOR_SCALE = 1.0
SINK_DAMPING = 0.15
SINK_GAIN_RANGE = (0.5, 1.5)

_STREAMS = {"weights": 0, "scenes": 1, "noise": 2}

AttentionHook = Callable[[int, np.ndarray, "SegmentedSequence"], np.ndarray]


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named, independent random stream derived from one seed."""
    return np.random.default_rng([int(seed), _STREAMS[name], *[int(e) for e in extra]])


@dataclass(frozen=True)
class ResidualLayout:
    text: slice
    filler: slice
    object: slice

    @property
    def n_text(self) -> int:
        return self.text.stop - self.text.start

    @property
    def n_filler(self) -> int:
        return self.filler.stop - self.filler.start

    @property
    def n_object(self) -> int:
        return self.object.stop - self.object.start


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    d_head: int = 8
    vocab_size: int = 64
    n_vision: int = 16
    max_seq: int = 64
    seed: int = 0

    def validate(self) -> "ModelConfig":
        counts = {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_head": self.d_head, "vocab_size": self.vocab_size,
            "n_vision": self.n_vision, "max_seq": self.max_seq,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads x d_head "
                f"({self.n_heads} x {self.d_head})"
            )
        if self.d_model < N_RESERVED + 3:
            raise ConfigurationError(f"d_model must be at least {N_RESERVED + 3}")
        if self.vocab_size < 8:
            raise ConfigurationError("vocab_size must be at least 8")
        if self.n_vision + 1 > self.max_seq:
            raise ConfigurationError("max_seq must leave room for at least one text token")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        return self

    @property
    def layout(self) -> ResidualLayout:
        rest = self.d_model - N_RESERVED
        n_text = max(1, rest // 6)
        n_filler = max(1, rest // 5)
        start = N_RESERVED
        return ResidualLayout(
            text=slice(start, start + n_text),
            filler=slice(start + n_text, start + n_text + n_filler),
            object=slice(start + n_text + n_filler, self.d_model),
        )

    @property
    def function_ids(self) -> range:
        return range(0, max(1, self.vocab_size // 8))

    @property
    def object_ids(self) -> range:
        start = self.function_ids.stop
        return range(start, start + max(1, self.vocab_size // 2))

    @property
    def filler_ids(self) -> range:
        return range(self.object_ids.stop, self.vocab_size)

    @property
    def n_total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def to_dict(self) -> Dict[str, int]:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_head": self.d_head, "vocab_size": self.vocab_size,
            "n_vision": self.n_vision, "max_seq": self.max_seq, "seed": self.seed,
        }


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ToyTransformer:
    """Immutable weights; safe to share between threads and sessions."""

    config: ModelConfig
    embed: np.ndarray       # (V, D)
    pos: np.ndarray         # (max_seq, D)
    w_q: np.ndarray         # (L, H, D, d_head)
    w_k: np.ndarray         # (L, H, D, d_head)
    w_ov: np.ndarray        # (L, H, D, D), row-vector convention x @ W
    unembed: np.ndarray     # (V, D)

    def default_anchor_word(self) -> int:
        """Filler word whose unembedding row is best separated from the other fillers."""
        return int(self.config.filler_ids[int(np.argmax(self.anchor_margins()))])

    def anchor_margins(self) -> np.ndarray:
        fillers = self.config.filler_ids
        rows = self.unembed[fillers.start:fillers.stop]
        norms2 = (rows ** 2).sum(axis=1)
        proj = rows @ rows.T / norms2[None, :]
        np.fill_diagonal(proj, -np.inf)
        return 1.0 - proj.max(axis=0)


def init_model(config: ModelConfig) -> ToyTransformer:
    """Draw deterministic weights for config from its seed."""
    config.validate()
    rng = substream(config.seed, "weights")
    lay = config.layout
    L, H, D, dh, V = config.n_layers, config.n_heads, config.d_model, config.d_head, config.vocab_size
    nt, nf, no = lay.n_text, lay.n_filler, lay.n_object

    embed = np.zeros((V, D))
    embed[:, CH_BIAS] = 1.0
    embed[:, lay.text] = rng.normal(0.0, 1.0 / np.sqrt(nt), (V, nt))

    pos = np.zeros((config.max_seq, D))
    pos[:, lay.text] = rng.normal(0.0, POSITION_SCALE / np.sqrt(nt), (config.max_seq, nt))

    unembed = np.zeros((V, D))
    n_lexical = config.object_ids.stop
    unembed[:n_lexical, lay.object] = rng.normal(0.0, 1.0 / np.sqrt(no), (n_lexical, no))
    fillers = config.filler_ids
    unembed[fillers.start:fillers.stop, lay.filler] = rng.normal(0.0, 1.0 / np.sqrt(nf), (len(fillers), nf))

    # language prior: text content read into object space by every head
    prior = rng.normal(0.0, PRIOR_SCALE / np.sqrt(nt), (nt, no))
    sink_gain = rng.uniform(*SINK_GAIN_RANGE, size=(L, H))

    w_q = np.zeros((L, H, D, dh))
    w_k = np.zeros((L, H, D, dh))
    w_ov = np.zeros((L, H, D, D))
    for layer in range(L):
        for head in range(H):
            w_q[layer, head, CH_BIAS, 0] = sink_gain[layer, head]
            w_k[layer, head, CH_SINK, 0] = np.sqrt(dh)
            if dh > 1:
                content = rng.normal(0.0, CONTENT_QK_SCALE, (no, dh - 1))
                w_q[layer, head, lay.object, 1:] = content
                w_k[layer, head, lay.object, 1:] = content
                w_q[layer, head, lay.text, 1:] = rng.normal(0.0, TEXT_QK_SCALE, (nt, dh - 1))
                w_k[layer, head, lay.text, 1:] = rng.normal(0.0, TEXT_QK_SCALE, (nt, dh - 1))
            w_ov[layer, head, lay.object, lay.object] = (
                (OV_GAIN / H) * np.eye(no) + rng.normal(0.0, OV_NOISE, (no, no))
            )
            w_ov[layer, head, lay.text, lay.object] = (OV_GAIN / H) * prior
            w_ov[layer, head, CH_VISUAL, CH_BIAS] = -SINK_DAMPING / H

    model = ToyTransformer(
        config=config,
        embed=_frozen(embed),
        pos=_frozen(pos),
        w_q=_frozen(w_q),
        w_k=_frozen(w_k),
        w_ov=_frozen(w_ov),
        unembed=_frozen(unembed),
    )
    logger.debug(f"Initialized toy model {config.to_dict()}")
    return model


@dataclass(frozen=True, eq=False)
class SegmentedSequence:
    tokens: Tuple[int, ...]
    vision_span: Tuple[int, int]
    prompt_span: Tuple[int, int]
    output_span: Tuple[int, int]
    vision_embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        spans = (self.vision_span, self.prompt_span, self.output_span)
        if self.vision_span[0] != 0 or self.output_span[1] != len(self.tokens):
            raise DomainError("spans must cover the token list")
        for (start, stop), (nxt, _) in zip(spans, spans[1:]):
            if stop != nxt:
                raise DomainError("spans must be contiguous and ordered vision -> prompt -> output")
        for start, stop in spans:
            if stop < start:
                raise DomainError("span end precedes its start")
        if self.vision_embeddings is not None:
            n_vision = self.vision_span[1] - self.vision_span[0]
            if self.vision_embeddings.shape[0] != n_vision:
                raise DomainError("vision embeddings do not match the vision span")

    @classmethod
    def build(
        cls,
        n_vision: int,
        prompt: Sequence[int],
        output: Sequence[int] = (),
        vision_embeddings: Optional[np.ndarray] = None,
        vision_tokens: Optional[Sequence[int]] = None,
    ) -> "SegmentedSequence":
        vision = list(vision_tokens) if vision_tokens is not None else [0] * n_vision
        tokens = tuple(int(t) for t in [*vision, *prompt, *output])
        p0 = n_vision
        o0 = p0 + len(prompt)
        return cls(tokens, (0, p0), (p0, o0), (o0, len(tokens)), vision_embeddings)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vision_positions(self) -> range:
        return range(*self.vision_span)

    @property
    def n_vision(self) -> int:
        return self.vision_span[1] - self.vision_span[0]

    @property
    def output_tokens(self) -> Tuple[int, ...]:
        return self.tokens[self.output_span[0]:self.output_span[1]]

    def append(self, token: int) -> "SegmentedSequence":
        return replace(
            self,
            tokens=self.tokens + (int(token),),
            output_span=(self.output_span[0], self.output_span[1] + 1),
        )


@dataclass(frozen=True, eq=False)
class ForwardCapture:
    hidden: np.ndarray      # (L + 1, S, D); layer 0 is post-embedding
    attn: np.ndarray        # (L, H, S, S), post-hook
    seq: SegmentedSequence

    @property
    def n_layers(self) -> int:
        return self.attn.shape[0]

    @property
    def n_heads(self) -> int:
        return self.attn.shape[1]

    @property
    def query(self) -> int:
        """Position whose next-token prediction this capture produced."""
        return self.attn.shape[-1] - 1

    def query_rows(self) -> np.ndarray:
        """Attention of the current query position, shape (L, H, S)."""
        return self.attn[:, :, self.query, :]


def forward_capture(
    model: ToyTransformer,
    seq: SegmentedSequence,
    hook: Optional[AttentionHook] = None,
) -> ForwardCapture:
    """
    Run one forward pass and record hidden states and attention.

    The hook, when given, is called as hook(layer, attn, seq) with layer in
    1..L and attn of shape (H, S, S) after the causal softmax; its result
    replaces the attention used for the value mix and is what gets captured.

    Positions whose input carries the sink channel attract attention but
    contribute nothing to the value mix, and keep their input embedding at
    every layer.
    """
    cfg = model.config
    n = len(seq)
    if n > cfg.max_seq:
        raise CapacityError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    if n == 0:
        raise DomainError("cannot run an empty sequence")
    tokens = np.asarray(seq.tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DomainError("token id outside the vocabulary")

    x = model.embed[tokens] + model.pos[:n]
    v0, v1 = seq.vision_span
    if seq.vision_embeddings is not None:
        x[v0:v1] = seq.vision_embeddings + model.pos[v0:v1]
    x[v0:v1, CH_VISUAL] = 1.0
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input embedding")

    L, H, dh = cfg.n_layers, cfg.n_heads, cfg.d_head
    # sink-carrying positions are value-null and their residual stays at the embedding
    sink = x[:, CH_SINK] > 0
    writable = (~sink).astype(float)[:, None]
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    hidden = np.empty((L + 1, n, cfg.d_model))
    attn = np.empty((L, H, n, n))
    hidden[0] = x
    for layer in range(L):
        q = np.einsum("sd,hde->hse", x, model.w_q[layer])
        k = np.einsum("sd,hde->hse", x, model.w_k[layer])
        scores = np.einsum("hqe,hke->hqk", q, k) / np.sqrt(dh)
        scores[:, future] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        if hook is not None:
            weights = np.asarray(hook(layer + 1, weights, seq), dtype=float)
            if weights.shape != (H, n, n):
                raise DomainError(f"hook returned shape {weights.shape}, expected {(H, n, n)}")
        attn[layer] = weights
        values = np.einsum("sd,hde->hse", x, model.w_ov[layer])
        values[:, sink] = 0.0
        x = x + writable * np.einsum("hqk,hkd->qd", weights, values)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation after layer {layer + 1}")
        hidden[layer + 1] = x
    return ForwardCapture(hidden=hidden, attn=attn, seq=seq)


def next_token_logits(model: ToyTransformer, capture: ForwardCapture) -> np.ndarray:
    return model.unembed @ capture.hidden[-1, -1]


def generate_greedy(
    model: ToyTransformer,
    seq: SegmentedSequence,
    max_new: int,
    hook: Optional[AttentionHook] = None,
) -> Tuple[List[int], List[ForwardCapture]]:
    """Greedy decoding; returns generated ids and the capture of every step."""
    if max_new < 1:
        raise DomainError("max_new must be >= 1")
    if len(seq) + max_new > model.config.max_seq:
        raise CapacityError(
            f"{len(seq)} context tokens + {max_new} new tokens exceed max_seq {model.config.max_seq}"
        )
    current = seq
    generated: List[int] = []
    captures: List[ForwardCapture] = []
    for _ in range(max_new):
        capture = forward_capture(model, current, hook)
        token = int(np.argmax(next_token_logits(model, capture)))
        generated.append(token)
        captures.append(capture)
        current = current.append(token)
    return generated, captures


def default_prompt(config: ModelConfig) -> List[int]:
    """Fixed function-word instruction, the toy 'describe the image'."""
    n_func = len(config.function_ids)
    return [i % n_func for i in (1, 2, 3, 4)]


@dataclass(frozen=True)
class SceneParams:
    n_inert: int = 2
    n_true_objects: int = 3
    noise: float = 0.3
    sink_strength: float = 3.0
    anchor_gain: float = 8.0
    anchor_word: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ToyScene:
    scene_id: str
    true_objects: frozenset
    embeddings: np.ndarray          # (n_vision, D)
    planted_inert: frozenset
    planted_anchor_word: int

    @property
    def n_vision(self) -> int:
        return self.embeddings.shape[0]

    @property
    def background(self) -> frozenset:
        """Vision positions not bound to any true object."""
        return self.planted_inert

    def sequence(self, prompt: Sequence[int]) -> SegmentedSequence:
        return SegmentedSequence.build(self.n_vision, prompt, vision_embeddings=self.embeddings)

    def to_dict(self) -> dict:
        return {
            "id": self.scene_id,
            "true_objects": sorted(int(t) for t in self.true_objects),
            "planted_inert": sorted(int(p) for p in self.planted_inert),
            "anchor_word": int(self.planted_anchor_word),
            "embeddings": [[float(v) for v in row] for row in self.embeddings],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyScene":
        try:
            embeddings = np.asarray(data["embeddings"], dtype=float)
            scene = cls(
                scene_id=str(data["id"]),
                true_objects=frozenset(int(t) for t in data["true_objects"]),
                embeddings=_frozen(embeddings),
                planted_inert=frozenset(int(p) for p in data["planted_inert"]),
                planted_anchor_word=int(data["anchor_word"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FixtureValidationError(f"malformed scene document: {e}") from e
        if embeddings.ndim != 2 or any(not 0 <= p < embeddings.shape[0] for p in scene.planted_inert):
            raise FixtureValidationError(f"scene {scene.scene_id}: inert positions outside the vision span")
        return scene


def make_scene(model: ToyTransformer, params: SceneParams, seed: int, index: int = 0) -> ToyScene:
    """
    Build a fixture scene with planted inert tokens.

    Normal vision positions carry the unembedding row of one of the scene's
    true objects plus noise. Inert positions carry a sink-key bias and a
    filler-subspace vector aligned with the anchor word's unembedding row.
    Sink positions are never written by the attention layers, so every layer
    of their logit lens reads the anchor word.
    """
    cfg = model.config
    if not 0 <= params.n_inert < cfg.n_vision:
        raise ConfigurationError(f"n_inert must be in [0, {cfg.n_vision}), got {params.n_inert}")
    if params.n_true_objects < 1 or params.n_true_objects > len(cfg.object_ids):
        raise ConfigurationError("n_true_objects must be between 1 and the number of object classes")
    anchor = model.default_anchor_word() if params.anchor_word is None else int(params.anchor_word)
    if not 0 <= anchor < cfg.vocab_size:
        raise ConfigurationError(f"anchor word {anchor} outside the vocabulary")
    if anchor in cfg.filler_ids:
        margin = model.anchor_margins()[anchor - cfg.filler_ids.start]
        if margin <= 0.05:
            raise ConfigurationError(f"anchor word {anchor} is not separable from other fillers")

    rng = substream(seed, "scenes", index)
    lay = cfg.layout
    inert = np.sort(rng.choice(cfg.n_vision, size=params.n_inert, replace=False))
    normal = np.array([p for p in range(cfg.n_vision) if p not in set(inert.tolist())])
    n_objects = min(params.n_true_objects, len(normal))
    objects = np.sort(rng.choice(np.array(cfg.object_ids), size=n_objects, replace=False))
    order = rng.permutation(normal)

    embeddings = np.zeros((cfg.n_vision, cfg.d_model))
    embeddings[:, CH_BIAS] = 1.0
    embeddings[:, CH_VISUAL] = 1.0
    for i, position in enumerate(order):
        word = objects[i % n_objects]
        noise = rng.normal(0.0, params.noise / np.sqrt(lay.n_object), lay.n_object)
        embeddings[position, lay.object] = model.unembed[word, lay.object] + noise
    row = model.unembed[anchor]
    direction = row / float(row @ row)
    for position in inert:
        embeddings[position] += params.anchor_gain * direction
        embeddings[position, CH_SINK] = params.sink_strength

    return ToyScene(
        scene_id=f"scene-{seed}-{index:04d}",
        true_objects=frozenset(int(o) for o in objects),
        embeddings=_frozen(embeddings),
        planted_inert=frozenset(int(p) for p in inert),
        planted_anchor_word=anchor,
    )


def make_scenes(model: ToyTransformer, params: SceneParams, seed: int, n_scenes: int) -> List[ToyScene]:
    if n_scenes < 1:
        raise ConfigurationError("n_scenes must be >= 1")
    return [make_scene(model, params, seed, index) for index in range(n_scenes)]


@dataclass
class CaptureFixtureSpec:
    """
    Hand-specified capture substrate.

    query_rows holds one array per decoding step with shape (L, H, S_t): the
    attention of that step's query (last position) over S_t keys. Rows of
    the other positions are filled uniformly over their causal support.
    trace_words maps a vision position to the word read at layers 1..L.
    """

    n_vision: int
    n_prompt: int
    query_rows: List[np.ndarray]
    vocab_size: int = 16
    trace_words: Dict[int, Sequence[int]] = field(default_factory=dict)
    inert: Sequence[int] = ()
    step_tokens: Sequence[int] = ()


@dataclass(frozen=True, eq=False)
class FixtureLens:
    """Identity unembedding so hidden state one-hots decode exactly."""

    unembed: np.ndarray


@dataclass(frozen=True, eq=False)
class FixtureTruth:
    inert: frozenset
    lens: FixtureLens
    step_tokens: Tuple[int, ...]


def uniform_rows(n_layers: int, n_heads: int, length: int) -> np.ndarray:
    return np.full((n_layers, n_heads, length), 1.0 / length)


def make_capture_fixture(spec: CaptureFixtureSpec, atol: float = 1e-6) -> Tuple[List[ForwardCapture], FixtureTruth]:
    """Build captures directly from exact attention values and trace words."""
    if not spec.query_rows:
        raise FixtureValidationError("fixture needs at least one step")
    V = spec.vocab_size
    captures = []
    for step, rows in enumerate(spec.query_rows):
        rows = np.asarray(rows, dtype=float)
        if rows.ndim != 3:
            raise FixtureValidationError(f"step {step}: query rows must have shape (L, H, S)")
        L, H, S = rows.shape
        n_output = S - spec.n_vision - spec.n_prompt
        if n_output < 0:
            raise FixtureValidationError(f"step {step}: row shorter than vision + prompt")
        if np.any(rows < 0) or np.any(rows > 1):
            raise FixtureValidationError(f"step {step}: attention outside [0, 1]")
        sums = rows.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=atol, rtol=0.0):
            raise FixtureValidationError(f"step {step}: attention rows must sum to 1, got {sums.min():.6f}..{sums.max():.6f}")

        attn = np.zeros((L, H, S, S))
        for query in range(S - 1):
            attn[:, :, query, :query + 1] = 1.0 / (query + 1)
        attn[:, :, S - 1, :] = rows

        hidden = np.zeros((L + 1, S, V))
        for position, words in spec.trace_words.items():
            if len(words) != L:
                raise FixtureValidationError(f"trace for position {position} must have {L} words")
            for layer, word in enumerate(words, start=1):
                hidden[layer, position, int(word)] = 4.0

        prompt = [0] * spec.n_prompt
        output = list(spec.step_tokens[:n_output]) if spec.step_tokens else [0] * n_output
        output += [0] * (n_output - len(output))
        seq = SegmentedSequence.build(spec.n_vision, prompt, output)
        captures.append(ForwardCapture(hidden=hidden, attn=attn, seq=seq))

    truth = FixtureTruth(
        inert=frozenset(int(p) for p in spec.inert),
        lens=FixtureLens(unembed=np.eye(V)),
        step_tokens=tuple(int(t) for t in spec.step_tokens),
    )
    return captures, truth


def check_capture(capture: ForwardCapture, atol: float = 1e-6) -> None:
    """Raise NumericError when causality or row normalization is violated."""
    attn = capture.attn
    n = attn.shape[-1]
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    if np.any(attn[:, :, future] != 0.0):
        raise NumericError("attention to future keys")
    if np.any(attn < 0.0) or np.any(attn > 1.0):
        raise NumericError("attention outside [0, 1]")
    if not np.allclose(attn.sum(axis=-1), 1.0, atol=atol, rtol=0.0):
        raise NumericError("attention rows do not sum to 1")
    if not np.all(np.isfinite(capture.hidden)):
        raise NumericError("non-finite hidden state")
