"""Semantic-cluster generation: local noise injection and chat-based rewrites.

Noise injection is fully local and deterministic: word-level synonym
substitution, insertion, swap, and deletion at a seeded intensity drawn
from one of three bands (light [0.2, 0.4], moderate [0.4, 0.6], heavy
[0.6, 0.8]). Protected spans — numbers, identifiers, code, URLs, paths,
placeholders, math — are detected first and come through byte-identical.

Paraphrasing and requirement augmentation go through a chat-completion
client using the bundled prompt templates; responses must wrap the
rewritten prompt in an ``<answer>...</answer>`` envelope.

Tokenization used by the noise ops (documented test vector): the text is
partitioned into protected atoms, word atoms, and glue. Words are maximal
runs of ASCII letters with optional internal apostrophes, so
``"can't stop 42 x_y"`` has words ``can't``, ``stop`` and protected spans
over ``42`` and ``x_y``.
"""
from __future__ import annotations

import json
import random
import re
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Mapping, Protocol, Sequence

import httpx

PERTURBATION_KINDS = (
    "paraphrasing",
    "requirement_augmentation",
    "light_noise",
    "moderate_noise",
    "heavy_noise",
)
LOCAL_NOISE_KIND = "noise"
DEFAULT_NOISE_OPS = frozenset({"substitute", "insert", "swap", "delete"})

_FILLER_WORDS = ("just", "really", "basically", "simply", "quite", "actually")


class PerturbationError(Exception):
    """Perturbation-layer failure."""


class ChatClientError(PerturbationError):
    """Chat-completion client failure."""


class TransportError(ChatClientError):
    """Retriable transport-level failure (network, 429, 5xx)."""


class FormatError(ChatClientError):
    """Response violates the expected format. Carries the raw response."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


@dataclass(frozen=True)
class ProtectedSpan:
    start: int
    end: int
    reason: str  # number | identifier | code_block | math | url | path | placeholder

    def slice(self, text: str) -> str:
        return text[self.start : self.end]


@dataclass(frozen=True)
class IntensityBand:
    """Allowed fraction of word-level edits.

    The three named bands are fixed; ``custom`` builds diagnostic bands
    (including degenerate zero-width ones such as [0, 0]).
    """

    name: str
    low: float
    high: float

    _NAMED = {"light": (0.2, 0.4), "moderate": (0.4, 0.6), "heavy": (0.6, 0.8)}

    def __post_init__(self) -> None:
        if self.name in self._NAMED:
            expected = self._NAMED[self.name]
            if (self.low, self.high) != expected:
                raise ValueError(f"band '{self.name}' must span {expected}")
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError("band bounds must satisfy 0 <= low <= high <= 1")

    @classmethod
    def named(cls, name: str) -> "IntensityBand":
        if name not in cls._NAMED:
            raise ValueError(f"unknown band '{name}', expected one of {sorted(cls._NAMED)}")
        low, high = cls._NAMED[name]
        return cls(name=name, low=low, high=high)

    @classmethod
    def custom(cls, low: float, high: float, name: str = "custom") -> "IntensityBand":
        return cls(name=name, low=low, high=high)


LIGHT = IntensityBand.named("light")
MODERATE = IntensityBand.named("moderate")
HEAVY = IntensityBand.named("heavy")


_SPAN_RULES: tuple[tuple[str, re.Pattern[str]], ...] = (
    ("code_block", re.compile(r"```.*?```", re.DOTALL)),
    ("code_block", re.compile(r"`[^`\n]+`")),
    ("code_block", re.compile(r"^[ \t]*(?:async[ \t]+def|def|class|import|from)\b[^\n]*", re.MULTILINE)),
    ("url", re.compile(r"\bhttps?://[^\s<>\"')\]]+")),
    ("path", re.compile(r"(?<![\w./])(?:~?/|\./)[\w./~-]+")),
    ("path", re.compile(r"\b[\w-]+\.(?:py|txt|json|jsonl|csv|md|toml|ya?ml)\b")),
    ("placeholder", re.compile(r"<[^<>\s][^<>]*>|\{[^{}]*\}|\$\{[^}]*\}|\$\w+")),
    ("math", re.compile(r"\bO\([^()]*(?:\([^()]*\)[^()]*)*\)")),
    ("math", re.compile(r"\$[^$\n]+\$")),
    ("identifier", re.compile(r"\b[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z0-9]+)+\b")),
    ("identifier", re.compile(r"\b[a-z]+(?:[A-Z][A-Za-z0-9]*)+\b")),
    ("number", re.compile(r"(?<![\w.])(?:0[xX][0-9a-fA-F]+|\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)(?!\w)")),
)


def detect_protected_spans(text: str) -> list[ProtectedSpan]:
    """Rule-based detection of text regions exempt from noise edits.

    Overlapping matches are merged; the merged span keeps the reason of
    the earliest (then longest) contributing match.
    """
    raw: list[ProtectedSpan] = []
    for reason, pattern in _SPAN_RULES:
        for match in pattern.finditer(text):
            if match.start() < match.end():
                raw.append(ProtectedSpan(start=match.start(), end=match.end(), reason=reason))
    raw.sort(key=lambda s: (s.start, -s.end))
    merged: list[ProtectedSpan] = []
    for span in raw:
        if merged and span.start < merged[-1].end:
            if span.end > merged[-1].end:
                merged[-1] = replace(merged[-1], end=span.end)
        else:
            merged.append(span)
    return merged


@dataclass(frozen=True)
class EditOp:
    position: int  # word index at the time the edit was applied
    op: str
    before: str
    after: str


@dataclass(frozen=True)
class NoiseResult:
    text: str
    edits: tuple[EditOp, ...]
    ratio: float
    unprotected_words: int
    protected_spans: tuple[ProtectedSpan, ...]
    # (output_start, output_end) of each protected span, in input span order
    protected_locations: tuple[tuple[int, int], ...]


_WORD_RE = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)*")


@dataclass
class _Atom:
    kind: str  # frozen | word | glue
    text: str


def _tokenize(text: str, spans: Sequence[ProtectedSpan]) -> list[_Atom]:
    atoms: list[_Atom] = []
    cursor = 0

    def split_free(segment: str) -> None:
        pos = 0
        for match in _WORD_RE.finditer(segment):
            if match.start() > pos:
                atoms.append(_Atom("glue", segment[pos : match.start()]))
            atoms.append(_Atom("word", match.group()))
            pos = match.end()
        if pos < len(segment):
            atoms.append(_Atom("glue", segment[pos:]))

    for span in spans:
        if span.start > cursor:
            split_free(text[cursor : span.start])
        atoms.append(_Atom("frozen", text[span.start : span.end]))
        cursor = span.end
    if cursor < len(text):
        split_free(text[cursor:])
    return atoms


_SYNONYMS: dict[str, list[str]] | None = None


def synonym_lexicon() -> dict[str, list[str]]:
    """The bundled static synonym lexicon (lowercase headwords)."""
    global _SYNONYMS
    if _SYNONYMS is None:
        data = resources.files("flowgauge.assets").joinpath("synonyms.json").read_text("utf-8")
        _SYNONYMS = json.loads(data)
    return _SYNONYMS


def _match_case(template: str, word: str) -> str:
    if template.isupper():
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def _typo(word: str, rng: random.Random) -> str:
    """Character-level fallback edit when no synonym exists."""
    if len(word) == 1:
        return word * 2
    style = rng.choice(("transpose", "double", "drop"))
    pos = rng.randrange(len(word) - 1)
    if style == "transpose":
        out = word[:pos] + word[pos + 1] + word[pos] + word[pos + 2 :]
    elif style == "double":
        out = word[: pos + 1] + word[pos] + word[pos + 1 :]
    else:
        out = word[:pos] + word[pos + 1 :]
    return out if out != word else word[: pos + 1] + word[pos] + word[pos + 1 :]


def inject_noise(
    text: str,
    band: IntensityBand,
    seed: int,
    ops_enabled: frozenset[str] | set[str] = DEFAULT_NOISE_OPS,
) -> NoiseResult:
    """Apply seeded word-level noise outside protected spans.

    Draws a target edit ratio uniformly in [band.low, band.high], applies
    round-half-up(ratio x unprotected word count) edits with op types
    drawn uniformly from ``ops_enabled``, and returns the perturbed text
    plus an edit log. Identical inputs and seed produce identical output
    on every platform. Substitution prefers the bundled synonym lexicon
    and falls back to a character-level typo.
    """
    ops = sorted(ops_enabled)
    if not ops or not set(ops) <= DEFAULT_NOISE_OPS:
        raise ValueError(f"ops_enabled must be a non-empty subset of {sorted(DEFAULT_NOISE_OPS)}")
    spans = detect_protected_spans(text)
    atoms = _tokenize(text, spans)
    word_count = sum(1 for a in atoms if a.kind == "word")
    if word_count == 0:
        raise PerturbationError("nothing to perturb: no unprotected words in input")

    rng = random.Random(seed)
    ratio = rng.uniform(band.low, band.high)
    n_edits = int(ratio * word_count + 0.5)
    lexicon = synonym_lexicon()
    edits: list[EditOp] = []

    for _ in range(n_edits):
        word_positions = [i for i, a in enumerate(atoms) if a.kind == "word"]
        op = rng.choice(ops)
        if not word_positions:
            op = "insert"  # deletes exhausted the words; keep the edit count exact
        if op == "substitute":
            w = rng.randrange(len(word_positions))
            atom = atoms[word_positions[w]]
            synonyms = lexicon.get(atom.text.lower())
            if synonyms:
                after = _match_case(atom.text, rng.choice(synonyms))
            else:
                after = _typo(atom.text, rng)
            edits.append(EditOp(position=w, op="substitute", before=atom.text, after=after))
            atom.text = after
        elif op == "insert":
            filler = rng.choice(_FILLER_WORDS)
            if word_positions:
                w = rng.randrange(len(word_positions))
                at = word_positions[w] + 1
            else:
                w, at = 0, len(atoms)
            atoms[at:at] = [_Atom("glue", " "), _Atom("word", filler)]
            edits.append(EditOp(position=w, op="insert", before="", after=filler))
        elif op == "swap":
            if len(word_positions) < 2:
                w = 0
                atom = atoms[word_positions[0]]
                after = _typo(atom.text, rng)
                edits.append(EditOp(position=w, op="substitute", before=atom.text, after=after))
                atom.text = after
                continue
            w = rng.randrange(len(word_positions) - 1)
            a, b = atoms[word_positions[w]], atoms[word_positions[w + 1]]
            edits.append(
                EditOp(position=w, op="swap", before=f"{a.text} {b.text}", after=f"{b.text} {a.text}")
            )
            a.text, b.text = b.text, a.text
        else:  # delete
            w = rng.randrange(len(word_positions))
            idx = word_positions[w]
            removed = atoms[idx].text
            del atoms[idx]
            # collapse one neighbouring whitespace-only glue atom
            if idx < len(atoms) and atoms[idx].kind == "glue" and atoms[idx].text.isspace():
                del atoms[idx]
            elif idx > 0 and atoms[idx - 1].kind == "glue" and atoms[idx - 1].text.isspace():
                del atoms[idx - 1]
            edits.append(EditOp(position=w, op="delete", before=removed, after=""))

    pieces: list[str] = []
    locations: list[tuple[int, int]] = []
    offset = 0
    for atom in atoms:
        if atom.kind == "frozen":
            locations.append((offset, offset + len(atom.text)))
        pieces.append(atom.text)
        offset += len(atom.text)
    return NoiseResult(
        text="".join(pieces),
        edits=tuple(edits),
        ratio=ratio,
        unprotected_words=word_count,
        protected_spans=tuple(spans),
        protected_locations=tuple(locations),
    )


class ChatClient(Protocol):
    def complete(self, messages: list[dict[str, str]]) -> str:
        """Return the assistant message content for a chat exchange."""
        ...


def load_prompt_template(kind: str) -> tuple[str, str]:
    """(system, user) template pair for a rewrite kind.

    The user template carries the ``{{original_prompt}}`` slot.
    """
    if kind not in PERTURBATION_KINDS:
        raise ValueError(f"no prompt template for kind '{kind}'")
    prompts = resources.files("flowgauge.assets").joinpath("prompts")
    system = prompts.joinpath(f"{kind}.system.txt").read_text("utf-8")
    user = prompts.joinpath(f"{kind}.user.txt").read_text("utf-8")
    return system, user


_ANSWER_RE = re.compile(r"<answer>(.*)</answer>", re.DOTALL)


def extract_answer(response: str) -> str:
    """Pull the payload out of the ``<answer>...</answer>`` envelope."""
    match = _ANSWER_RE.search(response)
    if not match:
        raise FormatError("response lacks an <answer>...</answer> envelope", raw_response=response)
    payload = match.group(1)
    payload = payload.removeprefix("\n").removesuffix("\n")
    if not payload.strip():
        raise FormatError("empty <answer> payload", raw_response=response)
    return payload


def llm_rewrite(text: str, kind: str, client: ChatClient) -> str:
    """Rewrite an instruction through the chat client using the bundled templates."""
    system, user = load_prompt_template(kind)
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": user.replace("{{original_prompt}}", text)},
    ]
    return extract_answer(client.complete(messages))


class HttpChatClient:
    """Chat-completion client: POST {model, messages, temperature: 0}.

    Retries transport failures and 429/5xx responses with exponential
    backoff; other non-200 responses and malformed bodies fail
    immediately.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, messages: list[dict[str, str]]) -> str:
        payload = {"model": self.model, "messages": messages, "temperature": 0}
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = self._client.post(self.endpoint, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = TransportError(f"chat endpoint returned HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise TransportError(
                    f"chat endpoint returned HTTP {response.status_code}: {response.text[:200]}"
                )
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise FormatError(
                    f"unexpected chat response shape: {exc}", raw_response=response.text[:500]
                ) from exc
        raise TransportError(f"chat request failed after {self.max_retries + 1} attempts: {last_error}")


class PlaybackChatClient:
    """Replays recorded responses; for tests and offline runs.

    Accepts either a FIFO list of raw responses or a mapping from rewrite
    kind to response (the kind is recovered by matching the system
    message against the bundled templates).
    """

    def __init__(self, responses: Sequence[str] | Mapping[str, str]):
        if isinstance(responses, Mapping):
            self._by_kind = dict(responses)
            self._queue: list[str] | None = None
        else:
            self._by_kind = {}
            self._queue = list(responses)
        self.calls: list[list[dict[str, str]]] = []

    def complete(self, messages: list[dict[str, str]]) -> str:
        self.calls.append(messages)
        if self._queue is not None:
            if not self._queue:
                raise TransportError("playback queue exhausted")
            return self._queue.pop(0)
        system = messages[0]["content"] if messages else ""
        for kind in PERTURBATION_KINDS:
            if load_prompt_template(kind)[0] == system and kind in self._by_kind:
                return self._by_kind[kind]
        raise TransportError("no recorded response for this prompt")


@dataclass
class Variant:
    """One member of a semantic cluster (index 0 is always the original)."""

    tag: str
    text: str
    kind: str
    band: str | None = None
    seed: int | None = None
    error: str | None = None
    workflow: dict[str, Any] | None = None  # graph document, when attached

    def to_json_obj(self) -> dict[str, Any]:
        obj: dict[str, Any] = {"tag": self.tag, "text": self.text, "kind": self.kind}
        if self.band is not None:
            obj["band"] = self.band
        if self.seed is not None:
            obj["seed"] = self.seed
        if self.error is not None:
            obj["error"] = self.error
        if self.workflow is not None:
            obj["workflow"] = self.workflow
        return obj

    @staticmethod
    def from_json_obj(obj: Mapping[str, Any]) -> "Variant":
        return Variant(
            tag=obj["tag"],
            text=obj.get("text", ""),
            kind=obj.get("kind", "unknown"),
            band=obj.get("band"),
            seed=obj.get("seed"),
            error=obj.get("error"),
            workflow=obj.get("workflow"),
        )


@dataclass
class SemanticCluster:
    cluster_id: str
    original: str
    variants: list[Variant] = field(default_factory=list)

    def __post_init__(self) -> None:
        tags = [v.tag for v in self.variants]
        if len(tags) != len(set(tags)):
            raise ValueError(f"cluster {self.cluster_id} has duplicate variant tags")
        if self.variants and self.variants[0].text != self.original:
            raise ValueError("variant 0 must be the original instruction")

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "cluster_id": self.cluster_id,
            "original": self.original,
            "variants": [v.to_json_obj() for v in self.variants],
        }

    @staticmethod
    def from_json_obj(obj: Mapping[str, Any]) -> "SemanticCluster":
        return SemanticCluster(
            cluster_id=str(obj["cluster_id"]),
            original=obj["original"],
            variants=[Variant.from_json_obj(v) for v in obj.get("variants", [])],
        )


@dataclass(frozen=True)
class PlanStep:
    """One variant to generate: a kind plus band/seed where applicable."""

    kind: str
    band: IntensityBand | None = None
    seed: int | None = None


def build_cluster(
    original: str,
    plan: Sequence[PlanStep],
    *,
    cluster_id: str,
    chat_client: ChatClient | None = None,
    ops_enabled: frozenset[str] | set[str] = DEFAULT_NOISE_OPS,
) -> SemanticCluster:
    """Generate a semantic cluster from an original instruction.

    Local noise steps are applied in-process; the chat kinds go through
    ``chat_client``. Per-variant failures are recorded on the variant, not
    raised, so one unreachable endpoint cannot sink a whole cluster.
    """
    if not plan:
        raise ValueError("perturbation plan must not be empty")
    variants = [Variant(tag="original", text=original, kind="original")]
    used_tags = {"original"}
    for step in plan:
        parts = [step.kind]
        if step.band is not None:
            parts.append(step.band.name)
        if step.seed is not None:
            parts.append(str(step.seed))
        tag = "-".join(parts)
        ordinal = 2
        while tag in used_tags:
            tag = "-".join(parts + [str(ordinal)])
            ordinal += 1
        used_tags.add(tag)

        band_name = step.band.name if step.band else None
        if step.kind == LOCAL_NOISE_KIND:
            if step.band is None or step.seed is None:
                variants.append(
                    Variant(tag=tag, text="", kind=step.kind, band=band_name, seed=step.seed,
                            error="noise steps need a band and a seed")
                )
                continue
            try:
                result = inject_noise(original, step.band, step.seed, ops_enabled)
                variants.append(
                    Variant(tag=tag, text=result.text, kind=step.kind, band=band_name, seed=step.seed)
                )
            except PerturbationError as exc:
                variants.append(
                    Variant(tag=tag, text="", kind=step.kind, band=band_name, seed=step.seed,
                            error=str(exc))
                )
        elif step.kind in PERTURBATION_KINDS:
            if chat_client is None:
                variants.append(
                    Variant(tag=tag, text="", kind=step.kind, band=band_name,
                            error="no chat client configured")
                )
                continue
            try:
                text = llm_rewrite(original, step.kind, chat_client)
                variants.append(Variant(tag=tag, text=text, kind=step.kind, band=band_name))
            except (ChatClientError, httpx.HTTPError) as exc:
                variants.append(
                    Variant(tag=tag, text="", kind=step.kind, band=band_name, error=str(exc))
                )
        else:
            variants.append(
                Variant(tag=tag, text="", kind=step.kind, error=f"unknown perturbation kind '{step.kind}'")
            )
    return SemanticCluster(cluster_id=cluster_id, original=original, variants=variants)
