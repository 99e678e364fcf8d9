"""Language models as tabular risk predictors: prompts, clients, parsing, evaluation.

The wire format is an OpenAI-style chat-completion body. Everything that
touches the network goes through a ``Transport``; tests use the mocks below.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .cohort import LabeledDataset

PROB_RANGE = (0.05, 0.95)
CONF_RANGE = (50.0, 100.0)
REQUIRED_KEYS = ("risk", "probability", "confidence")

DEFAULT_ROLE = (
    "You are a senior endocrinologist specializing in DXA-based diabetes prediction. "
    "You assess the risk that a participant develops type 2 diabetes by the follow-up visit."
)

OUTPUT_CONTRACT = (
    "Respond with a single JSON object and nothing else, with keys: "
    '"risk" ("high" or "low"), "probability" (number between 0 and 1), '
    '"confidence" (percent between 50 and 100), "reasoning" (one short paragraph).'
)

UNITS = {
    "age": "years",
    "hba1c": "%",
    "fasting_glucose": "mg/dL",
    "ldl": "mg/dL",
    "hdl": "mg/dL",
    "total_area": "cm^2",
}


class TransportError(RuntimeError):
    """Network-level failure that is worth retrying."""


# ---------------------------------------------------------------- prompts


def _unit(name: str) -> str:
    if name in UNITS:
        return UNITS[name]
    if name.endswith("_bmd"):
        return "g/cm^2"
    if name.endswith(("_mass", "_bmc")):
        return "g"
    if name.endswith("_volume"):
        return "cm^3"
    return ""


def format_value(name: str, value: float) -> str:
    """Three significant digits plus the unit, if one is known."""
    text = f"{float(value):.3g}"
    unit = _unit(name)
    return f"{text} {unit}" if unit else text


def feature_lines(features: Mapping[str, float]) -> str:
    return "\n".join(f"- {name}: {format_value(name, v)}" for name, v in features.items())


@dataclass(frozen=True)
class FewShotExample:
    subject_id: str
    features: Mapping[str, float]
    label: int


@dataclass(frozen=True)
class PromptSpec:
    strategy: str = "few_shot"  # or "comparative"
    role_preamble: str = DEFAULT_ROLE
    few_shot_examples: tuple[FewShotExample, ...] = ()
    reference_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in ("few_shot", "comparative"):
            raise ValueError(f"unknown prompt strategy {self.strategy!r}")
        if self.strategy == "few_shot" and not self.few_shot_examples:
            raise ValueError("few_shot prompts need at least one example")


def build_prompt(features: Mapping[str, float], spec: PromptSpec) -> str:
    parts = [spec.role_preamble, ""]
    if spec.few_shot_examples:
        parts.append("Worked examples:")
        for i, ex in enumerate(spec.few_shot_examples, start=1):
            outcome = "developed type 2 diabetes" if ex.label == 1 else "remained non-diabetic"
            parts += [f"Example {i}:", feature_lines(ex.features), f"Outcome: {outcome}", ""]
    parts += ["Participant baseline measurements:", feature_lines(features), ""]
    if spec.strategy == "comparative":
        parts.append("Population reference ranges (training cohort, 5th to 95th percentile):")
        for name in features:
            if name in spec.reference_ranges:
                lo, hi = spec.reference_ranges[name]
                parts.append(f"- {name}: {format_value(name, lo)} to {format_value(name, hi)}")
        parts += ["Position each measurement relative to its range before judging overall risk.", ""]
    parts.append(OUTPUT_CONTRACT)
    return "\n".join(parts)


def reference_ranges(train: LabeledDataset, lower: float = 5.0, upper: float = 95.0) -> dict[str, tuple[float, float]]:
    lo = np.percentile(train.matrix, lower, axis=0)
    hi = np.percentile(train.matrix, upper, axis=0)
    return {n: (float(a), float(b)) for n, a, b in zip(train.feature_names, lo, hi)}


def pick_examples(train: LabeledDataset, per_class: int = 1, seed: int = 0) -> tuple[FewShotExample, ...]:
    rng = np.random.default_rng(seed)
    out = []
    for label in (1, 0):
        idx = np.flatnonzero(train.labels == label)
        for i in sorted(rng.choice(idx, size=min(per_class, idx.size), replace=False)):
            out.append(FewShotExample(train.subject_ids[i], dict(zip(train.feature_names, train.matrix[i].tolist())), label))
    return tuple(out)


# ---------------------------------------------------------------- parsing


@dataclass(frozen=True)
class StructuredPrediction:
    risk_class: str
    probability: float
    confidence: float
    reasoning: str = ""
    parse_status: str = "parsed"  # or "fallback"
    route: str = "json"  # json | pattern | fallback


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


def _finite(v) -> float | None:
    try:
        f = float(str(v).strip().rstrip("%"))
    except (TypeError, ValueError):
        return None
    return f if math.isfinite(f) else None


def _as_probability(v) -> float | None:
    f = _finite(v)
    if f is None or f < 0:
        return None
    if f > 1.0:
        # "probability": 82 or "82%" reads as a percentage
        return f / 100.0 if f <= 100.0 else None
    return f


def _as_confidence(v) -> float | None:
    f = _finite(v)
    if f is None or f < 0:
        return None
    return f * 100.0 if f <= 1.0 else f


def _risk_word(v) -> str | None:
    m = re.search(r"\b(high|low|elevated|moderate)\b", str(v).lower())
    if not m:
        return None
    return "low" if m.group(1) == "low" else "high"


def _finish(risk, prob, conf, reasoning, route) -> StructuredPrediction:
    prob = _clamp(prob, *PROB_RANGE)
    conf = _clamp(conf if conf is not None else CONF_RANGE[0], *CONF_RANGE)
    risk = risk or ("high" if prob >= 0.5 else "low")
    return StructuredPrediction(risk, prob, conf, reasoning, "parsed", route)


def _from_json(text: str) -> StructuredPrediction | None:
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except (json.JSONDecodeError, RecursionError, ValueError):
            continue
        if not isinstance(obj, dict):
            continue
        keys = {str(k).lower(): v for k, v in obj.items()}
        if not all(k in keys for k in REQUIRED_KEYS):
            continue
        prob = _as_probability(keys["probability"])
        if prob is None:
            continue
        reasoning = keys.get("reasoning", "")
        return _finish(_risk_word(keys["risk"]), prob, _as_confidence(keys["confidence"]),
                       reasoning if isinstance(reasoning, str) else json.dumps(reasoning), "json")
    return None


_NUM = r"(\d+(?:\.\d+)?|\.\d+)\s*(%?)"
_PROB_RE = re.compile(r"probab\w*[\"']?\s*(?:[:=]|of|is|was|at|around|about|~)?\s*[\"']?\s*" + _NUM, re.I)
# "a 64% probability", "0.3 chance"
_PROB_BEFORE_RE = re.compile(_NUM + r"\s*(?:probability|chance|likelihood)\b", re.I)
_CONF_RE = re.compile(r"confiden\w*[\"']?\s*(?:[:=]|of|is|level|at|around|about|~)?\s*[\"']?\s*" + _NUM, re.I)
_RISK_RE = re.compile(r"\b(high|low|elevated)\b[\s-]*risk|\brisk\w*[\"']?\s*(?:[:=]|is|class\w*)?\s*[\"']?\s*(high|low|elevated)\b", re.I)


def _from_patterns(text: str) -> StructuredPrediction | None:
    prob = None
    matches = sorted([*_PROB_RE.finditer(text), *_PROB_BEFORE_RE.finditer(text)], key=lambda m: m.start())
    for m in matches:
        value, pct = float(m.group(1)), m.group(2)
        if pct:
            value /= 100.0
        if 0.0 <= value <= 1.0:
            prob = value
            break
    if prob is None:
        return None
    conf = None
    for m in _CONF_RE.finditer(text):
        conf = _as_confidence(m.group(1))
        if conf is not None and conf <= 100.0:
            break
        conf = None
    rm = _RISK_RE.search(text)
    risk = None if rm is None else ("low" if (rm.group(1) or rm.group(2)).lower() == "low" else "high")
    return _finish(risk, prob, conf, text.strip()[:2000], "pattern")


def fallback(reasoning: str = "") -> StructuredPrediction:
    return StructuredPrediction("low", 0.5, CONF_RANGE[0], reasoning, "fallback", "fallback")


def parse_response(text) -> StructuredPrediction:
    """JSON object, then regex extraction, then a neutral fallback. Never raises."""
    try:
        text = "" if text is None else str(text)
        return _from_json(text) or _from_patterns(text) or fallback(text.strip()[:2000])
    except Exception:  # total by contract
        return fallback("")


# ---------------------------------------------------------------- clients


@dataclass(frozen=True)
class LlmEndpoint:
    base_url: str
    model: str
    api_key_env: str = "LLM_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    requests_per_minute: float = 30.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")


class Transport(Protocol):
    def complete(self, messages: list[dict], subject_id: str) -> str: ...


def chat_messages(prompt: str, spec: PromptSpec) -> list[dict]:
    return [{"role": "system", "content": spec.role_preamble}, {"role": "user", "content": prompt}]


class HttpTransport:
    """POST {base_url}/chat/completions at temperature 0."""

    def __init__(self, endpoint: LlmEndpoint, client=None):
        import httpx

        self.endpoint = endpoint
        key = os.environ.get(endpoint.api_key_env)
        if not key:
            raise ValueError(f"environment variable {endpoint.api_key_env} is not set")
        self._client = client or httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            timeout=endpoint.timeout,
            headers={"Authorization": f"Bearer {key}"},
        )
        self._httpx = httpx

    def complete(self, messages: list[dict], subject_id: str) -> str:
        body = {"model": self.endpoint.model, "messages": messages, "temperature": 0}
        try:
            r = self._client.post("/chat/completions", json=body)
        except self._httpx.TransportError as exc:
            raise TransportError(type(exc).__name__) from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise TransportError(f"HTTP {r.status_code}")
        r.raise_for_status()
        data = r.json()
        return data["choices"][0]["message"]["content"] or ""


class OracleMock:
    """Reveals the true label; AUC 1 by construction."""

    def __init__(self, labels: Mapping[str, int]):
        self.labels = dict(labels)

    def complete(self, messages, subject_id):
        y = self.labels[subject_id]
        return json.dumps({"risk": "high" if y else "low", "probability": 0.9 if y else 0.1,
                           "confidence": 95, "reasoning": "oracle"})


class ConstantMock:
    def __init__(self, probability: float = 0.5):
        self.probability = probability

    def complete(self, messages, subject_id):
        return json.dumps({"risk": "high" if self.probability >= 0.5 else "low",
                           "probability": self.probability, "confidence": 50, "reasoning": "constant"})


class ScriptedMock:
    """Replays a fixed sequence; ``Exception`` entries are raised instead of returned."""

    def __init__(self, script: Sequence, then: Transport | None = None):
        self.script = list(script)
        self.then = then or ConstantMock()

    def complete(self, messages, subject_id):
        if self.script:
            item = self.script.pop(0)
            if isinstance(item, BaseException):
                raise item
            return item
        return self.then.complete(messages, subject_id)


class HeuristicMock:
    """Deterministic offline stand-in: scores the prompt's feature lines against reference means.

    ``weights`` maps feature names to signed weights on the standardized value.
    """

    _LINE = re.compile(r"^- (\w+): (-?[\d.eE+-]+)", re.M)

    def __init__(self, means: Mapping[str, float], scales: Mapping[str, float], weights: Mapping[str, float]):
        self.means, self.scales, self.weights = dict(means), dict(scales), dict(weights)

    def complete(self, messages, subject_id):
        body = messages[-1]["content"].split("Participant baseline measurements:")[-1]
        score = 0.0
        for name, value in self._LINE.findall(body.split("Population reference ranges")[0]):
            if name in self.weights and self.scales.get(name):
                score += self.weights[name] * (float(value) - self.means[name]) / self.scales[name]
        p = 1.0 / (1.0 + math.exp(-score))
        risk = "high" if p >= 0.5 else "low"
        return f'Assessment complete. {{"risk": "{risk}", "probability": {p:.4f}, "confidence": {50 + 45 * abs(2 * p - 1):.1f}, "reasoning": "weighted deviation from reference means"}}'


# ---------------------------------------------------------------- evaluation


class RateLimiter:
    def __init__(self, per_minute: float, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / per_minute
        self.clock, self.sleep = clock, sleep
        self._next = None

    def wait(self) -> None:
        now = self.clock()
        if self._next is not None and now < self._next:
            self.sleep(self._next - now)
            now = self._next
        self._next = now + self.interval


@dataclass
class TranscriptEntry:
    subject_id: str
    prompt: str
    responses: list[str]
    errors: list[str]
    status: str  # parsed | fallback | failed
    prediction: dict


@dataclass
class LlmRun:
    subject_ids: list[str]
    probabilities: np.ndarray
    predictions: list[StructuredPrediction]
    transcript: list[TranscriptEntry]

    @property
    def retries(self) -> int:
        return sum(len(t.errors) for t in self.transcript)

    def write_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.transcript:
                fh.write(json.dumps(asdict(entry), sort_keys=True) + "\n")


def evaluate(
    transport: Transport,
    test: LabeledDataset,
    spec: PromptSpec,
    max_retries: int = 3,
    requests_per_minute: float = 30.0,
    backoff: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.monotonic,
) -> LlmRun:
    """One request per subject; exponential backoff on ``TransportError``; exhausted retries fall back."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    leaked = {ex.subject_id for ex in spec.few_shot_examples} & set(test.subject_ids)
    if leaked:
        raise ValueError(f"few-shot examples drawn from the test set: {sorted(leaked)}")
    limiter = RateLimiter(requests_per_minute, clock, sleep)
    preds, log = [], []
    for sid, row in zip(test.subject_ids, test.matrix):
        prompt = build_prompt(dict(zip(test.feature_names, row.tolist())), spec)
        messages = chat_messages(prompt, spec)
        responses, errors = [], []
        pred = None
        for attempt in range(max_retries + 1):
            limiter.wait()
            try:
                text = transport.complete(messages, sid)
            except TransportError as exc:
                errors.append(str(exc) or type(exc).__name__)
                if attempt < max_retries:
                    sleep(backoff * 2**attempt)
                continue
            responses.append(text)
            pred = parse_response(text)
            break
        status = "failed" if pred is None else pred.parse_status
        pred = pred or fallback("transport retries exhausted")
        preds.append(pred)
        log.append(TranscriptEntry(sid, prompt, responses, errors, status, asdict(pred)))
    return LlmRun(list(test.subject_ids), np.array([p.probability for p in preds]), preds, log)
