"""Chat-completion client: transport, repeated-sample voting, verdict parsing.

For consistency, every detection issues ``n_votes`` completions for the same
prompt and takes the majority of the parseable verdicts. Ties (possible only
when some responses fail to parse) resolve to Vulnerable, the recall-favoring
choice for a security tool. Results are cached on a content hash of the
rendered prompt and all inference parameters, so repeated runs cost no
network calls.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import requests

from .corpus import FunctionRecord
from .prompts import PromptTemplate, render_prompt

ENDPOINT_ENV = "SOLMOE_ENDPOINT"
API_KEY_ENV = "SOLMOE_API_KEY"
PARALLELISM_ENV = "SOLMOE_PARALLELISM"

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 1.0  # seconds; doubles per retry: 1s, 2s, 4s


class TransportError(RuntimeError):
    """Transient transport failure that survived all retries."""


class TransientFailure(RuntimeError):
    """Retryable failure (connection error or 5xx status)."""


class EndpointRejected(RuntimeError):
    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint rejected request with status {status}: {body[:200]}")
        self.status = status
        self.body = body


class BudgetExceeded(ValueError):
    pass


class AllAbstained(RuntimeError):
    pass


class CacheCorrupt(ValueError):
    def __init__(self, path: Path, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class Verdict(str, enum.Enum):
    VULNERABLE = "vulnerable"
    SECURE = "secure"


@dataclass
class InferenceParams:
    """Sampling parameters sent on the wire, plus the vote count."""

    model_name: str = "qwen1.5-72b-chat"
    max_input_tokens: int = 2048
    max_output_tokens: int = 512
    top_p: float = 1.0
    temperature: float = 0.0
    repetition_penalty: float = 1.2
    n_votes: int = 5

    def __post_init__(self):
        if self.n_votes < 1 or self.n_votes % 2 == 0:
            raise ValueError(f"n_votes must be an odd positive integer, got {self.n_votes}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature < 0.0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.repetition_penalty < 1.0:
            raise ValueError(f"repetition_penalty must be >= 1, got {self.repetition_penalty}")
        if self.max_input_tokens < 1 or self.max_output_tokens < 1:
            raise ValueError("token limits must be positive")

    def cache_key_material(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class LlmVerdict:
    """Aggregated result of one voted detection."""

    prediction: Verdict
    explanation: str
    votes: dict[Verdict, int]
    abstentions: int
    raw_responses: list[str] = field(default_factory=list)

    def vote_counts_by_name(self) -> dict[str, int]:
        return {v.value: c for v, c in self.votes.items()}


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------


class HttpTransport:
    """POSTs chat-completion requests in the common JSON shape.

    The repetition-penalty field name differs across serving stacks, so it
    is configurable. Raises TransientFailure for connection problems and
    5xx statuses (the retry loop in ``complete`` handles those) and
    EndpointRejected for other error statuses.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        repetition_penalty_field: str = "repetition_penalty",
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.repetition_penalty_field = repetition_penalty_field
        self.timeout = timeout

    def send(self, prompt: str, params: InferenceParams) -> str:
        body = {
            "model": params.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
            self.repetition_penalty_field: params.repetition_penalty,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                self.endpoint, json=body, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransientFailure(f"request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise TransientFailure(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise EndpointRejected(resp.status_code, resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EndpointRejected(resp.status_code, f"unparseable body: {resp.text[:200]}") from exc


class StubTransport:
    """Scripted transport for tests and offline runs.

    Returns responses in order; with ``cycle=True`` it wraps around, which
    lets a one-line script answer any number of requests. Thread-safe;
    counts every send.
    """

    def __init__(self, responses: Sequence[str], cycle: bool = False):
        if not responses:
            raise ValueError("stub transport needs at least one response")
        self.responses = list(responses)
        self.cycle = cycle
        self.calls = 0
        self.seen: list[tuple[str, InferenceParams]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, cycle: bool = True) -> "StubTransport":
        """Load a script file: one JSON string per line."""
        responses = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    text = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: stub line is not a JSON string") from exc
                if not isinstance(text, str):
                    raise ValueError(f"{path}:{lineno}: stub line must decode to a string")
                responses.append(text)
        return cls(responses, cycle=cycle)

    def send(self, prompt: str, params: InferenceParams) -> str:
        with self._lock:
            if self.calls >= len(self.responses):
                if not self.cycle:
                    raise TransientFailure("stub script exhausted")
                index = self.calls % len(self.responses)
            else:
                index = self.calls
            self.calls += 1
            self.seen.append((prompt, params))
            return self.responses[index]


def endpoint_from_env() -> str | None:
    return os.environ.get(ENDPOINT_ENV)


def api_key_from_env() -> str | None:
    return os.environ.get(API_KEY_ENV)


def parallelism_from_env(default: int = 4) -> int:
    raw = os.environ.get(PARALLELISM_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


# ---------------------------------------------------------------------------
# Completion and voting
# ---------------------------------------------------------------------------


def complete(
    prompt: str,
    params: InferenceParams,
    transport,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One completion with retry on transient failures.

    ``retries`` counts attempts after the first; waits backoff, 2*backoff,
    4*backoff, ... between attempts. Raises TransportError once retries are
    exhausted; EndpointRejected and BudgetExceeded are not retried.
    """
    from .prompts import estimate_tokens

    estimated = estimate_tokens(prompt)
    if estimated > params.max_input_tokens:
        raise BudgetExceeded(
            f"prompt is an estimated {estimated} tokens, limit is {params.max_input_tokens}"
        )
    attempts = retries + 1
    last: TransientFailure | None = None
    for attempt in range(attempts):
        try:
            return transport.send(prompt, params)
        except TransientFailure as exc:
            last = exc
            if attempt < attempts - 1 and backoff > 0:
                sleep(backoff * (2**attempt))
    raise TransportError(f"gave up after {attempts} attempts: {last}") from last


_VERDICT_LINE = re.compile(r"^\s*verdict\s*:\s*(vulnerable|secure)\b", re.IGNORECASE)
_NEGATIVE_PHRASES = re.compile(
    r"does\s+not\s+contain|\bno\b[^.\n]*\bvulnerabilit|\bnot\s+vulnerable\b",
    re.IGNORECASE,
)
_POSITIVE_PHRASES = re.compile(
    r"\bcontains?\b[^.\n]*\bvulnerabilit|\bis\s+vulnerable\b", re.IGNORECASE
)


def parse_verdict(response: str) -> tuple[Verdict | None, str]:
    """Extract (verdict, explanation) from a model response.

    Matching is ordered: an explicit "VERDICT: ..." line wins (the last one,
    if several); otherwise phrase rules decide, with negations checked
    before positive claims; otherwise the verdict is None (abstain). The
    explanation is the response text without any verdict lines.
    """
    lines = response.splitlines()
    verdict: Verdict | None = None
    other_lines: list[str] = []
    for line in lines:
        m = _VERDICT_LINE.match(line)
        if m:
            verdict = Verdict(m.group(1).lower())
        else:
            other_lines.append(line)
    if verdict is not None:
        return verdict, "\n".join(other_lines).strip()
    if _NEGATIVE_PHRASES.search(response):
        return Verdict.SECURE, response.strip()
    if _POSITIVE_PHRASES.search(response):
        return Verdict.VULNERABLE, response.strip()
    return None, response.strip()


def tally_votes(votes: Sequence[Verdict | None]) -> tuple[Verdict, dict[Verdict, int], int]:
    """Majority over parsed votes; ties resolve to Vulnerable.

    Returns (winner, per-verdict counts, abstention count). Raises
    AllAbstained when nothing parsed.
    """
    counts = Counter(v for v in votes if v is not None)
    abstentions = sum(1 for v in votes if v is None)
    if not counts:
        raise AllAbstained(f"none of {len(votes)} responses parsed to a verdict")
    n_vuln = counts.get(Verdict.VULNERABLE, 0)
    n_sec = counts.get(Verdict.SECURE, 0)
    winner = Verdict.VULNERABLE if n_vuln >= n_sec else Verdict.SECURE
    return winner, {Verdict.VULNERABLE: n_vuln, Verdict.SECURE: n_sec}, abstentions


def detect_with_vote(
    prompt: str,
    params: InferenceParams,
    transport,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
) -> LlmVerdict:
    """Issue ``params.n_votes`` completions and aggregate by majority.

    The explanation comes from the first response that voted with the
    majority. Vote aggregation is order-independent (a pure function of
    the response multiset).
    """
    responses = [
        complete(prompt, params, transport, retries=retries, backoff=backoff, sleep=sleep)
        for _ in range(params.n_votes)
    ]
    parsed = [parse_verdict(r) for r in responses]
    winner, counts, abstentions = tally_votes([v for v, _ in parsed])
    explanation = next(expl for v, expl in parsed if v == winner)
    return LlmVerdict(
        prediction=winner,
        explanation=explanation,
        votes=counts,
        abstentions=abstentions,
        raw_responses=responses,
    )


# ---------------------------------------------------------------------------
# Verdict cache
# ---------------------------------------------------------------------------


class VerdictCache:
    """Append-only JSON-lines cache keyed by content hash.

    Safe for concurrent readers and serialized appends within one process.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, LlmVerdict] = {}
        if self.path.is_file():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    verdict = LlmVerdict(
                        prediction=Verdict(obj["prediction"]),
                        explanation=obj["explanation"],
                        votes={Verdict(k): int(v) for k, v in obj["votes"].items()},
                        abstentions=int(obj["abstentions"]),
                    )
                    key = obj["key"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise CacheCorrupt(self.path, lineno, f"bad cache entry: {exc}") from exc
                self._entries[key] = verdict

    def get(self, key: str) -> LlmVerdict | None:
        return self._entries.get(key)

    def put(self, key: str, verdict: LlmVerdict) -> None:
        row = {
            "key": key,
            "prediction": verdict.prediction.value,
            "explanation": verdict.explanation,
            "votes": verdict.vote_counts_by_name(),
            "abstentions": verdict.abstentions,
        }
        with self._lock:
            self._entries[key] = verdict
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def cache_key(rendered_prompt: str, params: InferenceParams) -> str:
    material = params.cache_key_material() + "\x00" + rendered_prompt
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def cached_detect(
    record: FunctionRecord,
    template: PromptTemplate,
    params: InferenceParams,
    cache: VerdictCache | str | Path,
    transport,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
) -> LlmVerdict:
    """detect_with_vote with a persistent cache in front.

    The cache key covers the rendered prompt, the model name, and every
    inference parameter, so any change to the inputs is a miss. Hits cost
    no network calls.
    """
    if not isinstance(cache, VerdictCache):
        cache = VerdictCache(cache)
    prompt = render_prompt(template, record.source, max_input_tokens=params.max_input_tokens)
    key = cache_key(prompt, params)
    hit = cache.get(key)
    if hit is not None:
        return hit
    verdict = detect_with_vote(
        prompt, params, transport, retries=retries, backoff=backoff, sleep=sleep
    )
    cache.put(key, verdict)
    return verdict


# ---------------------------------------------------------------------------
# Verdict files (the detect stage's output)
# ---------------------------------------------------------------------------


@dataclass
class VerdictRecord:
    """One row of a verdict file; prediction None means the record abstained."""

    id: str
    prediction: Verdict | None
    explanation: str
    votes: dict[str, int]

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "prediction": self.prediction.value if self.prediction else "abstain",
            "explanation": self.explanation,
            "votes": self.votes,
        }


def write_verdict_file(rows: Sequence[VerdictRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_json_obj(), sort_keys=True) + "\n")


def read_verdict_file(path: str | Path) -> dict[str, VerdictRecord]:
    rows: dict[str, VerdictRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                prediction = None if obj["prediction"] == "abstain" else Verdict(obj["prediction"])
                row = VerdictRecord(
                    id=obj["id"],
                    prediction=prediction,
                    explanation=obj["explanation"],
                    votes={k: int(v) for k, v in obj["votes"].items()},
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad verdict row: {exc}") from exc
            rows[row.id] = row
    return rows
