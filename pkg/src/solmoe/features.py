"""Fixed-dimension feature embeddings for code, explanations, and verdicts.

Three vectors feed the fusion model: an embedding of the raw function
source (wrapped in the cloze template any upstream encoder is expected to
honor), an embedding of the LLM's explanation text, and a one-hot encoding
of the LLM's verdict. Embeddings come from a provider, either the
deterministic hash-seeded mock or a remote HTTP service; both expose
``dim`` and ``embed(text)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import requests

from .llm import LlmVerdict, Verdict

DEFAULT_REMOTE_DIM = 768  # hidden size of the usual base encoders
DEFAULT_MOCK_DIM = 32


class ProviderUnavailable(RuntimeError):
    pass


class DimensionMismatch(ValueError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected embedding of dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


@dataclass(frozen=True)
class ClozeTemplate:
    """Input/answer-slot template a prompt-tuned encoder is driven with."""

    text: str = "[X] The code is [Z]"

    def __post_init__(self):
        if self.text.count("[X]") != 1 or self.text.count("[Z]") != 1:
            raise ValueError("cloze template needs exactly one [X] and one [Z] slot")

    def apply(self, source: str) -> str:
        return self.text.replace("[X]", source)


@dataclass(frozen=True)
class Verbalizer:
    """Label words the encoder side scores at the answer slot."""

    vulnerable_words: tuple[str, ...] = ("defective", "bad")
    secure_words: tuple[str, ...] = ("clean", "perfect")

    def __post_init__(self):
        if not self.vulnerable_words or not self.secure_words:
            raise ValueError("verbalizer word lists must be non-empty")
        if set(self.vulnerable_words) & set(self.secure_words):
            raise ValueError("verbalizer word lists must be disjoint")


DEFAULT_CLOZE = ClozeTemplate()
DEFAULT_VERBALIZER = Verbalizer()


@dataclass
class FeatureBundle:
    """The per-function feature triple, all of one dimension."""

    raw: np.ndarray
    expl: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.expl = np.asarray(self.expl, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.float64)
        if not (self.raw.shape == self.expl.shape == self.pred.shape) or self.raw.ndim != 1:
            raise ValueError(
                f"feature vectors must share one dimension, got "
                f"{self.raw.shape}, {self.expl.shape}, {self.pred.shape}"
            )
        for name, vec in (("raw", self.raw), ("expl", self.expl), ("pred", self.pred)):
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} feature contains non-finite entries")

    @property
    def d(self) -> int:
        return self.raw.shape[0]

    def tokens(self) -> np.ndarray:
        """The bundle as a (3, d) token matrix in (raw, expl, pred) order."""
        return np.stack([self.raw, self.expl, self.pred])


class MockProvider:
    """Pure hash-seeded embedding stand-in.

    Maps text to a vector of uniform values in [-1, 1] drawn from a
    counter-based generator keyed by sha256(seed, text), so the output is
    identical across runs and machines. Empty text maps to the zero
    vector.
    """

    def __init__(self, dim: int, seed: int):
        if dim < 2:
            raise ValueError(f"dimension must be at least 2, got {dim}")
        self.dim = dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        if text == "":
            return np.zeros(self.dim)
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        key = int.from_bytes(digest[:16], "little")
        rng = np.random.Generator(np.random.Philox(key=key))
        return rng.uniform(-1.0, 1.0, size=self.dim)


class RemoteProvider:
    """Client for the embedding wire protocol: POST {"text"} -> {"embedding"}."""

    def __init__(self, endpoint: str, dim: int, timeout: float = 60.0):
        if dim < 2:
            raise ValueError(f"dimension must be at least 2, got {dim}")
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout

    def embed(self, text: str) -> np.ndarray:
        try:
            resp = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"embedding endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderUnavailable(
                f"embedding endpoint returned status {resp.status_code}"
            )
        try:
            values = resp.json()["embedding"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderUnavailable(f"malformed embedding response: {exc}") from exc
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(self.dim, int(vec.size))
        return vec


def mock_provider(dim: int = DEFAULT_MOCK_DIM, seed: int = 0) -> MockProvider:
    return MockProvider(dim, seed)


def remote_provider(endpoint: str, dim: int = DEFAULT_REMOTE_DIM) -> RemoteProvider:
    return RemoteProvider(endpoint, dim)


def embed_raw(
    source: str, provider, cloze: ClozeTemplate = DEFAULT_CLOZE
) -> np.ndarray:
    """Embed function source wrapped in the cloze template."""
    return provider.embed(cloze.apply(source))


def embed_expl(explanation: str, provider) -> np.ndarray:
    """Embed explanation text as-is (it is already natural language)."""
    return provider.embed(explanation)


def embed_pred(verdict: LlmVerdict | Verdict | None, d: int) -> np.ndarray:
    """One-hot verdict embedding: coordinate 0 = Vulnerable, 1 = Secure.

    Accepts an aggregated verdict, a bare prediction, or None (an
    abstention), which maps to the zero vector. Requires d >= 2.
    """
    if d < 2:
        raise ValueError(f"dimension must be at least 2, got {d}")
    vec = np.zeros(d)
    prediction = verdict.prediction if isinstance(verdict, LlmVerdict) else verdict
    if prediction is None:
        return vec
    vec[0 if prediction == Verdict.VULNERABLE else 1] = 1.0
    return vec


def build_bundle(
    source: str,
    explanation: str,
    verdict: LlmVerdict | Verdict | None,
    provider,
    cloze: ClozeTemplate = DEFAULT_CLOZE,
) -> FeatureBundle:
    """Assemble the feature triple for one function."""
    return FeatureBundle(
        raw=embed_raw(source, provider, cloze),
        expl=embed_expl(explanation, provider),
        pred=embed_pred(verdict, provider.dim),
    )
