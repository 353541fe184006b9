"""Clients for the remote completion and reward services, plus offline stubs.

Completion requests use the chat-completions shape::

    POST {"model": ..., "messages": [{"role": ..., "content": ...}], "temperature": ...}
    -> {"choices": [{"message": {"content": "..."}}]}

Reward requests are ``POST {"query", "response"} -> {"score": number}``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import httpx

from . import prompts
from .errors import ScoringError, ServiceError
from .tokens import detokenize, tokenize

logger = logging.getLogger(__name__)

TOKEN_ENV = "FIGA_COMPLETION_TOKEN"


class CompletionService(Protocol):
    identity: str

    def complete(self, prompt: str, **params: Any) -> str: ...


class RewardService(Protocol):
    identity: str

    def score(self, query: str, response: str, reference: str | None = None) -> float: ...


class TransportError(ServiceError):
    """A call failed on every attempt allowed by the retry policy."""


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    initial_backoff: float = 0.5
    budget: float = 60.0
    sleep: Callable[[float], None] = field(default=time.sleep, compare=False)
    clock: Callable[[], float] = field(default=time.monotonic, compare=False)

    def call(self, fn: Callable[[], Any], what: str) -> Any:
        deadline = self.clock() + self.budget
        delay = self.initial_backoff
        last: Exception | None = None
        for attempt in range(1, self.attempts + 1):
            try:
                return fn()
            except (httpx.HTTPError, ValueError, KeyError, TypeError, IndexError) as exc:
                last = exc
                logger.warning("%s failed (attempt %d/%d): %s", what, attempt, self.attempts, exc)
            if attempt == self.attempts or self.clock() + delay > deadline:
                break
            self.sleep(delay)
            delay *= 2
        raise TransportError(f"{what} failed after retries: {last}")


def _remaining_timeout(policy: RetryPolicy) -> float:
    return max(1.0, policy.budget / policy.attempts)


class HttpCompletionService:
    def __init__(
        self,
        endpoint: str,
        model: str,
        token: str | None = None,
        retry: RetryPolicy | None = None,
        client: httpx.Client | None = None,
        **defaults: Any,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.retry = retry or RetryPolicy()
        self.defaults = {"temperature": 0.0, **defaults}
        self._client = client
        self.identity = f"http:{endpoint}#{model}"

    def build_request(self, prompt: str, **params: Any) -> dict[str, Any]:
        body: dict[str, Any] = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        body.update(self.defaults)
        body.update(params)
        return body

    def _post(self, body: dict[str, Any]) -> str:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        client = self._client or httpx
        resp = client.post(self.endpoint, json=body, headers=headers, timeout=_remaining_timeout(self.retry))
        resp.raise_for_status()
        content = resp.json()["choices"][0]["message"]["content"]
        if not isinstance(content, str):
            raise TypeError(f"completion content is {type(content).__name__}, not str")
        return content

    def complete(self, prompt: str, **params: Any) -> str:
        body = self.build_request(prompt, **params)
        return self.retry.call(lambda: self._post(body), "completion request")


class HttpRewardService:
    def __init__(self, endpoint: str, retry: RetryPolicy | None = None, client: httpx.Client | None = None) -> None:
        self.endpoint = endpoint
        self.retry = retry or RetryPolicy()
        self._client = client
        self.identity = f"http:{endpoint}"

    def _post(self, query: str, response: str) -> Any:
        client = self._client or httpx
        resp = client.post(
            self.endpoint, json={"query": query, "response": response}, timeout=_remaining_timeout(self.retry)
        )
        resp.raise_for_status()
        return resp.json()

    def score(self, query: str, response: str, reference: str | None = None) -> float:
        payload = self.retry.call(lambda: self._post(query, response), "reward request")
        return parse_score(payload)


def parse_score(payload: Any) -> float:
    try:
        value = payload["score"]
    except (KeyError, TypeError):
        raise ScoringError(f"reward payload has no score: {payload!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ScoringError(f"non-numeric score in reward payload: {payload!r}")
    return float(value)


def jaccard(a: set[str], b: set[str]) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


class StubRewardService:
    """Scores ``5 * J - 1`` where J is the token-set Jaccard similarity to the reference."""

    identity = "stub-reward:jaccard"

    def score(self, query: str, response: str, reference: str | None = None) -> float:
        if reference is None:
            raise ScoringError("stub reward service needs the instance reference")
        return 5.0 * jaccard(set(tokenize(response)), set(tokenize(reference))) - 1.0


def _digest(seed: int, *parts: str) -> int:
    h = hashlib.sha256(str(seed).encode())
    for part in parts:
        h.update(b"\x00" + part.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


class StubCompletionService:
    """Deterministic offline stand-in for the completion service.

    Rollouts echo ``"STUB:" + query``. Reason prompts get a letter chosen by
    hashing the seed with the pair. Revisions are mechanical edits of
    Response 1 toward Response 2: A overwrites positions, B appends missing
    reference tokens, C returns the reference. Decoding parameters are
    accepted and ignored.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.identity = f"stub-completion:seed={seed}"

    def complete(self, prompt: str, **params: Any) -> str:
        kind, fields = prompts.parse_prompt(prompt)
        if kind == "rollout":
            return "STUB:" + fields["query"]
        if kind == "annotate":
            return self._annotate(fields["original"], fields["better"])
        initial, reference = tokenize(fields["initial"]), tokenize(fields["reference"])
        if kind == "reason":
            return "ABCD"[_digest(self.seed, fields["query"], fields["initial"]) % 4]
        if kind == "revise-A":
            out = [reference[i] if i < len(reference) else tok for i, tok in enumerate(initial)]
            return detokenize(out) or detokenize(reference)
        if kind == "revise-B":
            present = set(initial)
            return detokenize(initial + [tok for tok in reference if tok not in present])
        return detokenize(reference)

    def _annotate(self, original: str, better: str) -> str:
        seen = set(tokenize(original))
        pairs = []
        for tok in dict.fromkeys(tokenize(better)):
            if tok not in seen:
                pairs.append((tok, 1 + _digest(self.seed, tok) % 5))
        return repr(pairs)
