"""Step generation against an OpenAI-compatible chat-completions endpoint."""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Optional

import httpx
import numpy as np

from pgts.stepgen.base import (
    DEFAULT_ANSWER_MARKER,
    GenerationCost,
    GenerationError,
    StepProposal,
    TaskInstance,
    detect_final,
    split_steps,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "PGTS_API_KEY"

SYSTEM_PROMPT = (
    "Solve the problem step by step. Write exactly one new sentence that "
    "continues the reasoning. When you know the result, write "
    "'{marker} <answer>.'"
)


@dataclass
class LLMConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    embedding_model: str = "default"
    temperature: float = 0.6
    top_p: float = 0.9
    max_tokens: int = 96
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_concurrency: int = 8
    feature_dim: int = 32
    answer_marker: str = DEFAULT_ANSWER_MARKER
    projection_seed: int = 0


@dataclass
class Completion:
    text: str
    token_logprobs: list[tuple[str, float]]
    completion_tokens: int


class LLMClient:
    """Thin chat/embeddings client with bounded concurrency and retry."""

    def __init__(self, config: LLMConfig, transport: Optional[httpx.BaseTransport] = None,
                 api_key: Optional[str] = None, sleep=time.sleep):
        self.config = config
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._sleep = sleep

    def close(self) -> None:
        self._http.close()

    def _post(self, route: str, payload: dict, parse) -> Any:
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._http.post(route, json=payload)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise GenerationError(f"{route}: HTTP {resp.status_code}")
                if resp.status_code >= 400:
                    # client errors will not improve on retry
                    raise _Fatal(f"{route}: HTTP {resp.status_code}: {resp.text[:200]}")
                return parse(resp.json())
            except _Fatal as exc:
                raise GenerationError(str(exc)) from None
            except (httpx.TransportError, GenerationError, ValueError, KeyError, TypeError, IndexError) as exc:
                last_exc = exc
                logger.warning("%s attempt %d failed: %s", route, attempt + 1, exc)
        raise GenerationError(f"{route} failed after {self.config.max_retries + 1} attempts: {last_exc}")

    def complete(self, messages: list[dict]) -> Completion:
        payload = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens,
            "logprobs": True,
        }
        return self._post("/chat/completions", payload, _parse_completion)

    def embed(self, text: str) -> np.ndarray:
        payload = {"model": self.config.embedding_model, "input": text}

        def parse(body):
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
            if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
                raise ValueError("malformed embedding")
            return vec

        return self._post("/embeddings", payload, parse)


class _Fatal(Exception):
    pass


def _parse_completion(body: dict) -> Completion:
    choice = body["choices"][0]
    text = choice["message"]["content"]
    if not isinstance(text, str):
        raise ValueError("completion content is not text")
    lp = choice.get("logprobs") or {}
    content = lp.get("content")
    if not content:
        raise GenerationError("response carries no token logprobs")
    tokens = [(str(t["token"]), float(t["logprob"])) for t in content]
    usage = body.get("usage") or {}
    return Completion(text, tokens, int(usage.get("completion_tokens", len(tokens))))


def step_likelihood(logprobs: list[float]) -> float:
    """Geometric-mean token probability."""
    if not logprobs:
        raise GenerationError("no logprobs for step")
    return math.exp(sum(logprobs) / len(logprobs))


def first_sentence_logprobs(text: str, tokens: list[tuple[str, float]]) -> tuple[str, list[float]]:
    """Leading sentence of ``text`` and the logprobs of the tokens that produce it."""
    steps = split_steps(text)
    if not steps:
        raise GenerationError("empty completion")
    sentence = steps[0]
    end = text.find(sentence) + len(sentence)
    picked, pos = [], 0
    for tok, lp in tokens:
        if pos >= end:
            break
        picked.append(lp)
        pos += len(tok)
    return sentence, picked or [lp for _, lp in tokens]


class LLMSession:
    def __init__(self, task: TaskInstance, client: LLMClient, projection: Optional[np.ndarray],
                 config: LLMConfig):
        self.task = task
        self.client = client
        self.config = config
        self._projection = projection
        self._lock = threading.Lock()
        self.cost = GenerationCost()

    def _features(self, text: str) -> np.ndarray:
        vec = self.client.embed(text)
        F = self.config.feature_dim
        if self._projection is None or self._projection.shape[0] != vec.shape[0]:
            rng = np.random.default_rng(self.config.projection_seed)
            self._projection = rng.standard_normal((vec.shape[0], F)) / math.sqrt(F)
        return vec @ self._projection

    def root_features(self) -> np.ndarray:
        return self._features(self.task.prompt)

    def propose_step(self, path: list[str], sibling_index: int) -> StepProposal:
        so_far = " ".join(path[1:])
        messages = [
            {"role": "system", "content": SYSTEM_PROMPT.format(marker=self.config.answer_marker)},
            {"role": "user", "content": path[0]},
        ]
        if so_far:
            messages.append({"role": "assistant", "content": so_far})
        comp = self.client.complete(messages)
        sentence, lps = first_sentence_logprobs(comp.text, comp.token_logprobs)
        feats = self._features(" ".join(path + [sentence]))
        final = detect_final(sentence, self.config.answer_marker) is not None
        with self._lock:
            self.cost.proposals += 1
            self.cost.tokens += comp.completion_tokens
        return StepProposal(sentence, feats, step_likelihood(lps), final)

    def extract_answer(self, content: str) -> Optional[str]:
        return detect_final(content, self.config.answer_marker)


class LLMGenerator:
    def __init__(self, config: LLMConfig, client: Optional[LLMClient] = None):
        self.config = config
        self.feature_dim = config.feature_dim
        self.client = client or LLMClient(config)
        self._projection: Optional[np.ndarray] = None

    def session(self, task: TaskInstance) -> LLMSession:
        return LLMSession(task, self.client, self._projection, self.config)
