# poolforge/backends.py

"""
Text-generation backends.

Every backend takes a PromptPayload and returns one Generation (text plus token
usage). Implementations must be safe to call from several threads at once,
because the orchestrator fans calls out over a thread pool.

  - MockBackend:   offline and bit-reproducible; text comes from a keyed hash
  - GeminiBackend: google-generativeai SDK
  - HttpBackend:   any OpenAI-compatible /chat/completions endpoint
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

import requests

from poolforge.config import BackendKind, ProviderSecrets, RunConfig
from poolforge.core import STRATA_COUNT, ModelEntry, TokenUsage, UsageSource
from poolforge.errors import BackendError
from poolforge.log import get_logger
from poolforge.prompts import PromptPayload, render

logger = get_logger(__name__)

# whitespace tokens -> model tokens, used only where a backend reports nothing
PROXY_TOKENS_PER_WORD = 1.3


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text.split()) * PROXY_TOKENS_PER_WORD)


def estimate_usage(payload: PromptPayload, text: str) -> TokenUsage:
    return TokenUsage(
        prompt_tokens=estimate_tokens(payload.system_text) + estimate_tokens(payload.user_text),
        completion_tokens=estimate_tokens(text),
        source=UsageSource.PROXY_ESTIMATED,
    )


@dataclass(frozen=True)
class Generation:
    text: str
    usage: TokenUsage


class GenerationBackend(Protocol):
    name: str

    def generate(self, payload: PromptPayload) -> Generation: ...


def generate_with_retries(
    backend: GenerationBackend,
    payload: PromptPayload,
    max_attempts: int = 3,
    backoff_seconds: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> Generation:
    """Call the backend, retrying BackendErrors with exponential backoff."""
    for attempt in range(1, max_attempts + 1):
        try:
            return backend.generate(payload)
        except BackendError as e:
            if attempt == max_attempts:
                raise BackendError(
                    f"{backend.name}: call {payload.call_id} failed after {max_attempts} attempts: {e}"
                ) from e
            delay = backoff_seconds * 2 ** (attempt - 1)
            logger.warning("%s: attempt %d for %s failed (%s); retrying in %.1fs",
                           backend.name, attempt, payload.call_id, e, delay)
            sleep(delay)
    raise AssertionError("unreachable")


########################################
# MOCK
########################################

# words per mock output by output-token ceiling (stories, AUT, slogans)
_MOCK_SHAPES = {2048: (8, 12), 768: (1, 12), 512: (1, 5)}


class MockBackend:
    """
    Deterministic offline backend.

    The text of a call is derived from a keyed hash of (seed, model, call id,
    prompt bytes), so the same run always produces the same pools regardless
    of scheduling. Planning payloads get a well-formed five-strata JSON plan.
    Token usage is a whitespace-count proxy and is flagged as estimated.
    """

    def __init__(self, seed: int = 0, model_id: str = "mock"):
        self.name = f"mock:{model_id}"
        self.seed = seed
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()
        self._planning_system = render("planning_system.txt")

    def _digest(self, payload: PromptPayload, salt: str = "") -> str:
        key = f"{self.seed}|{self.model_id}|{payload.call_id}|{payload.digest()}|{salt}"
        return hashlib.sha256(key.encode("utf-8")).hexdigest()

    def _words(self, payload: PromptPayload, count: int) -> list[str]:
        words: list[str] = []
        block = 0
        while len(words) < count:
            digest = self._digest(payload, str(block))
            words.extend(digest[i : i + 6] for i in range(0, 60, 6))
            block += 1
        return words[:count]

    def _plan(self, payload: PromptPayload) -> str:
        tag = self._digest(payload)[:8]
        strata = [
            {
                "stratum_id": i,
                "name": f"direction {i} {tag}",
                "description": f"Responses exploring semantic direction {i} ({tag}).",
                "generation_instruction": f"Build the response around direction {i}.",
                "why_broad": f"Direction {i} admits many different responses.",
                "why_distinct": f"Direction {i} shares no central theme with the others.",
            }
            for i in range(1, STRATA_COUNT + 1)
        ]
        task_id = payload.call_id.split("/")[0] or "task"
        return json.dumps({"task_id": task_id, "strata": strata}, indent=2)

    def generate(self, payload: PromptPayload) -> Generation:
        with self._lock:
            self.calls += 1
        if payload.system_text == self._planning_system:
            text = self._plan(payload)
        else:
            sentences, per_sentence = _MOCK_SHAPES.get(payload.max_output_tokens, (1, 10))
            words = self._words(payload, sentences * per_sentence)
            text = " ".join(
                " ".join(words[i * per_sentence : (i + 1) * per_sentence]).capitalize() + "."
                for i in range(sentences)
            )
        return Generation(text, estimate_usage(payload, text))


########################################
# GEMINI
########################################


class GeminiBackend:
    def __init__(self, model_name: str, api_key: str | None):
        if not api_key:
            raise BackendError(
                "GEMINI_API_KEY is not set. "
                "Set it in your environment before running the code."
            )
        import google.generativeai as genai

        genai.configure(api_key=api_key)
        self._genai = genai
        self.name = f"gemini:{model_name}"
        self.model_name = model_name

    def generate(self, payload: PromptPayload) -> Generation:
        genai = self._genai
        model = genai.GenerativeModel(self.model_name, system_instruction=payload.system_text)
        try:
            response = model.generate_content(
                payload.user_text,
                generation_config=genai.GenerationConfig(
                    candidate_count=1,
                    temperature=payload.temperature,
                    max_output_tokens=payload.max_output_tokens,
                ),
            )
            text = response.text
        except Exception as e:
            raise BackendError(f"Gemini request failed: {e}") from e

        meta = getattr(response, "usage_metadata", None)
        if meta is None:
            return Generation(text, estimate_usage(payload, text))
        usage = TokenUsage(
            prompt_tokens=meta.prompt_token_count or 0,
            completion_tokens=meta.candidates_token_count or 0,
        )
        return Generation(text, usage)


########################################
# OPENAI-COMPATIBLE HTTP
########################################


class HttpBackend:
    def __init__(
        self,
        model_name: str,
        base_url: str,
        api_key: str | None,
        timeout_seconds: float = 120.0,
    ):
        if not api_key:
            raise BackendError("POOLFORGE_HTTP_API_KEY is not set.")
        self.name = f"http:{model_name}"
        self.model_name = model_name
        self._url = base_url.rstrip("/") + "/chat/completions"
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._timeout = timeout_seconds

    def generate(self, payload: PromptPayload) -> Generation:
        body = {
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": payload.system_text},
                {"role": "user", "content": payload.user_text},
            ],
            "n": 1,
            "temperature": payload.temperature,
            "max_tokens": payload.max_output_tokens,
        }
        try:
            response = requests.post(self._url, json=body, headers=self._headers, timeout=self._timeout)
            response.raise_for_status()
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (requests.RequestException, ValueError, KeyError, IndexError) as e:
            raise BackendError(f"HTTP request to {self._url} failed: {e}") from e

        usage = data.get("usage")
        if not usage:
            return Generation(text, estimate_usage(payload, text))
        return Generation(
            text,
            TokenUsage(
                prompt_tokens=int(usage.get("prompt_tokens") or 0),
                completion_tokens=int(usage.get("completion_tokens") or 0),
            ),
        )


def make_backend(
    model: ModelEntry, config: RunConfig, secrets: ProviderSecrets | None = None
) -> GenerationBackend:
    """
    Returns the backend for one manifest model.

    `backend.kind: mock` overrides every provider; otherwise the manifest's
    provider field decides.
    """
    if config.backend.kind == BackendKind.MOCK or model.provider == "mock":
        return MockBackend(seed=config.seeds.run, model_id=model.model_id)

    secrets = secrets or ProviderSecrets()
    if model.provider == "gemini":
        return GeminiBackend(model.model_name, secrets.gemini_api_key)
    if model.provider == "http":
        return HttpBackend(
            model.model_name,
            config.backend.http_base_url,
            secrets.http_api_key,
            config.backend.timeout_seconds,
        )
    raise BackendError(f"Unknown backend provider: {model.provider}")
