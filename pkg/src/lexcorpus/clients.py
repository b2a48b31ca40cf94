"""Text-generation and judging clients.

The real pipeline calls a hosted model over HTTP for dialogue synthesis and
response judging; tests and offline runs use the deterministic stub
implementations. Both sides share the same small request/response surface.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Dict, Optional, Protocol

import requests

JUDGE_CRITERIA = ("factual_accuracy", "relevance", "logical_coherence")


class ClientError(Exception):
    """A generation or judging request failed after retries."""


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    timeout_s: float = 30.0
    retries: int = 2
    api_key_env: str = "LEXCORPUS_API_KEY"

    @classmethod
    def from_config(cls, obj: dict) -> "ClientConfig":
        return cls(endpoint=obj.get("endpoint", ""), model=obj.get("model", ""),
                   temperature=float(obj.get("temperature", 0.0)),
                   timeout_s=float(obj.get("timeout_s", 30.0)),
                   retries=int(obj.get("retries", 2)),
                   api_key_env=obj.get("api_key_env", "LEXCORPUS_API_KEY"))


class GeneratorClient(Protocol):
    def generate(self, prompt: str) -> str: ...


class JudgeClient(Protocol):
    def score(self, prompt: str, response: str) -> Dict[str, float]: ...


class HttpGeneratorClient:
    """POSTs {model, prompt, temperature} to the configured endpoint."""

    def __init__(self, config: ClientConfig):
        self.config = config

    def _headers(self) -> Dict[str, str]:
        key = os.environ.get(self.config.api_key_env, "")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def generate(self, prompt: str) -> str:
        payload = {"model": self.config.model, "prompt": prompt,
                   "temperature": self.config.temperature}
        last: Optional[Exception] = None
        for _ in range(self.config.retries + 1):
            try:
                resp = requests.post(self.config.endpoint, json=payload,
                                     headers=self._headers(), timeout=self.config.timeout_s)
                resp.raise_for_status()
                return resp.json()["text"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
        raise ClientError(f"generation failed: {last}")


class HttpJudgeClient(HttpGeneratorClient):
    def score(self, prompt: str, response: str) -> Dict[str, float]:
        payload = {"model": self.config.model, "prompt": prompt, "response": response,
                   "criteria": list(JUDGE_CRITERIA)}
        last: Optional[Exception] = None
        for _ in range(self.config.retries + 1):
            try:
                resp = requests.post(self.config.endpoint, json=payload,
                                     headers=self._headers(), timeout=self.config.timeout_s)
                resp.raise_for_status()
                scores = resp.json()["scores"]
                return {c: float(scores[c]) for c in JUDGE_CRITERIA}
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
        raise ClientError(f"judging failed: {last}")


class StubGenerator:
    """Deterministic template-filling generator for offline runs and tests.

    Echoes enough of the prompt that content checks (e.g. metadata mention)
    are possible without a model.
    """

    def generate(self, prompt: str) -> str:
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:8]
        return f"{prompt.strip()} [stub:{digest}]"


class StubJudge:
    """Deterministic judge: hash-derived per-criterion scores in [0, 1]."""

    def score(self, prompt: str, response: str) -> Dict[str, float]:
        out = {}
        for criterion in JUDGE_CRITERIA:
            h = hashlib.sha256(f"{criterion}\x00{prompt}\x00{response}".encode()).digest()
            out[criterion] = int.from_bytes(h[:4], "big") / 0xFFFFFFFF
        return out
