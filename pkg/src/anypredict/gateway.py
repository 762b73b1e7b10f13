"""Completion gateway: bit-exact prompt assembly plus live / replay / mock backends.

The live backend speaks the common chat-completions wire protocol; the replay
backend serves byte-identical responses from a JSON Lines cache keyed by a
request digest; the mock backend is a pure function of the request, rendering
descriptions, paraphrases, corrections, and QA answers from fixed templates so
full-pipeline tests run with zero network and predictable audit outcomes.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import requests

from .errors import (
    CacheMiss,
    ConfigError,
    GatewayError,
    GatewayTimeout,
    MissingCorrectionPayload,
)

MODES = ("describe", "paraphrase5", "correct", "qa_categorical", "qa_binary")

# Prompt templates. Whitespace, including the trailing spaces, is load-bearing:
# rendered prompts are cache keys and are pinned byte-for-byte by golden tests.
SCHEMA_INTRO = "\nHere is the schema definition of the table: \n\n"
SAMPLE_INTRO = " \n\nThis is a sample from the table:\n\n"
DESCRIBE_SUFFIX = "\n\nPlease describe the sample using natural language.\n"
PARAPHRASE5_SUFFIX = "\n\nPlease paraphrase the sample in 5 different ways in natural language.\n"
CORRECT_INTRO = " \n\nPlease paraphrase the following in natural language.\n\n"
QA_VALUE_SUFFIX = "\n\nWhat is the value of {feature_name}?\n"
QA_PRESENCE_SUFFIX = "\n\nIs {feature_name} present in the above paragraph? (a) yes (b) no. \n"

# Diverse paraphrases, deterministic audit answers.
DEFAULT_TEMPERATURE = {
    "describe": 0.7,
    "paraphrase5": 0.7,
    "correct": 0.7,
    "qa_categorical": 0.0,
    "qa_binary": 0.0,
}


@dataclass(frozen=True)
class PromptBundle:
    """The (prefix, body, suffix) triple fed to the completion backend."""

    prefix: str
    body: str
    suffix: str
    mode: str

    def render(self) -> str:
        return f"{self.prefix}{self.body}{self.suffix}"


@dataclass(frozen=True)
class CompletionRequest:
    rendered_prompt: str
    temperature: float
    max_tokens: int
    seed_hint: int | None = None

    def __post_init__(self):
        if not self.rendered_prompt:
            raise ValueError("rendered_prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class GatewayConfig:
    """Backend selection plus transport knobs.

    ``live`` requires ``endpoint_url`` (bearer token read from the
    ANYPRED_API_KEY environment variable); ``replay`` requires ``cache_path``.
    Any non-replay backend with a ``cache_path`` records its traffic, which is
    how replay caches are produced.
    """

    backend: str = "mock"
    endpoint_url: str | None = None
    cache_path: str | None = None
    request_timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float | None = None
    model: str = "gpt-3.5-turbo-0301"
    mock_variant: str = "faithful"
    max_tokens: int = 512

    def __post_init__(self):
        if self.backend not in ("live", "replay", "mock"):
            raise ConfigError(f"unknown gateway backend {self.backend!r}")
        if self.backend == "live" and not self.endpoint_url:
            raise ConfigError("live backend requires endpoint_url")
        if self.backend == "replay" and not self.cache_path:
            raise ConfigError("replay backend requires cache_path")
        if self.mock_variant not in ("faithful", "lossy"):
            raise ConfigError(f"unknown mock variant {self.mock_variant!r}")


def build_prompt(
    mode: str,
    schema_definition: str,
    body: str,
    extra: str | None = None,
) -> PromptBundle:
    """Instantiate the prompt template for ``mode``.

    ``extra`` carries the mode-specific slot: the missed-feature linearization
    for ``correct`` and the probed feature name for the QA modes.
    """
    if mode == "describe":
        prefix = f"{SCHEMA_INTRO}{schema_definition}{SAMPLE_INTRO}"
        return PromptBundle(prefix, body, DESCRIBE_SUFFIX, mode)
    if mode == "paraphrase5":
        prefix = f"{SCHEMA_INTRO}{schema_definition}{SAMPLE_INTRO}"
        return PromptBundle(prefix, body, PARAPHRASE5_SUFFIX, mode)
    if mode == "correct":
        if extra is None:
            raise MissingCorrectionPayload(
                "correct mode needs the linearization of missed features"
            )
        prefix = f"{SCHEMA_INTRO}{schema_definition}{CORRECT_INTRO}"
        return PromptBundle(prefix, f"{body} + {extra}", "\n", mode)
    if mode == "qa_categorical":
        if extra is None:
            raise ValueError("qa_categorical needs the feature name")
        return PromptBundle("\n", body, QA_VALUE_SUFFIX.format(feature_name=extra), mode)
    if mode == "qa_binary":
        if extra is None:
            raise ValueError("qa_binary needs the feature name")
        return PromptBundle("\n", body, QA_PRESENCE_SUFFIX.format(feature_name=extra), mode)
    raise ValueError(f"unknown prompt mode {mode!r}")


def request_for(
    bundle: PromptBundle,
    max_tokens: int = 512,
    seed_hint: int | None = None,
) -> CompletionRequest:
    """Completion request for a bundle, with the mode's default temperature."""
    return CompletionRequest(
        rendered_prompt=bundle.render(),
        temperature=DEFAULT_TEMPERATURE[bundle.mode],
        max_tokens=max_tokens,
        seed_hint=seed_hint,
    )


def request_digest(request: CompletionRequest) -> str:
    """Cache key: sha256 over (rendered_prompt, temperature, max_tokens)."""
    payload = json.dumps(
        [request.rendered_prompt, request.temperature, request.max_tokens],
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# -- deterministic mock ----------------------------------------------------
# The describe contract renders each "; " segment as "The {name} is {value}."
# (bare binary segments as "The patient has {name}."). The five paraphrase
# variants rotate segment order and cycle sentence templates, so they are
# pairwise distinct even for single-segment rows. QA answers are recovered by
# scanning the provided description for the feature name. The lossy variant
# drops the last segment of describe/paraphrase bodies (corrections stay
# faithful), which is what exercises the correction loop.

_VALUE_SENTENCES = (
    "The {name} is {value}.",
    "The {name} equals {value}.",
    "The {name} value is {value}.",
    "For this sample, the {name} is {value}.",
    "The recorded {name} is {value}.",
)
_PRESENCE_SENTENCES = (
    "The patient has {name}.",
    "There is {name}.",
    "Notably, the patient has {name}.",
    "For this sample, {name} is present.",
    "The record shows {name}.",
)

_SCHEMA_LINE_RE = re.compile(
    r"^(?P<name>.+)\((?:categorical|binary|numerical|text)\): ", re.MULTILINE
)
_QA_VALUE_RE = re.compile(r"\n\nWhat is the value of (?P<name>.+)\?\n$", re.DOTALL)
_QA_PRESENCE_RE = re.compile(
    r"\n\nIs (?P<name>.+) present in the above paragraph\? \(a\) yes \(b\) no\. \n$",
    re.DOTALL,
)
_SENTENCE_SPLIT_RE = re.compile(r"(?<=\.)\s+")
_ANSWER_FILLERS = {"is", "equals", "was", "value", "the"}


def _schema_names(prompt_head: str) -> list[str]:
    return _SCHEMA_LINE_RE.findall(prompt_head)


def _split_segments(body: str, names: list[str]) -> list[tuple[str, str | None]]:
    """Map each linearized segment to (column name, value-or-None)."""
    by_length = sorted(names, key=len, reverse=True)
    out: list[tuple[str, str | None]] = []
    for segment in body.split("; "):
        if not segment:
            continue
        matched = False
        for name in by_length:
            if segment == name:
                out.append((name, None))
                matched = True
                break
            if segment.startswith(name + " "):
                out.append((name, segment[len(name) + 1 :]))
                matched = True
                break
        if not matched:
            out.append((segment, None))
    return out


def _segment_sentence(name: str, value: str | None, variant: int) -> str:
    if value is None:
        return _PRESENCE_SENTENCES[variant].format(name=name)
    return _VALUE_SENTENCES[variant].format(name=name, value=value)


def _describe_segments(segments: list[tuple[str, str | None]], variant: int = 0) -> str:
    if not segments:
        return "The sample has no recorded features."
    return " ".join(_segment_sentence(n, v, variant) for n, v in segments)


def _find_feature(text: str, feature: str) -> re.Match | None:
    return re.search(rf"(?<!\w){re.escape(feature)}(?!\w)", text, re.IGNORECASE)


def _answer_value(description: str, feature: str) -> str:
    for sentence in _SENTENCE_SPLIT_RE.split(description):
        hit = _find_feature(sentence, feature)
        if hit is None:
            continue
        tokens = sentence[hit.end() :].replace(":", " ").split()
        while tokens and tokens[0].lower() in _ANSWER_FILLERS:
            tokens.pop(0)
        if tokens:
            answer = " ".join(tokens)
            return answer[:-1] if answer.endswith(".") else answer
    return "unknown"


def _answer_presence(description: str, feature: str) -> str:
    return "yes" if _find_feature(description, feature) else "no"


def mock_completion(prompt: str, lossy: bool = False) -> str:
    """Deterministic completion for a rendered prompt (pure function)."""
    qa_value = _QA_VALUE_RE.search(prompt)
    if qa_value:
        body = prompt[1 : qa_value.start()]
        return _answer_value(body, qa_value.group("name"))

    qa_presence = _QA_PRESENCE_RE.search(prompt)
    if qa_presence:
        body = prompt[1 : qa_presence.start()]
        return _answer_presence(body, qa_presence.group("name"))

    if prompt.endswith(DESCRIBE_SUFFIX) or prompt.endswith(PARAPHRASE5_SUFFIX):
        intro_at = prompt.find(SAMPLE_INTRO)
        if intro_at < 0:
            return "Unrecognized prompt."
        names = _schema_names(prompt[:intro_at])
        suffix = DESCRIBE_SUFFIX if prompt.endswith(DESCRIBE_SUFFIX) else PARAPHRASE5_SUFFIX
        body = prompt[intro_at + len(SAMPLE_INTRO) : len(prompt) - len(suffix)]
        segments = _split_segments(body, names)
        if lossy and len(segments) > 1:
            segments = segments[:-1]
        if suffix is DESCRIBE_SUFFIX:
            return _describe_segments(segments)
        lines = []
        for variant in range(5):
            rotated = segments[variant:] + segments[:variant] if segments else segments
            lines.append(f"{variant + 1}. {_describe_segments(rotated, variant)}")
        return "\n".join(lines)

    intro_at = prompt.find(CORRECT_INTRO)
    if intro_at >= 0:
        names = _schema_names(prompt[:intro_at])
        body = prompt[intro_at + len(CORRECT_INTRO) : -1]
        previous, _, missed_lin = body.rpartition(" + ")
        appended = _describe_segments(_split_segments(missed_lin, names))
        return f"{previous} {appended}".strip()

    return "Unrecognized prompt."


# -- transport ---------------------------------------------------------------


class _TokenBucket:
    """Blocking token bucket; serializes live dispatch at ``rate`` req/s."""

    def __init__(self, rate: float):
        self.rate = rate
        self.capacity = max(1.0, rate)
        self.tokens = self.capacity
        self.updated = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class Gateway:
    """A configured backend. ``complete`` is safe for concurrent callers."""

    def __init__(self, config: GatewayConfig):
        self.config = config
        self._cache_lock = threading.Lock()
        self._replay_cache: dict[str, str] | None = None
        self._bucket = _TokenBucket(config.rate_limit) if config.rate_limit else None

    # -- public API --------------------------------------------------------

    def complete(self, request: CompletionRequest) -> str:
        if self.config.backend == "mock":
            text = mock_completion(
                request.rendered_prompt, lossy=self.config.mock_variant == "lossy"
            )
            if self.config.cache_path:
                self._record(request, text)
            return text
        if self.config.backend == "replay":
            return self._replay(request)
        text = self._complete_live(request)
        if self.config.cache_path:
            self._record(request, text)
        return text

    def complete_bundle(self, bundle: PromptBundle, seed_hint: int | None = None) -> str:
        return self.complete(request_for(bundle, self.config.max_tokens, seed_hint))

    # -- cache ---------------------------------------------------------------

    def _record(self, request: CompletionRequest, response: str) -> None:
        entry = {
            "digest": request_digest(request),
            "request": {
                "rendered_prompt": request.rendered_prompt,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
                "seed_hint": request.seed_hint,
            },
            "response": response,
            "timestamp": time.time(),
        }
        line = (json.dumps(entry, ensure_ascii=False) + "\n").encode("utf-8")
        # One O_APPEND write per entry keeps concurrent appends untorn.
        fd = os.open(self.config.cache_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        try:
            os.write(fd, line)
        finally:
            os.close(fd)

    def _replay(self, request: CompletionRequest) -> str:
        with self._cache_lock:
            if self._replay_cache is None:
                self._replay_cache = load_cache(self.config.cache_path)
        digest = request_digest(request)
        try:
            return self._replay_cache[digest]
        except KeyError:
            raise CacheMiss(digest) from None

    # -- live ------------------------------------------------------------------

    def _complete_live(self, request: CompletionRequest) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed_hint is not None:
            payload["seed"] = request.seed_hint
        headers = {"Authorization": f"Bearer {os.environ.get('ANYPRED_API_KEY', '')}"}

        delay = 1.0
        timed_out = False
        last_status: int | str = 0
        last_body = ""
        for attempt in range(self.config.max_retries + 1):
            if self._bucket:
                self._bucket.acquire()
            try:
                resp = requests.post(
                    self.config.endpoint_url,
                    json=payload,
                    headers=headers,
                    timeout=self.config.request_timeout,
                )
            except requests.Timeout:
                timed_out = True
            except requests.RequestException as exc:
                timed_out = False
                last_status, last_body = "connection-error", str(exc)
            else:
                timed_out = False
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, ValueError) as exc:
                        raise GatewayError(200, f"malformed completion body: {exc}") from None
                last_status, last_body = resp.status_code, resp.text
                if resp.status_code != 429 and resp.status_code < 500:
                    raise GatewayError(last_status, last_body)
            if attempt < self.config.max_retries:
                time.sleep(delay)
                delay *= 2
        if timed_out:
            raise GatewayTimeout(
                f"no response within {self.config.request_timeout}s "
                f"after {self.config.max_retries} retries"
            )
        raise GatewayError(last_status, last_body)


def load_cache(cache_path: str | Path) -> dict[str, str]:
    """Load a record/replay cache file into a digest -> response map."""
    cache: dict[str, str] = {}
    path = Path(cache_path)
    if not path.exists():
        return cache
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            cache[entry["digest"]] = entry["response"]
    return cache


@lru_cache(maxsize=32)
def _gateway_for(config: GatewayConfig) -> Gateway:
    return Gateway(config)


def complete(request: CompletionRequest, config: GatewayConfig) -> str:
    """One-shot completion against ``config``'s backend."""
    return _gateway_for(config).complete(request)
