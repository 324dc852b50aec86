"""
Completion backends: an OpenAI-compatible HTTP completions client and a
deterministic memorizing mock used as the test oracle.
"""
import os
import re
import time
import logging
import threading
from enum import Enum
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Optional, Tuple

import numpy as np
import requests

from src.errors import BackendTimeout, ConfigError, RateLimitedError, UpstreamError
from src.utils import round_half_up

logger = logging.getLogger(__name__)

API_KEY_ENV = 'LEAKPROBE_API_KEY'
COMPLETIONS_PATH = '/v1/completions'
MOCK_FILLER_TEXT = ("I am not sure what you are asking for. Could you share a little more detail "
                    "so that I can help with the request?")
WORDS_PER_TOKEN = (3, 4)

_WORD = re.compile(r'\S+')


class BackendKind(str, Enum):
    HTTP = 'http'
    MOCK_MEMORIZING = 'mock'


class BackendRole(str, Enum):
    FINE_TUNED = 'fine_tuned'
    BASE = 'base'


@dataclass(frozen=True)
class GenerationConfig:
    """
    Per-query generation settings. When `temperature` is None each query draws
    its temperature uniformly from `temperature_range` with a generator keyed
    on (seed, request_index).
    """
    max_tokens: int = 256
    temperature: Optional[float] = None
    temperature_range: Tuple[float, float] = (0.5, 1.0)
    stop: Optional[Tuple[str, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ConfigError('InvalidGenerationConfig', "max_tokens must be at least 1", max_tokens=self.max_tokens)
        low, high = self.temperature_range
        if not 0 <= low <= high <= 2:
            raise ConfigError('InvalidGenerationConfig', "temperature range must satisfy 0 <= low <= high <= 2",
                              temperature_range=self.temperature_range)
        if self.temperature is not None and not 0 <= self.temperature <= 2:
            raise ConfigError('InvalidGenerationConfig', "temperature must lie in [0, 2]", temperature=self.temperature)
        if self.seed < 0:
            raise ConfigError('InvalidGenerationConfig', "seed must be non-negative", seed=self.seed)
        if self.stop is not None:
            object.__setattr__(self, 'stop', tuple(self.stop))
        object.__setattr__(self, 'temperature_range', (float(low), float(high)))

    def temperature_for(self, request_index):
        if self.temperature is not None:
            return float(self.temperature)
        low, high = self.temperature_range
        rng = np.random.default_rng([self.seed, request_index])
        return round(float(rng.uniform(low, high)), 6)

    def snapshot(self, request_index):
        """Settings actually used for one request (recorded with the generation)."""
        return {'max_tokens': self.max_tokens, 'temperature': self.temperature_for(request_index),
                'stop': list(self.stop) if self.stop else None}

    def to_dict(self):
        data = asdict(self)
        data['temperature_range'] = list(self.temperature_range)
        data['stop'] = list(self.stop) if self.stop else None
        return data


@dataclass(frozen=True)
class MockParams:
    corpus: Tuple = ()
    leak_rate: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind
    role: BackendRole = BackendRole.FINE_TUNED
    endpoint: Optional[str] = None
    model_id: Optional[str] = None
    mock: Optional[MockParams] = None
    max_in_flight: int = 4
    retry_budget: int = 5
    timeout: float = 60.0
    backoff_base: float = 1.0
    backoff_max: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', BackendKind(self.kind))
        object.__setattr__(self, 'role', BackendRole(self.role))
        if self.kind is BackendKind.HTTP:
            if not self.endpoint or not self.model_id or self.mock is not None:
                raise ConfigError('InvalidBackend', "http backends need endpoint and model_id and no mock parameters")
        elif self.mock is None or self.endpoint is not None or self.model_id is not None:
            raise ConfigError('InvalidBackend', "mock backends need mock parameters only")
        if self.max_in_flight < 1 or self.retry_budget < 0:
            raise ConfigError('InvalidBackend', "max_in_flight must be >= 1 and retry_budget >= 0")

    def to_manifest(self):
        """Descriptor fields safe to persist (no secrets, corpus summarized)."""
        data = {'kind': self.kind.value, 'role': self.role.value}
        if self.kind is BackendKind.HTTP:
            data.update(endpoint=self.endpoint, model_id=self.model_id, max_in_flight=self.max_in_flight,
                        retry_budget=self.retry_budget, timeout=self.timeout)
        else:
            data.update(leak_rate=self.mock.leak_rate, seed=self.mock.seed,
                        corpus_ids=[record.id for record in self.mock.corpus])
        return data


@dataclass(frozen=True)
class GenerationRecord:
    request_index: int
    prompt: str
    completion: str
    backend_role: BackendRole
    config: dict = field(default_factory=dict)
    timestamp: Optional[str] = None
    prompt_kind: str = 'snippet'
    subject_index: Optional[int] = None
    error: Optional[str] = None

    @property
    def failed(self):
        return self.error is not None

    def to_dict(self):
        return {'request_index': self.request_index, 'prompt': self.prompt, 'completion': self.completion,
                'backend_role': self.backend_role.value, 'config': self.config, 'timestamp': self.timestamp,
                'prompt_kind': self.prompt_kind, 'subject_index': self.subject_index, 'error': self.error}

    @classmethod
    def from_dict(cls, row):
        return cls(request_index=int(row['request_index']), prompt=row['prompt'], completion=row['completion'],
                   backend_role=BackendRole(row['backend_role']), config=row.get('config') or {},
                   timestamp=row.get('timestamp'), prompt_kind=row.get('prompt_kind', 'snippet'),
                   subject_index=row.get('subject_index'), error=row.get('error'))


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------

class HttpCompletionClient:
    """
    POSTs {endpoint}/v1/completions. Safe for concurrent use: each thread gets
    its own requests.Session and a semaphore bounds requests in flight.
    """

    def __init__(self, descriptor, api_key, sleep=time.sleep):
        if not api_key:
            raise ConfigError('MissingApiKey', f"{API_KEY_ENV} is not set", backend=descriptor.role.value)
        self.descriptor = descriptor
        self.url = descriptor.endpoint.rstrip('/') + COMPLETIONS_PATH
        self.headers = {'Authorization': f"Bearer {api_key}", 'Content-Type': 'application/json'}
        self.sleep = sleep
        self.in_flight = threading.BoundedSemaphore(descriptor.max_in_flight)
        self._local = threading.local()
        self._sessions = []
        self._lock = threading.Lock()

    @property
    def session(self):
        session = getattr(self._local, 'session', None)
        if session is None:
            session = self._local.session = requests.Session()
            with self._lock:
                self._sessions.append(session)
        return session

    def payload(self, prompt, config, request_index):
        payload = {'model': self.descriptor.model_id, 'prompt': prompt, 'max_tokens': config.max_tokens,
                   'temperature': config.temperature_for(request_index)}
        if config.stop:
            payload['stop'] = list(config.stop)
        return payload

    def complete(self, prompt, config, request_index=0):
        payload = self.payload(prompt, config, request_index)
        attempts = 1 + self.descriptor.retry_budget
        delay = 0.0
        last_error = None
        for attempt in range(attempts):
            with self.in_flight:
                try:
                    response = self.session.post(self.url, headers=self.headers, json=payload,
                                                 timeout=self.descriptor.timeout)
                except requests.Timeout as e:
                    logger.error(f"Request {request_index} timed out after {self.descriptor.timeout}s")
                    raise BackendTimeout(str(e), request_index=request_index) from e
                except requests.RequestException as e:
                    response = None
                    last_error = UpstreamError('ConnectionFailed', str(e), request_index=request_index)

            if response is not None:
                if response.status_code == 200:
                    return self.parse(response, request_index)
                if response.status_code in (401, 403):
                    logger.error(f"Authentication failed ({response.status_code}) for {self.url}")
                    raise ConfigError('AuthFailed', "endpoint rejected the API key", status=response.status_code)
                if response.status_code == 429:
                    last_error = RateLimitedError(response.text[:200], status=429, request_index=request_index)
                elif response.status_code >= 500:
                    last_error = UpstreamError('ServerError', response.text[:200], status=response.status_code,
                                               request_index=request_index)
                else:
                    logger.error(f"Error {response.status_code}: {response.text}")
                    raise UpstreamError('BadRequest', response.text[:200], status=response.status_code,
                                        request_index=request_index)

            if attempt + 1 >= attempts:
                break
            delay = self.next_delay(attempt, delay, response)
            logger.warning(f"Request {request_index} attempt {attempt + 1}/{attempts} failed "
                           f"({last_error.kind}); retrying in {delay:.2f}s")
            self.sleep(delay)

        logger.error(f"Request {request_index} failed after {attempts} attempts: {last_error}")
        raise last_error

    def next_delay(self, attempt, previous, response):
        """Exponential backoff, raised to Retry-After when given, never shorter than the previous delay."""
        delay = min(self.descriptor.backoff_max, self.descriptor.backoff_base * (2 ** attempt))
        retry_after = response.headers.get('Retry-After') if response is not None else None
        if retry_after:
            try:
                delay = max(delay, min(float(retry_after), self.descriptor.backoff_max))
            except ValueError:
                pass
        return max(delay, previous)

    @staticmethod
    def parse(response, request_index):
        try:
            return response.json()['choices'][0]['text']
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise UpstreamError('MalformedResponse', "response has no choices[0].text",
                                request_index=request_index) from e

    def close(self):
        with self._lock:
            sessions, self._sessions = self._sessions, []
        for session in sessions:
            session.close()


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

class MockMemorizingModel:
    """
    Query i leaks, with probability leak_rate, a verbatim span of record
    (i mod |corpus|); otherwise it returns the fixed filler text. Randomness is
    keyed on (seed, i) only, so concurrent and serial runs agree.
    """

    def __init__(self, params):
        self.corpus = params.corpus
        self.leak_rate = params.leak_rate
        self.seed = params.seed

    def complete(self, prompt, config, request_index=0):
        rng = np.random.default_rng([self.seed, request_index])
        if not rng.random() < self.leak_rate:
            return MOCK_FILLER_TEXT
        record = self.corpus[request_index % len(self.corpus)]
        return memorized_span(memorized_text(record), config.max_tokens, rng) or MOCK_FILLER_TEXT

    def close(self):
        pass


def memorized_text(record):
    """Everything a model fine-tuned on the record saw: subject line, then body."""
    subject = record.subject.strip()
    return f"{subject}\n{record.body}" if subject else record.body


def memorized_span(text, max_words, rng):
    """The whole text when it fits in max_words, else a seeded window of max_words words."""
    words = list(_WORD.finditer(text))
    if not words:
        return ''
    first = 0
    if len(words) > max_words:
        first = int(rng.integers(0, len(words) - max_words + 1))
    last = min(len(words), first + max_words) - 1
    return text[words[first].start():words[last].end()]


def mock_memorizing_backend(corpus, leak_rate, seed, role=BackendRole.FINE_TUNED):
    if not corpus:
        raise ConfigError('EmptyCorpus', "the mock backend needs at least one training email")
    if seed < 0:
        raise ConfigError('InvalidSeed', "mock seed must be non-negative", seed=seed)
    if not 0.0 <= leak_rate <= 1.0:
        raise ConfigError('InvalidLeakRate', "leak_rate must lie in [0, 1]", leak_rate=leak_rate)
    return BackendDescriptor(kind=BackendKind.MOCK_MEMORIZING, role=role,
                             mock=MockParams(corpus=tuple(corpus), leak_rate=float(leak_rate), seed=int(seed)))


def http_backend(endpoint, model_id, role=BackendRole.FINE_TUNED, **options):
    return BackendDescriptor(kind=BackendKind.HTTP, role=role, endpoint=endpoint, model_id=model_id, **options)


def resolve_api_key(explicit=None):
    return os.getenv(API_KEY_ENV) or explicit


def open_backend(descriptor, api_key=None, sleep=time.sleep):
    """Client object exposing complete(prompt, config, request_index)."""
    if descriptor.kind is BackendKind.HTTP:
        return HttpCompletionClient(descriptor, resolve_api_key(api_key), sleep=sleep)
    return MockMemorizingModel(descriptor.mock)


def complete(backend, prompt, config, request_index=0, api_key=None):
    client = open_backend(backend, api_key)
    try:
        return client.complete(prompt, config, request_index)
    finally:
        client.close()


def utc_timestamp():
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


# ---------------------------------------------------------------------------
# Budget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenBudget:
    max_tokens_total: int
    approx_words: int


def estimate_token_budget(n_queries, config):
    """Upper bound on generated tokens and its word equivalent (one token is about 3/4 of a word)."""
    if n_queries < 0:
        raise ConfigError('InvalidBudget', "n_queries must be non-negative", n_queries=n_queries)
    total = n_queries * config.max_tokens
    numerator, denominator = WORDS_PER_TOKEN
    return TokenBudget(max_tokens_total=total, approx_words=round_half_up(total * numerator, denominator))


