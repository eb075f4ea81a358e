"""Chat-completion access, prompt templates and strict parsing of model output.

Templates live in ``kgqagen/prompts`` as plain text so prompt drift shows up in diffs.
Two providers are available: ``HttpProvider`` for any OpenAI-compatible
``/chat/completions`` API, and ``ScriptedProvider`` replaying canned responses.
"""

import hashlib
import json
import logging
import re
import threading
import time
from collections import deque
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Protocol, TypeVar, Union

import httpx
from pydantic import ValidationError

from kgqagen.config import LlmConfig, get_api_key
from kgqagen.errors import FormatError, ProviderError, ScriptExhaustedError
from kgqagen.models import (
  ChatMessage,
  ChatRequest,
  Insufficient,
  QueryRevision,
  Subgraph,
  Sufficient,
  Triple,
)
from kgqagen.services.http import RetryingClient, RetryPolicy, Sleep, TokenBucket

logger = logging.getLogger(__name__)

T = TypeVar('T')
Outcome = Union[Insufficient, Sufficient]

FENCE_RE = re.compile(r'^```[A-Za-z0-9_-]*[ \t]*\n?(.*?)\n?[ \t]*```$', re.DOTALL)
CANDIDATE_RE = re.compile(r'(Q[0-9]+)\)?$')
JUDGE_RE = re.compile(r'^\W*(yes|no)\b', re.IGNORECASE)


# ============================================================================
# PROMPTS
# ============================================================================


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
  """Read a prompt template shipped with the package."""
  return (resources.files('kgqagen') / 'prompts' / f'{name}.txt').read_text(encoding='utf-8')


def _substitute(template: str, values: Dict[str, str]) -> str:
  # Single pass: substituted text is never scanned again for placeholders.
  pattern = re.compile(r'\{(' + '|'.join(re.escape(k) for k in values) + r')\}')
  return pattern.sub(lambda m: values[m.group(1)], template)


def format_triples(triples: List[Triple]) -> str:
  """JSON array of surface-form triples, one per line, in the given order."""
  lines = [f'  {json.dumps(t.surface, ensure_ascii=False)}' for t in triples]
  return '[\n' + ',\n'.join(lines) + '\n]'


def render_generator_prompt(subgraph: Subgraph) -> str:
  """Generator/sufficiency prompt for a subgraph.

  Raises:
      ValueError: If the subgraph has no triples
  """
  if not subgraph.triples:
    raise ValueError('cannot render a generator prompt for an empty subgraph')
  return _substitute(load_template('generator'), {'triples': format_triples(subgraph.triples)})


def render_validator_prompt(question: str, sparql: str) -> str:
  """Query-revision prompt.

  Raises:
      ValueError: If the question or the query is empty
  """
  if not question.strip():
    raise ValueError('question must not be empty')
  if not sparql.strip():
    raise ValueError('sparql must not be empty')
  return _substitute(load_template('revision'), {'question': question, 'sparql': sparql})


def render_judge_prompt(question: str, prediction: str, gold: str) -> str:
  return _substitute(
    load_template('judge'), {'question': question, 'prediction': prediction, 'gold': gold}
  )


# ============================================================================
# RESPONSE PARSING
# ============================================================================


def strip_fence(text: str) -> str:
  """Remove a single surrounding markdown code fence, if any."""
  stripped = text.strip()
  match = FENCE_RE.match(stripped)
  return match.group(1).strip() if match else stripped


def _load_object(text: str) -> dict:
  try:
    data = json.loads(strip_fence(text))
  except json.JSONDecodeError as e:
    raise FormatError(f'response is not valid JSON: {e}') from e
  if not isinstance(data, dict):
    raise FormatError(f'expected a JSON object, got {type(data).__name__}')
  return data


def _candidate_id(raw) -> str:
  if not isinstance(raw, str):
    raise FormatError(f'candidate must be a string, got {raw!r}')
  match = CANDIDATE_RE.search(raw.strip())
  if not match:
    raise FormatError(f'candidate is not an entity id: {raw!r}')
  return match.group(1)


def parse_generation_response(text: str) -> Outcome:
  """Parse the generator's JSON verdict.

  Raises:
      FormatError: Non-JSON output, missing keys, wrong shapes or empty lists
  """
  data = _load_object(text)
  sufficient = data.get('sufficient')

  if sufficient is False:
    raw = data.get('candidate')
    if not isinstance(raw, list) or not raw:
      raise FormatError('"candidate" must be a non-empty list when "sufficient" is false')
    candidates = list(dict.fromkeys(_candidate_id(item) for item in raw))
    return Insufficient(candidates=candidates)

  if sufficient is not True:
    raise FormatError('"sufficient" must be true or false')

  question = data.get('question')
  answers = data.get('answer')
  proof = data.get('proof')
  if not isinstance(question, str) or not question.strip():
    raise FormatError('"question" must be a non-empty string')
  if not isinstance(answers, list) or not answers:
    raise FormatError('"answer" must be a non-empty list')
  if not all(isinstance(a, str) and a.strip() for a in answers):
    raise FormatError('"answer" items must be non-empty strings')
  if not isinstance(proof, list) or not proof:
    raise FormatError('"proof" must be a non-empty list')
  for item in proof:
    if not isinstance(item, list) or len(item) != 3 or not all(isinstance(s, str) for s in item):
      raise FormatError(f'proof items must be 3-string arrays, got {item!r}')

  try:
    return Sufficient(question=question.strip(), answers=answers, proof=[tuple(p) for p in proof])
  except ValidationError as e:
    raise FormatError(str(e)) from e


def serialize_generation_outcome(outcome: Outcome) -> str:
  """Generator-contract JSON for an outcome (inverse of ``parse_generation_response``)."""
  if isinstance(outcome, Insufficient):
    data = {'sufficient': False, 'candidate': outcome.candidates}
  else:
    data = {
      'sufficient': True,
      'question': outcome.question,
      'answer': outcome.answers,
      'proof': [list(p) for p in outcome.proof],
    }
  return json.dumps(data, ensure_ascii=False, indent=2)


def parse_revision_response(text: str) -> QueryRevision:
  """Parse ``{"correct_sparql": "..."}``.

  Raises:
      FormatError: On anything but a single non-empty ``correct_sparql`` string
  """
  data = _load_object(text)
  if set(data) != {'correct_sparql'}:
    raise FormatError(f'expected the single key "correct_sparql", got {sorted(data)}')
  value = data['correct_sparql']
  if not isinstance(value, str) or not value.strip():
    raise FormatError('"correct_sparql" must be a non-empty string')
  return QueryRevision(correct_sparql=value.strip())


def parse_judge_response(text: str) -> bool:
  match = JUDGE_RE.match(strip_fence(text))
  if not match:
    raise FormatError(f'judge must answer yes or no, got {text[:40]!r}')
  return match.group(1).lower() == 'yes'


# ============================================================================
# PROVIDERS
# ============================================================================


class Provider(Protocol):
  """Anything that turns a chat request into assistant text."""

  def complete(self, request: ChatRequest) -> str: ...


class HttpProvider:
  """OpenAI-compatible chat-completion client with retries and rate limits."""

  def __init__(
    self,
    base_url: str,
    api_key: str,
    policy: RetryPolicy = RetryPolicy(),
    max_concurrency: int = 4,
    requests_per_minute: int = 0,
    timeout_s: float = 120.0,
    transport: Optional[httpx.BaseTransport] = None,
    sleep: Sleep = time.sleep,
  ):
    client = httpx.Client(
      base_url=base_url.rstrip('/'),
      timeout=timeout_s,
      headers={'Authorization': f'Bearer {api_key}'},
      transport=transport,
    )
    self.http = RetryingClient(
      client,
      policy=policy,
      max_in_flight=max_concurrency,
      rate_limiter=TokenBucket(requests_per_minute, sleep=sleep),
      sleep=sleep,
    )

  @classmethod
  def from_config(
    cls,
    config: LlmConfig,
    transport: Optional[httpx.BaseTransport] = None,
    sleep: Sleep = time.sleep,
  ) -> 'HttpProvider':
    return cls(
      base_url=config.base_url,
      api_key=get_api_key(config),
      policy=RetryPolicy.from_config(config.retry),
      max_concurrency=config.max_concurrency,
      requests_per_minute=config.requests_per_minute,
      timeout_s=config.timeout_s,
      transport=transport,
      sleep=sleep,
    )

  def complete(self, request: ChatRequest) -> str:
    response = self.http.post('/chat/completions', json=request.model_dump(exclude_none=True))
    if response.status_code != 200:
      raise ProviderError(f'HTTP {response.status_code}: {response.text[:200]}')
    try:
      content = response.json()['choices'][0]['message']['content']
    except (ValueError, KeyError, IndexError, TypeError) as e:
      raise ProviderError(f'unexpected completion payload: {e}') from e
    if not isinstance(content, str):
      raise ProviderError('completion content is not text')
    return content

  def close(self) -> None:
    self.http.close()


def fingerprint(request: ChatRequest) -> str:
  """SHA-256 of the last user message, the key of scripted response tables."""
  user = [m.content for m in request.messages if m.role == 'user']
  return hashlib.sha256((user[-1] if user else '').encode('utf-8')).hexdigest()


class ScriptedProvider:
  """Replays canned responses.

  A list is consumed in order. A dict maps request fingerprints to a response, or to a
  list of responses consumed in order for repeated identical requests. Running out is
  an error. Every request is recorded in ``calls``.
  """

  def __init__(self, responses: Union[List[str], Dict[str, Union[str, List[str]]]]):
    self._queue: Optional[Deque[str]] = None
    self._table: Optional[Dict[str, Deque[str]]] = None
    if isinstance(responses, dict):
      self._table = {
        key: deque([value] if isinstance(value, str) else value)
        for key, value in responses.items()
      }
    else:
      self._queue = deque(responses)
    self.calls: List[ChatRequest] = []
    self._lock = threading.Lock()

  @classmethod
  def from_file(cls, path: Path) -> 'ScriptedProvider':
    """Load a JSON script (list queue or fingerprint table)."""
    with open(path, encoding='utf-8') as f:
      script = json.load(f)
    if isinstance(script, list) and all(isinstance(s, str) for s in script):
      return cls(script)
    if isinstance(script, dict):
      return cls(script)
    raise ValueError(f'{path}: script must be a list of strings or an object')

  @property
  def is_queue(self) -> bool:
    return self._queue is not None

  def remaining(self) -> int:
    if self._queue is not None:
      return len(self._queue)
    return sum(len(q) for q in self._table.values())

  def complete(self, request: ChatRequest) -> str:
    with self._lock:
      self.calls.append(request)
      if self._queue is not None:
        if not self._queue:
          raise ScriptExhaustedError(f'script exhausted at call {len(self.calls)}')
        return self._queue.popleft()
      key = fingerprint(request)
      pending = self._table.get(key)
      if not pending:
        raise ScriptExhaustedError(f'no scripted response left for fingerprint {key[:12]}')
      return pending.popleft()


def complete(provider: Provider, request: ChatRequest) -> str:
  """Send a request and return the assistant text."""
  started = time.monotonic()
  text = provider.complete(request)
  logger.debug(f'{request.model} answered in {time.monotonic() - started:.2f}s ({len(text)} chars)')
  return text


def user_request(model: str, prompt: str, temperature: float = 0.0) -> ChatRequest:
  return ChatRequest(
    model=model, messages=[ChatMessage(role='user', content=prompt)], temperature=temperature
  )


def ask(provider: Provider, request: ChatRequest, parse: Callable[[str], T], reasks: int = 1) -> T:
  """Complete and parse, re-sending the same request after a ``FormatError``.

  Raises:
      FormatError: When the last permitted response is still malformed
  """
  error: Optional[FormatError] = None
  for attempt in range(reasks + 1):
    text = complete(provider, request)
    try:
      return parse(text)
    except FormatError as e:
      error = e
      logger.warning(f'Malformed {request.model} output (attempt {attempt + 1}): {e}')
  raise error


def provider_from_config(
  config: LlmConfig,
  transport: Optional[httpx.BaseTransport] = None,
  sleep: Sleep = time.sleep,
) -> Provider:
  if config.provider == 'scripted':
    return ScriptedProvider.from_file(config.script_path)
  return HttpProvider.from_config(config, transport=transport, sleep=sleep)
