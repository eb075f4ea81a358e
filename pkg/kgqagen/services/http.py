"""Shared HTTP plumbing for the SPARQL endpoint and the chat-completion API.

Both integrations go through ``RetryingClient``: a thin wrapper around ``httpx.Client``
adding exponential backoff with full jitter, ``Retry-After`` support, a cap on requests
in flight and an optional per-minute token bucket.
"""

import logging
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from email.utils import parsedate_to_datetime
from typing import Callable, Optional

import httpx

from kgqagen.config import RetryConfig
from kgqagen.errors import (
  AuthError,
  HttpStatusError,
  InfrastructureError,
  RateLimitError,
  RequestTimeoutError,
  TransportError,
)

logger = logging.getLogger(__name__)

Sleep = Callable[[float], None]


@dataclass(frozen=True)
class RetryPolicy:
  """How many times to try a request and how long to wait in between."""

  max_attempts: int = 5
  base_delay_s: float = 1.0
  max_delay_s: float = 30.0

  @classmethod
  def from_config(cls, config: RetryConfig) -> 'RetryPolicy':
    return cls(config.max_attempts, config.base_delay_s, config.max_delay_s)

  def backoff_delay(
    self, attempt: int, retry_after: Optional[float], rng: random.Random
  ) -> float:
    """Delay before retry number ``attempt + 1``.

    A server-provided ``Retry-After`` wins; otherwise full jitter over
    ``min(max_delay_s, base_delay_s * 2**attempt)``.
    """
    if retry_after is not None:
      return max(0.0, retry_after)
    ceiling = min(self.max_delay_s, self.base_delay_s * (2**attempt))
    return rng.uniform(0.0, ceiling)


def parse_retry_after(value: Optional[str]) -> Optional[float]:
  """Seconds to wait from a ``Retry-After`` header (delta-seconds or HTTP date)."""
  if not value:
    return None
  value = value.strip()
  try:
    return float(value)
  except ValueError:
    pass
  try:
    when = parsedate_to_datetime(value)
  except (TypeError, ValueError):
    return None
  if when.tzinfo is None:
    when = when.replace(tzinfo=timezone.utc)
  return max(0.0, (when - datetime.now(timezone.utc)).total_seconds())


class InFlightLimiter:
  """Caps concurrent requests toward one service."""

  def __init__(self, max_in_flight: int):
    if max_in_flight < 1:
      raise ValueError(f'max_in_flight must be >= 1, got {max_in_flight}')
    self.max_in_flight = max_in_flight
    self._semaphore = threading.BoundedSemaphore(max_in_flight)

  def __enter__(self) -> 'InFlightLimiter':
    self._semaphore.acquire()
    return self

  def __exit__(self, *exc_info) -> None:
    self._semaphore.release()


class TokenBucket:
  """Thread-safe requests-per-minute limiter; a rate of 0 disables it."""

  def __init__(
    self,
    rate_per_minute: int,
    clock: Callable[[], float] = time.monotonic,
    sleep: Sleep = time.sleep,
  ):
    self.rate_per_minute = rate_per_minute
    self._per_second = rate_per_minute / 60.0
    self._capacity = float(max(rate_per_minute, 1))
    self._tokens = self._capacity
    self._clock = clock
    self._sleep = sleep
    self._updated = clock()
    self._lock = threading.Lock()

  def acquire(self) -> None:
    if self.rate_per_minute <= 0:
      return
    while True:
      with self._lock:
        now = self._clock()
        self._tokens = min(self._capacity, self._tokens + (now - self._updated) * self._per_second)
        self._updated = now
        if self._tokens >= 1.0:
          self._tokens -= 1.0
          return
        wait = (1.0 - self._tokens) / self._per_second
      self._sleep(wait)


class RetryingClient:
  """``httpx.Client`` wrapper that retries 429, 5xx and transport failures.

  401/403 raise ``AuthError`` immediately. Any other response is returned to the
  caller, which owns the interpretation of 4xx bodies.
  """

  def __init__(
    self,
    client: httpx.Client,
    policy: RetryPolicy = RetryPolicy(),
    max_in_flight: int = 2,
    rate_limiter: Optional[TokenBucket] = None,
    sleep: Sleep = time.sleep,
    rng: Optional[random.Random] = None,
    retry_timeouts: bool = True,
    is_final: Optional[Callable[[httpx.Response], bool]] = None,
  ):
    """Create a retrying client.

    Args:
        client: Underlying httpx client (base URL, headers and timeout already set)
        policy: Retry policy
        max_in_flight: Concurrent request cap
        rate_limiter: Optional token bucket consulted before every attempt
        sleep: Sleep function, injectable for tests
        rng: Jitter source
        retry_timeouts: Whether client-side timeouts are retried
        is_final: Predicate marking a retryable-status response as final (returned as-is)
    """
    self.client = client
    self.policy = policy
    self.limiter = InFlightLimiter(max_in_flight)
    self.rate_limiter = rate_limiter
    self.retry_timeouts = retry_timeouts
    self.is_final = is_final
    self._sleep = sleep
    self._rng = rng or random.Random()
    self._lock = threading.Lock()
    self.retries_total = 0

  def request(self, method: str, url: str, **kwargs) -> httpx.Response:
    """Send a request under the retry policy.

    Raises:
        AuthError: On 401/403
        RateLimitError: When 429 persists after the last attempt
        HttpStatusError: When 5xx persists after the last attempt
        RequestTimeoutError: On a client-side timeout (after retries, if enabled)
        TransportError: When the connection keeps failing
    """
    attempts = max(1, self.policy.max_attempts)
    for attempt in range(attempts):
      if self.rate_limiter is not None:
        self.rate_limiter.acquire()

      retry_after = None
      try:
        with self.limiter:
          response = self.client.request(method, url, **kwargs)
      except httpx.TimeoutException as e:
        error: InfrastructureError = RequestTimeoutError(f'{method} {url} timed out: {e}')
        cause: Optional[BaseException] = e
        if not self.retry_timeouts:
          raise error from e
      except httpx.TransportError as e:
        error = TransportError(f'{method} {url} failed: {e}')
        cause = e
      else:
        status = response.status_code
        if status in (401, 403):
          raise AuthError(status, _snippet(response))
        if status != 429 and status < 500:
          return response
        if self.is_final is not None and self.is_final(response):
          return response
        error_type = RateLimitError if status == 429 else HttpStatusError
        error = error_type(status, _snippet(response), retries=attempt)
        cause = None
        retry_after = parse_retry_after(response.headers.get('Retry-After'))

      if attempt + 1 >= attempts:
        logger.error(f'Giving up on {method} {url} after {attempts} attempts: {error}')
        raise error from cause

      delay = self.policy.backoff_delay(attempt, retry_after, self._rng)
      with self._lock:
        self.retries_total += 1
      logger.warning(
        f'Retrying {method} {url} (attempt {attempt + 2}/{attempts}) in {delay:.2f}s: {error}'
      )
      self._sleep(delay)

    raise AssertionError('unreachable')

  def post(self, url: str, **kwargs) -> httpx.Response:
    return self.request('POST', url, **kwargs)

  def close(self) -> None:
    self.client.close()

  def __enter__(self) -> 'RetryingClient':
    return self

  def __exit__(self, *exc_info) -> None:
    self.close()


def _snippet(response: httpx.Response, limit: int = 200) -> str:
  try:
    text = response.text
  except UnicodeDecodeError:
    return ''
  return ' '.join(text.split())[:limit]
