"""Exception hierarchy for kgqagen.

Two families matter to callers:
- ``InfrastructureError``: the KG endpoint or the LLM provider could not be reached or
  misbehaved after the retry policy gave up. Pipelines map these to ``Infrastructure``
  outcomes and the CLI to exit status 2.
- Everything else: contract violations in inputs (files, queries, LLM output).
"""

from typing import List, Optional


class KgqaGenError(Exception):
  """Base class for all kgqagen errors."""


class ConfigError(KgqaGenError):
  """Configuration file missing, unreadable or invalid."""

  def __init__(self, problems: List[str]):
    self.problems = problems
    super().__init__('Invalid configuration:\n  - ' + '\n  - '.join(problems))


class TsvFormatError(KgqaGenError):
  """Malformed line in a triple fixture file."""

  def __init__(self, line: int, field: str, message: str):
    self.line = line
    self.field = field
    super().__init__(f'line {line}, field {field}: {message}')


class ParseError(KgqaGenError):
  """SPARQL text outside the supported grammar."""

  def __init__(self, message: str, position: int):
    self.position = position
    super().__init__(f'{message} (at offset {position})')


class FormatError(KgqaGenError):
  """LLM output that does not satisfy the expected JSON contract."""


class SynthesisError(KgqaGenError):
  """A SPARQL query cannot be built from a proof."""


class SchemaError(KgqaGenError):
  """JSONL record violating the dataset schema."""

  def __init__(self, line: int, message: str):
    self.line = line
    super().__init__(f'line {line}: {message}')


class SplitError(KgqaGenError):
  """Split fractions cannot be honoured for the given record count."""


class ScoringError(KgqaGenError):
  """Evaluation could not be carried out."""


class SeedExhausted(KgqaGenError):
  """Seed entity has no neighbours in the KG."""


class StepFailed(KgqaGenError):
  """Generator output stayed malformed after the re-ask."""


class ProofResolutionError(KgqaGenError):
  """A proof line does not name a triple of the finalized subgraph."""


class QueryExecutionError(KgqaGenError):
  """The endpoint refused or could not finish a query."""


class QueryRejectedError(QueryExecutionError):
  """The endpoint reported the query as invalid (HTTP 400)."""


class QueryTimeoutError(QueryExecutionError):
  """The endpoint (or the client) timed out while running the query."""


# ============================================================================
# INFRASTRUCTURE
# ============================================================================


class InfrastructureError(KgqaGenError):
  """Remote service failure that survived the retry policy."""


class TransportError(InfrastructureError):
  """Connection-level failure."""


class RequestTimeoutError(TransportError):
  """The request timed out on the client side."""


class HttpStatusError(InfrastructureError):
  """Unexpected HTTP status."""

  def __init__(self, status_code: int, message: str = '', retries: int = 0):
    self.status_code = status_code
    self.retries = retries
    super().__init__(f'HTTP {status_code}' + (f': {message}' if message else ''))


class AuthError(HttpStatusError):
  """Credentials rejected (401/403); never retried."""


class RateLimitError(HttpStatusError):
  """Rate limit still hit after all retries."""


class EndpointError(InfrastructureError):
  """SPARQL endpoint returned a document that is not valid results JSON."""


class ProviderError(InfrastructureError):
  """Chat-completion provider returned an unusable response."""


class ScriptExhaustedError(ProviderError):
  """Scripted provider has no response left for a request."""


def describe(exc: Optional[BaseException]) -> str:
  """One-line ``Type: message`` description used in reports."""
  if exc is None:
    return ''
  return f'{type(exc).__name__}: {exc}'
