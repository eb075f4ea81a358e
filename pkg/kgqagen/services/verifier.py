"""Symbolic answer validation with a bounded LLM query-revision loop."""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Tuple, Union

from kgqagen.config import PipelineConfig
from kgqagen.errors import (
  FormatError,
  InfrastructureError,
  ParseError,
  QueryExecutionError,
  describe,
)
from kgqagen.kg.backend import KgBackend
from kgqagen.models import (
  MAX_REVISION_ATTEMPTS,
  Accepted,
  AnswerKey,
  AttemptTrace,
  BoundValue,
  CandidateInstance,
  FailureClass,
  Rejected,
  RejectionRecord,
  ResultSet,
)
from kgqagen.services.llm_gateway import (
  Provider,
  complete,
  parse_revision_response,
  render_validator_prompt,
  user_request,
)

logger = logging.getLogger(__name__)

QID_SUFFIX_RE = re.compile(r'\(\s*(Q[0-9]+)\s*\)\s*$')
BARE_QID_RE = re.compile(r'^Q[0-9]+$')

Outcome = Union[Accepted, Rejected]


def normalize_label(text: str) -> str:
  return ' '.join(text.split()).lower()


def canonicalize_answer(raw: str) -> AnswerKey:
  """Turn ``"Label (Q123)"`` (or a bare label/id) into a comparable key.

  Raises:
      ValueError: If ``raw`` is blank
  """
  text = raw.strip()
  if not text:
    raise ValueError('answer must not be empty')
  if BARE_QID_RE.match(text):
    return AnswerKey(qid=text)
  qid = None
  match = QID_SUFFIX_RE.search(text)
  if match:
    qid = match.group(1)
    text = text[: match.start()]
  return AnswerKey(qid=qid, normalized_label=normalize_label(text))


def _bound_key(value: BoundValue) -> Optional[AnswerKey]:
  if value.qid is not None:
    return AnswerKey(qid=value.qid, normalized_label=normalize_label(value.label or ''))
  text = value.literal if value.literal is not None else (value.label or value.pid)
  if not text or not normalize_label(text):
    return None
  return AnswerKey(normalized_label=normalize_label(text))


def resultset_to_answers(result: ResultSet) -> List[AnswerKey]:
  """Distinct answer keys over every row and projected variable, sorted."""
  keys: Dict[Tuple[str, str], AnswerKey] = {}
  for row in result.rows:
    for name in result.variables:
      key = _bound_key(row[name])
      if key is None:
        continue
      identity = ('qid', key.qid) if key.qid else ('label', key.normalized_label)
      keys.setdefault(identity, key)
  return sorted(keys.values(), key=lambda k: k.sort_key)


def keys_match(a: AnswerKey, b: AnswerKey) -> bool:
  if a.qid is not None and b.qid is not None:
    return a.qid == b.qid
  return a.normalized_label == b.normalized_label


def answers_equal(a: Iterable[AnswerKey], b: Iterable[AnswerKey]) -> bool:
  """True iff a perfect one-to-one matching exists between the two key sets.

  Keys match on equal qids when both carry one, otherwise on equal labels.
  """
  left = list(dict.fromkeys(a))
  right = list(dict.fromkeys(b))
  if len(left) != len(right):
    return False

  edges = [[j for j, r in enumerate(right) if keys_match(lk, r)] for lk in left]
  owner: List[Optional[int]] = [None] * len(right)

  def augment(i: int, seen: List[bool]) -> bool:
    for j in edges[i]:
      if seen[j]:
        continue
      seen[j] = True
      if owner[j] is None or augment(owner[j], seen):
        owner[j] = i
        return True
    return False

  return all(augment(i, [False] * len(right)) for i in range(len(left)))


def validate(
  instance: CandidateInstance,
  backend: KgBackend,
  llm: Provider,
  max_attempts: int = 3,
  model: str = 'gpt-4o-mini',
  temperature: float = 0.0,
) -> Outcome:
  """Execute the instance query and revise it until the answers match.

  Attempt 0 runs ``instance.sparql``; each later attempt asks ``model`` for a revision.
  Parse/execution failures, empty results and mismatches all trigger a revision. After
  ``max_attempts`` failed revisions the instance is rejected with the last failure.

  Returns:
      Accepted with the query that reproduced the answers, or Rejected
  """
  if not 0 <= max_attempts <= MAX_REVISION_ATTEMPTS:
    raise ValueError(
      f'max_attempts must be within [0, {MAX_REVISION_ATTEMPTS}], got {max_attempts}'
    )
  gold = list(dict.fromkeys(canonicalize_answer(a) for a in instance.answers))
  if not gold:
    return Rejected(reason='Mismatch', attempts=0, detail='empty gold answer set')

  sparql_text = instance.sparql
  trace: List[AttemptTrace] = []
  failure: FailureClass = 'NonExecutable'
  detail = ''

  for attempt in range(max_attempts + 1):
    if attempt > 0:
      request = user_request(
        model, render_validator_prompt(instance.question, sparql_text), temperature
      )
      try:
        sparql_text = parse_revision_response(complete(llm, request)).correct_sparql
      except FormatError as e:
        failure, detail = 'NonExecutable', describe(e)
        trace.append(AttemptTrace(attempt=attempt, sparql='', failure=failure, detail=detail))
        logger.info(f'{instance.id}: attempt {attempt} unusable revision: {detail}')
        continue
      except InfrastructureError as e:
        return Rejected(reason='Infrastructure', attempts=attempt, detail=describe(e), trace=trace)

    retrieved: List[AnswerKey] = []
    try:
      retrieved = resultset_to_answers(backend.execute(sparql_text))
    except (ParseError, QueryExecutionError) as e:
      failure, detail = 'NonExecutable', describe(e)
    except InfrastructureError as e:
      trace.append(
        AttemptTrace(
          attempt=attempt, sparql=sparql_text, failure='Infrastructure', detail=describe(e)
        )
      )
      return Rejected(reason='Infrastructure', attempts=attempt, detail=describe(e), trace=trace)
    else:
      if not retrieved:
        failure, detail = 'Empty', 'query returned no results'
      elif answers_equal(retrieved, gold):
        trace.append(AttemptTrace(attempt=attempt, sparql=sparql_text, retrieved=retrieved))
        logger.info(f'{instance.id}: accepted at attempt {attempt}')
        return Accepted(
          final_sparql=sparql_text, retrieved=retrieved, attempts=attempt, trace=trace
        )
      else:
        failure, detail = 'Mismatch', f'retrieved {len(retrieved)} answers, expected {len(gold)}'

    trace.append(
      AttemptTrace(
        attempt=attempt, sparql=sparql_text, failure=failure, detail=detail, retrieved=retrieved
      )
    )
    logger.info(f'{instance.id}: attempt {attempt} failed ({failure})')

  return Rejected(reason=failure, attempts=max_attempts, detail=detail, trace=trace)


def validate_batch(
  instances: List[CandidateInstance],
  backend: KgBackend,
  llm: Provider,
  cfg: PipelineConfig,
  workers: int = 4,
) -> List[Outcome]:
  """Validate many instances; outcomes come back in input order."""

  def work(instance: CandidateInstance) -> Outcome:
    return validate(
      instance,
      backend,
      llm,
      max_attempts=cfg.max_revision_attempts,
      model=cfg.revision_model,
      temperature=cfg.temperature,
    )

  if workers <= 1:
    return [work(i) for i in instances]
  with ThreadPoolExecutor(max_workers=workers) as pool:
    return list(pool.map(work, instances))


def rejection_record(instance: CandidateInstance, outcome: Rejected) -> RejectionRecord:
  return RejectionRecord(
    id=instance.id,
    question=instance.question,
    answers=instance.answers,
    sparql=instance.sparql,
    reason=outcome.reason,
    attempts=outcome.attempts,
    detail=outcome.detail,
    trace=outcome.trace,
  )


def retention(accepted: int, total: int) -> float:
  """Share of candidates that survived validation."""
  return accepted / total if total else 0.0
