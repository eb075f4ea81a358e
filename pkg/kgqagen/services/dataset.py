"""JSONL persistence, deterministic train/dev/test split and corpus statistics."""

import logging
import math
import random
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Type, TypeVar

import pandas as pd
from pydantic import BaseModel, ValidationError

from kgqagen.errors import SchemaError, SplitError
from kgqagen.models import (
  Accepted,
  CandidateInstance,
  DatasetStats,
  InstanceRecord,
  RecordMeta,
  SplitSpec,
)

logger = logging.getLogger(__name__)

M = TypeVar('M', bound=BaseModel)

SPLIT_NAMES = ('train', 'dev', 'test')
QUESTION_BUCKETS = ['<=15', '16-30', '>30']
QUESTION_BINS = [-math.inf, 15, 30, math.inf]
ANSWER_BUCKETS = ['1', '2', '>=3']
ANSWER_BINS = [-math.inf, 1, 2, math.inf]


def write_jsonl(records: Iterable[BaseModel], path: Path) -> int:
  """Write one JSON object per line (field order of the model).

  Raises:
      ValueError: If two records share an ``id``
  """
  seen = set()
  count = 0
  with open(path, 'w', encoding='utf-8') as f:
    for record in records:
      record_id = getattr(record, 'id', None)
      if record_id is not None:
        if record_id in seen:
          raise ValueError(f'duplicate id {record_id!r}')
        seen.add(record_id)
      f.write(record.model_dump_json() + '\n')
      count += 1
  logger.info(f'Wrote {count} records to {path}')
  return count


def read_jsonl(path: Path, model: Type[M] = InstanceRecord) -> List[M]:
  """Read and validate a JSONL file.

  Raises:
      SchemaError: On a schema violation or a duplicate id, naming the line
  """
  records: List[M] = []
  first_seen: Dict[str, int] = {}
  with open(path, encoding='utf-8') as f:
    for lineno, line in enumerate(f, start=1):
      if not line.strip():
        continue
      try:
        record = model.model_validate_json(line)
      except ValidationError as e:
        raise SchemaError(lineno, str(e)) from e
      record_id = getattr(record, 'id', None)
      if record_id is not None:
        if record_id in first_seen:
          raise SchemaError(
            lineno, f'duplicate id {record_id!r} (first on line {first_seen[record_id]})'
          )
        first_seen[record_id] = lineno
      records.append(record)
  return records


def to_record(instance: CandidateInstance, outcome: Accepted) -> InstanceRecord:
  """Release form of an accepted candidate, carrying the validated query."""
  return InstanceRecord(
    id=instance.id,
    seed=instance.seed,
    question=instance.question,
    answers=instance.answers,
    proof=[tuple(t.surface) for t in instance.proof],
    sparql=outcome.final_sparql,
    meta=RecordMeta(
      iterations=instance.meta.iterations,
      validation_attempts=outcome.attempts,
      model=instance.meta.model,
      created_at=instance.meta.created_at,
    ),
  )


def _round_half_up(value: float) -> int:
  return math.floor(value + 0.5)


def split(records: Sequence[M], spec: SplitSpec = SplitSpec()) -> Tuple[List[M], List[M], List[M]]:
  """Shuffle under ``spec.seed`` and cut dev/test off the front; train keeps the rest.

  Raises:
      SplitError: If any partition would be empty
  """
  total = len(records)
  n_dev = _round_half_up(total * spec.dev_fraction)
  n_test = _round_half_up(total * spec.test_fraction)
  if total < 3 or n_dev < 1 or n_test < 1 or total - n_dev - n_test < 1:
    raise SplitError(
      f'cannot split {total} records into non-empty parts '
      f'(dev={spec.dev_fraction}, test={spec.test_fraction})'
    )

  shuffled = list(records)
  random.Random(spec.seed).shuffle(shuffled)
  dev = shuffled[:n_dev]
  test = shuffled[n_dev : n_dev + n_test]
  train = shuffled[n_dev + n_test :]
  logger.info(f'Split {total} records into {len(train)}/{len(dev)}/{len(test)}')
  return train, dev, test


def write_split(out_dir: Path, parts: Tuple[List[BaseModel], ...]) -> Dict[str, int]:
  """Write ``train.jsonl``, ``dev.jsonl`` and ``test.jsonl``."""
  out_dir.mkdir(parents=True, exist_ok=True)
  return {
    name: write_jsonl(part, out_dir / f'{name}.jsonl')
    for name, part in zip(SPLIT_NAMES, parts, strict=True)
  }


def _histogram(values: List[int], bins: List[float], labels: List[str]) -> Dict[str, int]:
  counts = pd.cut(pd.Series(values, dtype='float64'), bins=bins, labels=labels).value_counts()
  return {label: int(counts.get(label, 0)) for label in labels}


def _percentages(counts: Dict[str, int], total: int) -> Dict[str, float]:
  return {k: round(100.0 * v / total, 1) if total else 0.0 for k, v in counts.items()}


def stats(records: Sequence[InstanceRecord]) -> DatasetStats:
  """Question-length and answer-count histograms.

  Question length is the number of whitespace-separated tokens.
  """
  words = [len(r.question.split()) for r in records]
  answers = [len(r.answers) for r in records]
  question_length = _histogram(words, QUESTION_BINS, QUESTION_BUCKETS)
  answer_count = _histogram(answers, ANSWER_BINS, ANSWER_BUCKETS)
  return DatasetStats(
    count=len(records),
    question_length=question_length,
    answer_count=answer_count,
    question_length_pct=_percentages(question_length, len(records)),
    answer_count_pct=_percentages(answer_count, len(records)),
  )


def render_stats_table(report: DatasetStats) -> str:
  """Plain-text table of both histograms."""
  rows = [
    ('question words', bucket, report.question_length[bucket], report.question_length_pct[bucket])
    for bucket in QUESTION_BUCKETS
  ] + [
    ('answers', bucket, report.answer_count[bucket], report.answer_count_pct[bucket])
    for bucket in ANSWER_BUCKETS
  ]
  frame = pd.DataFrame(rows, columns=['histogram', 'bucket', 'count', 'percent'])
  return f'{report.count} instances\n' + frame.to_string(index=False)
