"""In-memory labeled triple store with TSV ingestion and one-hop sampling.

Fixture format: UTF-8, one triple per line, six tab-separated fields

    s_label  s_qid  p_label  p_pid  o_label  o_qid_or_literal

where the last field is a Q-ID or ``lit:<kind>:<value>``. Lines starting with ``#`` are
comments. An empty label means the KG has no label; the entity is then labeled with its
own Q-ID and the triple is flagged as ``missing_label``.
"""

import logging
import random
import re
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

from pydantic import ValidationError

from kgqagen.errors import TsvFormatError
from kgqagen.models import EntityRef, LiteralTerm, PredicateRef, Triple

logger = logging.getLogger(__name__)

QID_RE = re.compile(r'^Q[0-9]+$')
PID_RE = re.compile(r'^P[0-9]+$')
LITERAL_KINDS = ('plain', 'date', 'number')
FIELDS = ('s_label', 's_qid', 'p_label', 'p_pid', 'o_label', 'o_qid_or_literal')


def triple_sort_key(triple: Triple) -> Tuple[str, str, str]:
  """Deterministic order: subject id, predicate id, object key."""
  return triple.key


class TripleStore:
  """Immutable set of triples with subject/object indexes and a label table."""

  def __init__(self, triples: Iterable[Triple] = ()):
    self._triples: Dict[Tuple[str, str, str], Triple] = {}
    self._out: Dict[str, List[Triple]] = {}
    self._in: Dict[str, List[Triple]] = {}
    self._labels: Dict[str, str] = {}

    for triple in triples:
      if triple.key in self._triples:
        continue
      self._triples[triple.key] = triple
      self._out.setdefault(triple.subject.qid, []).append(triple)
      self._remember_label(triple.subject.qid, triple.subject.label)
      self._remember_label(triple.predicate.pid, triple.predicate.label)
      if isinstance(triple.object, EntityRef):
        self._in.setdefault(triple.object.qid, []).append(triple)
        self._remember_label(triple.object.qid, triple.object.label)

    for index in (self._out, self._in):
      for bucket in index.values():
        bucket.sort(key=triple_sort_key)

  def _remember_label(self, identifier: str, label: str) -> None:
    # A real label wins over the id fallback, whichever line came first.
    current = self._labels.get(identifier)
    if current is None or (current == identifier and label != identifier):
      self._labels[identifier] = label

  def __len__(self) -> int:
    return len(self._triples)

  def __iter__(self) -> Iterator[Triple]:
    return iter(sorted(self._triples.values(), key=triple_sort_key))

  def __contains__(self, triple: object) -> bool:
    return isinstance(triple, Triple) and triple.key in self._triples

  def __eq__(self, other: object) -> bool:
    if not isinstance(other, TripleStore):
      return NotImplemented
    return self._triples == other._triples

  @property
  def triples(self) -> frozenset:
    return frozenset(self._triples.values())

  def label(self, identifier: str) -> Optional[str]:
    """Label of a Q-ID or P-ID, or None when the id is unknown."""
    return self._labels.get(identifier)

  def outgoing(self, qid: str) -> List[Triple]:
    return list(self._out.get(qid, ()))

  def incoming(self, qid: str) -> List[Triple]:
    return list(self._in.get(qid, ()))

  def neighbors(self, qid: str, direction: str = 'both') -> List[Triple]:
    """Triples incident to ``qid``.

    Args:
        qid: Entity id (may be absent from the store)
        direction: ``out`` (qid is subject), ``in`` (qid is entity object) or ``both``

    Returns:
        Triples sorted by subject id, predicate id and object key; self-loops once
    """
    if direction == 'out':
      return self.outgoing(qid)
    if direction == 'in':
      return self.incoming(qid)
    if direction != 'both':
      raise ValueError(f'direction must be out, in or both, got {direction!r}')
    merged = {t.key: t for t in self._out.get(qid, ())}
    for triple in self._in.get(qid, ()):
      merged.setdefault(triple.key, triple)
    return sorted(merged.values(), key=triple_sort_key)

  def sample_one_hop(
    self, qid: str, k: int, rng: random.Random, direction: str = 'both'
  ) -> List[Triple]:
    """Uniform sample without replacement of ``min(k, degree)`` incident triples."""
    return sample_triples(self.neighbors(qid, direction), k, rng)


def sample_triples(pool: List[Triple], k: int, rng: random.Random) -> List[Triple]:
  """Sample ``min(k, len(pool))`` triples and return them in deterministic order.

  Args:
      pool: Candidate triples in a deterministic order
      k: Sample size, at least 1
      rng: Caller-owned random stream

  Returns:
      Sampled triples sorted by ``triple_sort_key``
  """
  if k < 1:
    raise ValueError(f'k must be >= 1, got {k}')
  if k >= len(pool):
    return list(pool)
  return sorted(rng.sample(pool, k), key=triple_sort_key)


def parse_tsv_line(line: str, lineno: int) -> Triple:
  """Parse one fixture line into a ``Triple``.

  Raises:
      TsvFormatError: naming the line number and the offending field
  """
  fields = line.rstrip('\r\n').split('\t')
  if len(fields) != len(FIELDS):
    raise TsvFormatError(lineno, 'line', f'expected {len(FIELDS)} fields, got {len(fields)}')
  s_label, s_qid, p_label, p_pid, o_label, o_value = (f.strip() for f in fields)

  if not QID_RE.match(s_qid):
    raise TsvFormatError(lineno, 's_qid', f'not a Q-ID: {s_qid!r}')
  if not PID_RE.match(p_pid):
    raise TsvFormatError(lineno, 'p_pid', f'not a P-ID: {p_pid!r}')

  if o_value.startswith('lit:'):
    parts = o_value.split(':', 2)
    if len(parts) != 3 or parts[1] not in LITERAL_KINDS:
      raise TsvFormatError(
        lineno, 'o_qid_or_literal', f'literal must be lit:<{"|".join(LITERAL_KINDS)}>:<value>'
      )
    obj = LiteralTerm(kind=parts[1], value=parts[2])
  elif QID_RE.match(o_value):
    obj = EntityRef(label=o_label, qid=o_value)
  else:
    raise TsvFormatError(lineno, 'o_qid_or_literal', f'not a Q-ID or literal: {o_value!r}')

  try:
    return Triple(
      subject=EntityRef(label=s_label, qid=s_qid),
      predicate=PredicateRef(label=p_label or p_pid, pid=p_pid),
      object=obj,
    )
  except ValidationError as e:
    raise TsvFormatError(lineno, 'line', str(e)) from e


def load_tsv(path: Path) -> TripleStore:
  """Load a TSV fixture into a ``TripleStore``.

  Args:
      path: Fixture file

  Returns:
      Store with each distinct line exactly once

  Raises:
      OSError: If the file cannot be read
      TsvFormatError: On the first malformed line
  """
  triples: List[Triple] = []
  with open(path, encoding='utf-8') as f:
    for lineno, line in enumerate(f, start=1):
      if not line.strip() or line.lstrip().startswith('#'):
        continue
      triples.append(parse_tsv_line(line, lineno))

  store = TripleStore(triples)
  logger.info(f'Loaded {len(store)} triples from {path} ({len(triples) - len(store)} duplicates)')
  return store


def format_tsv_line(triple: Triple) -> str:
  """Serialize a triple in the fixture format (no trailing newline)."""
  subject_label = '' if triple.subject.unlabeled else triple.subject.label
  if isinstance(triple.object, EntityRef):
    object_label = '' if triple.object.unlabeled else triple.object.label
    object_value = triple.object.qid
  else:
    object_label = triple.object.value
    object_value = triple.object.key
  return '\t'.join(
    [
      subject_label,
      triple.subject.qid,
      triple.predicate.label,
      triple.predicate.pid,
      object_label,
      object_value,
    ]
  )


def dump_tsv(store: TripleStore, path: Path) -> int:
  """Write a store back to the fixture format in deterministic order.

  Returns:
      Number of lines written
  """
  count = 0
  with open(path, 'w', encoding='utf-8') as f:
    f.write('# ' + '\t'.join(FIELDS) + '\n')
    for triple in store:
      f.write(format_tsv_line(triple) + '\n')
      count += 1
  return count
