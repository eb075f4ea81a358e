"""Pydantic models for kgqagen."""

from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

QID_PATTERN = r'^Q[0-9]+$'
PID_PATTERN = r'^P[0-9]+$'
MAX_REVISION_ATTEMPTS = 3

# ============================================================================
# KNOWLEDGE GRAPH MODELS
# ============================================================================


class EntityRef(BaseModel):
  """Labeled entity; a missing label falls back to the Q-ID."""

  model_config = ConfigDict(frozen=True)

  label: str
  qid: str = Field(..., pattern=QID_PATTERN)

  @model_validator(mode='before')
  @classmethod
  def _label_defaults_to_qid(cls, data):
    if isinstance(data, dict):
      label = str(data.get('label') or '').strip()
      data = {**data, 'label': label or data.get('qid')}
    return data

  @property
  def surface(self) -> str:
    return f'{self.label} ({self.qid})'

  @property
  def unlabeled(self) -> bool:
    return self.label == self.qid


class PredicateRef(BaseModel):
  """Labeled predicate."""

  model_config = ConfigDict(frozen=True)

  label: str
  pid: str = Field(..., pattern=PID_PATTERN)

  @property
  def surface(self) -> str:
    return f'{self.label} ({self.pid})'


class LiteralTerm(BaseModel):
  """Literal triple object (dates, quantities, strings)."""

  model_config = ConfigDict(frozen=True)

  value: str
  kind: Literal['plain', 'date', 'number'] = 'plain'

  @property
  def key(self) -> str:
    return f'lit:{self.kind}:{self.value}'

  @property
  def surface(self) -> str:
    return self.value


Term = Union[EntityRef, LiteralTerm]


class Triple(BaseModel):
  """A fact <subject, predicate, object>."""

  model_config = ConfigDict(frozen=True)

  subject: EntityRef
  predicate: PredicateRef
  object: Term

  @property
  def object_key(self) -> str:
    if isinstance(self.object, EntityRef):
      return self.object.qid
    return self.object.key

  @property
  def key(self) -> Tuple[str, str, str]:
    """Identity of the fact, independent of labels."""
    return (self.subject.qid, self.predicate.pid, self.object_key)

  @property
  def missing_label(self) -> bool:
    if self.subject.unlabeled:
      return True
    return isinstance(self.object, EntityRef) and self.object.unlabeled

  @property
  def surface(self) -> List[str]:
    return [self.subject.surface, self.predicate.surface, self.object.surface]


# ============================================================================
# QUERY RESULT MODELS
# ============================================================================


class BoundValue(BaseModel):
  """Value bound to a result variable."""

  model_config = ConfigDict(frozen=True)

  qid: Optional[str] = None
  pid: Optional[str] = None
  label: Optional[str] = None
  literal: Optional[str] = None
  datatype: Optional[str] = None

  @model_validator(mode='after')
  def _not_empty(self):
    if self.qid is None and self.pid is None and self.label is None and self.literal is None:
      raise ValueError('BoundValue needs at least one field')
    return self

  @property
  def sort_key(self) -> Tuple[str, str, str, str]:
    return (self.qid or '', self.pid or '', self.literal or '', self.label or '')


class ResultSet(BaseModel):
  """Rows of variable bindings."""

  variables: List[str]
  rows: List[Dict[str, BoundValue]] = Field(default_factory=list)

  @model_validator(mode='after')
  def _rows_bind_variables(self):
    expected = set(self.variables)
    for index, row in enumerate(self.rows):
      if set(row) != expected:
        raise ValueError(f'row {index} binds {sorted(row)}, expected {sorted(expected)}')
    return self


# ============================================================================
# LLM MODELS
# ============================================================================


class ChatMessage(BaseModel):
  """One chat message."""

  role: Literal['system', 'user']
  content: str


class ChatRequest(BaseModel):
  """Provider-agnostic chat-completion request."""

  model: str = Field(..., min_length=1)
  messages: List[ChatMessage] = Field(..., min_length=1)
  temperature: float = Field(default=0.0, ge=0.0, le=2.0)
  max_tokens: Optional[int] = Field(default=None, ge=1)


class Insufficient(BaseModel):
  """Generator judged the subgraph insufficient and nominated entities to expand."""

  kind: Literal['insufficient'] = 'insufficient'
  candidates: List[str] = Field(..., min_length=1)

  @field_validator('candidates')
  @classmethod
  def _well_formed(cls, value: List[str]) -> List[str]:
    for qid in value:
      if not qid.startswith('Q') or not qid[1:].isdigit():
        raise ValueError(f'not a Q-ID: {qid!r}')
    return value


class Sufficient(BaseModel):
  """Generator produced a question, answers and proof (still as surface strings)."""

  kind: Literal['sufficient'] = 'sufficient'
  question: str = Field(..., min_length=1)
  answers: List[str] = Field(..., min_length=1)
  proof: List[Tuple[str, str, str]] = Field(default_factory=list)


GenerationOutcome = Annotated[Union[Insufficient, Sufficient], Field(discriminator='kind')]


class QueryRevision(BaseModel):
  """Revised SPARQL returned by the revision model."""

  correct_sparql: str = Field(..., min_length=1)


# ============================================================================
# PIPELINE MODELS
# ============================================================================


class ExplorationSet(BaseModel):
  """Entities chosen for the next one-hop expansion, in LLM order."""

  ids: List[str] = Field(..., min_length=1)

  @field_validator('ids')
  @classmethod
  def _well_formed(cls, value: List[str]) -> List[str]:
    for qid in value:
      if not qid.startswith('Q') or not qid[1:].isdigit():
        raise ValueError(f'not a Q-ID: {qid!r}')
    return value


class Subgraph(BaseModel):
  """Per-seed evolving context."""

  seed: EntityRef
  triples: List[Triple]
  iteration: int = Field(default=0, ge=0)
  finalized: bool = False
  expanded: List[str] = Field(default_factory=list)


class InstanceMeta(BaseModel):
  """Provenance of a generated candidate."""

  iterations: int
  model: str
  created_at: str
  sparql_source: Literal['synthesized', 'unsynthesized'] = 'synthesized'


class CandidateInstance(BaseModel):
  """Generated question, answers, proof and query awaiting validation."""

  id: str
  seed: EntityRef
  question: str = Field(..., min_length=1)
  answers: List[str] = Field(..., min_length=1)
  proof: List[Triple]
  sparql: str = Field(..., min_length=1)
  subgraph: Subgraph
  meta: InstanceMeta


AbandonReason = Literal[
  'SeedExhausted', 'IterationLimit', 'StepFailed', 'ProofResolutionFailed', 'Infrastructure'
]


class Abandoned(BaseModel):
  """A seed that produced no candidate."""

  seed: EntityRef
  reason: AbandonReason
  detail: str = ''
  iterations: int = 0


# ============================================================================
# VALIDATION MODELS
# ============================================================================


class AnswerKey(BaseModel):
  """Canonical comparable answer."""

  model_config = ConfigDict(frozen=True)

  qid: Optional[str] = None
  normalized_label: str = ''

  @model_validator(mode='after')
  def _not_empty(self):
    if self.qid is None and not self.normalized_label:
      raise ValueError('AnswerKey needs a qid or a label')
    return self

  @property
  def sort_key(self) -> Tuple[str, str]:
    return (self.qid or '', self.normalized_label)


FailureClass = Literal['NonExecutable', 'Empty', 'Mismatch', 'Infrastructure']


class AttemptTrace(BaseModel):
  """One execution of a query inside the revision loop."""

  attempt: int
  sparql: str
  failure: Optional[FailureClass] = None
  detail: str = ''
  retrieved: List[AnswerKey] = Field(default_factory=list)


class Accepted(BaseModel):
  """Instance whose query reproduces its answer set."""

  status: Literal['accepted'] = 'accepted'
  final_sparql: str
  retrieved: List[AnswerKey]
  attempts: int = Field(..., ge=0, le=MAX_REVISION_ATTEMPTS)
  trace: List[AttemptTrace] = Field(default_factory=list)


class Rejected(BaseModel):
  """Instance discarded by validation."""

  status: Literal['rejected'] = 'rejected'
  reason: FailureClass
  attempts: int = Field(..., ge=0, le=MAX_REVISION_ATTEMPTS)
  detail: str = ''
  trace: List[AttemptTrace] = Field(default_factory=list)


ValidationOutcome = Annotated[Union[Accepted, Rejected], Field(discriminator='status')]


class RejectionRecord(BaseModel):
  """Line of the rejected-instance sidecar file."""

  id: str
  question: str
  answers: List[str]
  sparql: str
  reason: FailureClass
  attempts: int
  detail: str = ''
  trace: List[AttemptTrace] = Field(default_factory=list)


# ============================================================================
# DATASET MODELS
# ============================================================================


class RecordMeta(BaseModel):
  """Provenance stored with a released instance."""

  iterations: int
  validation_attempts: int
  model: str
  created_at: str


class InstanceRecord(BaseModel):
  """Released, verified instance (one JSONL line)."""

  id: str = Field(..., min_length=1)
  seed: EntityRef
  question: str = Field(..., min_length=1)
  answers: List[str] = Field(..., min_length=1)
  proof: List[Tuple[str, str, str]] = Field(..., min_length=1)
  sparql: str = Field(..., min_length=1)
  meta: RecordMeta


class SplitSpec(BaseModel):
  """Train/dev/test split parameters."""

  dev_fraction: float = 0.1
  test_fraction: float = 0.1
  seed: int = 0

  @model_validator(mode='after')
  def _feasible(self):
    if self.dev_fraction <= 0 or self.test_fraction <= 0:
      raise ValueError('split fractions must be positive')
    if self.dev_fraction + self.test_fraction >= 1:
      raise ValueError('dev_fraction + test_fraction must be < 1')
    return self


class DatasetStats(BaseModel):
  """Corpus statistics: question length and answer-set size histograms."""

  count: int
  question_length: Dict[str, int]
  answer_count: Dict[str, int]
  question_length_pct: Dict[str, float]
  answer_count_pct: Dict[str, float]


# ============================================================================
# EVALUATION MODELS
# ============================================================================


class PredictionRecord(BaseModel):
  """Ranked predictions of a QA system for one instance."""

  id: str = Field(..., min_length=1)
  predictions: List[str] = Field(default_factory=list)


class MatchResult(BaseModel):
  """One-to-one pairing between predictions and gold answers."""

  instance_id: str = ''
  pairs: List[Tuple[int, int]] = Field(default_factory=list)
  mode: Literal['em', 'lasm'] = 'em'


class InstanceScores(BaseModel):
  """Per-instance metrics, each in [0, 1]."""

  precision: float = Field(..., ge=0.0, le=1.0)
  recall: float = Field(..., ge=0.0, le=1.0)
  f1: float = Field(..., ge=0.0, le=1.0)
  hit1: float = Field(..., ge=0.0, le=1.0)
  accuracy: float = Field(..., ge=0.0, le=1.0)


class MetricReport(BaseModel):
  """Macro-averaged metrics (x100, two decimals)."""

  mode: Literal['em', 'lasm']
  accuracy: float = Field(..., ge=0.0, le=100.0)
  hit1: float = Field(..., ge=0.0, le=100.0)
  f1: float = Field(..., ge=0.0, le=100.0)
  precision: float = Field(..., ge=0.0, le=100.0)
  recall: float = Field(..., ge=0.0, le=100.0)
  count: int
  judge_calls: int = 0
  cache_hits: int = 0


# ============================================================================
# CLI MODELS
# ============================================================================


class RunSummary(BaseModel):
  """Outcome counts of a batch command."""

  command: str
  counts: Dict[str, int] = Field(default_factory=dict)
  retention: Optional[float] = None
  exit_status: int = 0
