"""Exact Match and LLM-Assisted Semantic Match scoring of QA predictions."""

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from kgqagen.errors import FormatError, ScoringError
from kgqagen.models import (
  InstanceRecord,
  InstanceScores,
  MatchResult,
  MetricReport,
  PredictionRecord,
)
from kgqagen.services.dataset import read_jsonl
from kgqagen.services.llm_gateway import (
  Provider,
  ask,
  parse_judge_response,
  render_judge_prompt,
  user_request,
)
from kgqagen.services.verifier import QID_SUFFIX_RE

logger = logging.getLogger(__name__)

METRIC_COLUMNS = {
  'accuracy': 'Accuracy',
  'hit1': 'Hit@1',
  'f1': 'F1',
  'precision': 'Precision',
  'recall': 'Recall',
}
MODES = ('em', 'lasm')


def normalize(answer: str) -> str:
  """Lowercase, trim, collapse whitespace and drop one trailing ``(Q…)``."""
  text = QID_SUFFIX_RE.sub('', answer.strip())
  return ' '.join(text.split()).lower()


def match_em(preds: Sequence[str], gold: Sequence[str], instance_id: str = '') -> MatchResult:
  """One-to-one pairing by normalized string equality."""
  gold_norm = [normalize(g) for g in gold]
  taken = set()
  pairs: List[Tuple[int, int]] = []
  for i, pred in enumerate(preds):
    target = normalize(pred)
    for j, candidate in enumerate(gold_norm):
      if j not in taken and candidate == target:
        taken.add(j)
        pairs.append((i, j))
        break
  return MatchResult(instance_id=instance_id, pairs=pairs, mode='em')


class JudgeCache:
  """Verdicts keyed by (normalized prediction, normalized gold), persisted as JSONL.

  The first verdict recorded for a key is kept for good.
  """

  def __init__(self, path: Optional[Path] = None):
    self.path = path
    self._verdicts: Dict[Tuple[str, str], bool] = {}
    self._lock = threading.Lock()
    if path is not None and path.exists():
      with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
          if not line.strip():
            continue
          try:
            entry = json.loads(line)
            key = (entry['pred'], entry['gold'])
            verdict = entry['verdict']
          except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ScoringError(f'{path}:{lineno}: malformed cache entry') from e
          if not isinstance(verdict, bool):
            raise ScoringError(f'{path}:{lineno}: verdict must be true or false')
          self._verdicts.setdefault(key, verdict)
      logger.info(f'Loaded {len(self._verdicts)} judge verdicts from {path}')

  def __len__(self) -> int:
    return len(self._verdicts)

  def get(self, pred: str, gold: str) -> Optional[bool]:
    with self._lock:
      return self._verdicts.get((pred, gold))

  def put(self, pred: str, gold: str, verdict: bool) -> bool:
    """Record a verdict; returns the verdict in force for the key."""
    with self._lock:
      key = (pred, gold)
      if key in self._verdicts:
        return self._verdicts[key]
      self._verdicts[key] = verdict
      if self.path is not None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'a', encoding='utf-8') as f:
          f.write(json.dumps({'pred': pred, 'gold': gold, 'verdict': verdict}) + '\n')
      return verdict


class LasmJudge:
  """Semantic-equivalence judge backed by a chat model and a verdict cache."""

  def __init__(
    self,
    provider: Provider,
    model: str,
    cache: Optional[JudgeCache] = None,
    temperature: float = 0.0,
  ):
    self.provider = provider
    self.model = model
    self.cache = cache if cache is not None else JudgeCache()
    self.temperature = temperature
    self.calls = 0
    self.cache_hits = 0
    self._lock = threading.Lock()

  def equivalent(self, question: str, prediction: str, gold: str) -> bool:
    """Ask (or recall) whether ``prediction`` and ``gold`` denote the same answer.

    Raises:
        ScoringError: If the judge output stays malformed after one re-ask
        InfrastructureError: If the judge cannot be reached
    """
    key = (normalize(prediction), normalize(gold))
    cached = self.cache.get(*key)
    if cached is not None:
      with self._lock:
        self.cache_hits += 1
      return cached

    request = user_request(
      self.model, render_judge_prompt(question, prediction, gold), self.temperature
    )
    try:
      verdict = ask(self.provider, request, self._counted_parse, reasks=1)
    except FormatError as e:
      raise ScoringError(f'judge gave no usable verdict for {key}: {e}') from e
    return self.cache.put(*key, verdict)

  def _counted_parse(self, text: str) -> bool:
    # runs once per provider response, re-asks included
    with self._lock:
      self.calls += 1
    return parse_judge_response(text)


def match_lasm(
  preds: Sequence[str],
  gold: Sequence[str],
  judge: LasmJudge,
  question: str = '',
  instance_id: str = '',
) -> MatchResult:
  """Exact pairs first, then judge residual pairs in rank order, binding the first yes."""
  exact = match_em(preds, gold, instance_id)
  pairs = list(exact.pairs)
  used_preds = {i for i, _ in pairs}
  used_gold = {j for _, j in pairs}
  for i, pred in enumerate(preds):
    if i in used_preds:
      continue
    for j, answer in enumerate(gold):
      if j in used_gold:
        continue
      if judge.equivalent(question, pred, answer):
        pairs.append((i, j))
        used_preds.add(i)
        used_gold.add(j)
        break
  return MatchResult(instance_id=instance_id, pairs=sorted(pairs), mode='lasm')


def score_instance(match: MatchResult, preds: Sequence[str], gold: Sequence[str]) -> InstanceScores:
  matched = len(match.pairs)
  precision = matched / len(preds) if preds else 0.0
  recall = matched / len(gold) if gold else 0.0
  f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
  hit1 = 1.0 if any(i == 0 for i, _ in match.pairs) else 0.0
  return InstanceScores(precision=precision, recall=recall, f1=f1, hit1=hit1, accuracy=recall)


def aggregate(
  scores: Sequence[InstanceScores], mode: str = 'em', judge_calls: int = 0, cache_hits: int = 0
) -> MetricReport:
  """Macro averages x100, rounded to two decimals.

  Raises:
      ScoringError: If there is nothing to average
  """
  if not scores:
    raise ScoringError('no instances to aggregate')
  means = pd.DataFrame([s.model_dump() for s in scores]).mean()
  return MetricReport(
    mode=mode,
    count=len(scores),
    judge_calls=judge_calls,
    cache_hits=cache_hits,
    **{name: round(float(means[name]) * 100, 2) for name in METRIC_COLUMNS},
  )


def score_dataset(
  gold: Sequence[InstanceRecord],
  predictions: Sequence[PredictionRecord],
  mode: str,
  judge: Optional[LasmJudge] = None,
  workers: int = 1,
) -> MetricReport:
  """Score predictions against gold; instances without predictions score zero.

  Raises:
      ScoringError: On unknown prediction ids, or LASM without a judge
  """
  gold_ids = {r.id for r in gold}
  unknown = [p.id for p in predictions if p.id not in gold_ids]
  if unknown:
    raise ScoringError(f'{len(unknown)} predictions have no gold instance, e.g. {unknown[0]!r}')
  if mode == 'lasm' and judge is None:
    raise ScoringError('LASM scoring needs a judge')

  by_id = {p.id: p.predictions for p in predictions}
  calls_before = judge.calls if judge else 0
  hits_before = judge.cache_hits if judge else 0

  def work(record: InstanceRecord) -> InstanceScores:
    preds = by_id.get(record.id, [])
    if mode == 'lasm':
      match = match_lasm(preds, record.answers, judge, record.question, record.id)
    else:
      match = match_em(preds, record.answers, record.id)
    return score_instance(match, preds, record.answers)

  if workers <= 1:
    scores = [work(r) for r in gold]
  else:
    with ThreadPoolExecutor(max_workers=workers) as pool:
      scores = list(pool.map(work, gold))

  judge_calls = judge.calls - calls_before if judge else 0
  cache_hits = judge.cache_hits - hits_before if judge else 0
  if mode == 'lasm':
    logger.info(f'LASM judge: {judge_calls} calls, {cache_hits} cache hits')
  return aggregate(scores, mode, judge_calls, cache_hits)


def evaluate_files(
  gold_path: Path,
  pred_path: Path,
  modes: Sequence[str] = ('em',),
  judge: Optional[LasmJudge] = None,
  workers: int = 1,
) -> List[MetricReport]:
  gold = read_jsonl(gold_path, InstanceRecord)
  predictions = read_jsonl(pred_path, PredictionRecord)
  return [score_dataset(gold, predictions, mode, judge, workers) for mode in modes]


def render_report_table(reports: Sequence[MetricReport]) -> str:
  """Plain-text table: one row per mode, plus the LASM minus EM delta when both exist."""
  rows = {}
  for report in reports:
    rows[report.mode.upper()] = {
      label: getattr(report, name) for name, label in METRIC_COLUMNS.items()
    }
  frame = pd.DataFrame.from_dict(rows, orient='index', columns=list(METRIC_COLUMNS.values()))
  if 'EM' in frame.index and 'LASM' in frame.index:
    frame.loc['delta'] = frame.loc['LASM'] - frame.loc['EM']
  return frame.to_string(float_format=lambda v: f'{v:.2f}')
