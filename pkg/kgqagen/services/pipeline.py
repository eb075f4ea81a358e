"""Per-seed generation: seed subgraph, expand/judge loop and instance assembly."""

import hashlib
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from kgqagen.config import PipelineConfig
from kgqagen.errors import (
  FormatError,
  InfrastructureError,
  ProofResolutionError,
  QueryExecutionError,
  SeedExhausted,
  StepFailed,
  SynthesisError,
  describe,
)
from kgqagen.kg import sparql
from kgqagen.kg.backend import KgBackend
from kgqagen.models import (
  Abandoned,
  AnswerKey,
  CandidateInstance,
  EntityRef,
  ExplorationSet,
  InstanceMeta,
  Insufficient,
  LiteralTerm,
  Subgraph,
  Sufficient,
  Triple,
)
from kgqagen.services.llm_gateway import (
  Provider,
  ask,
  parse_generation_response,
  render_generator_prompt,
  user_request,
)
from kgqagen.services.verifier import canonicalize_answer, normalize_label

logger = logging.getLogger(__name__)

TRAILING_ID_RE = re.compile(r'(?:^|\()\s*([QP][0-9]+)\s*\)?$')
UNSYNTHESIZED_SPARQL = '# unsynthesizable: answer not expressible from proof'
EPOCH = '1970-01-01T00:00:00+00:00'

GenerationResult = Union[CandidateInstance, Abandoned]


def _labeled_first(triples: List[Triple]) -> List[Triple]:
  return [t for t in triples if not t.missing_label] + [t for t in triples if t.missing_label]


def init_subgraph(
  backend: KgBackend, seed: EntityRef, cfg: PipelineConfig, rng: random.Random
) -> Subgraph:
  """Seed subgraph of up to ``init_k`` one-hop triples.

  Raises:
      SeedExhausted: If the seed has no neighbours
  """
  triples = backend.one_hop(seed.qid, cfg.init_k, rng)
  if not triples:
    raise SeedExhausted(f'{seed.surface} has no neighbours')
  triples = _labeled_first(triples)[: cfg.max_subgraph_triples]
  return Subgraph(seed=seed, triples=triples, iteration=0, expanded=[seed.qid])


def expand(
  subgraph: Subgraph,
  frontier: ExplorationSet,
  backend: KgBackend,
  cfg: PipelineConfig,
  rng: random.Random,
) -> Subgraph:
  """Union ``expand_k`` sampled one-hop triples of each frontier entity into the subgraph.

  Existing triples are never dropped; new ones beyond ``max_subgraph_triples`` are.
  """
  if subgraph.finalized:
    raise ValueError('cannot expand a finalized subgraph')

  known = {t.key for t in subgraph.triples}
  added: List[Triple] = []
  for qid in frontier.ids:
    for triple in backend.one_hop(qid, cfg.expand_k, rng):
      if triple.key not in known:
        known.add(triple.key)
        added.append(triple)

  room = max(0, cfg.max_subgraph_triples - len(subgraph.triples))
  kept = _labeled_first(added)[:room]
  if len(kept) < len(added):
    logger.debug(f'{subgraph.seed.qid}: clipped {len(added) - len(kept)} triples at the cap')

  expanded = subgraph.expanded + [q for q in frontier.ids if q not in subgraph.expanded]
  return subgraph.model_copy(
    update={
      'triples': subgraph.triples + kept,
      'iteration': subgraph.iteration + 1,
      'expanded': expanded,
    }
  )


def step(
  subgraph: Subgraph, llm: Provider, cfg: PipelineConfig
) -> Union[Insufficient, Sufficient]:
  """Ask the generator whether the subgraph supports a question.

  Raises:
      StepFailed: If the output is malformed twice in a row
  """
  request = user_request(cfg.generator_model, render_generator_prompt(subgraph), cfg.temperature)
  try:
    return ask(llm, request, parse_generation_response, reasks=1)
  except FormatError as e:
    raise StepFailed(f'generator output malformed after re-ask: {e}') from e


def _trailing_id(text: str) -> Optional[str]:
  match = TRAILING_ID_RE.search(text.strip())
  return match.group(1) if match else None


def resolve_proof(proof: List[Tuple[str, str, str]], subgraph: Subgraph) -> List[Triple]:
  """Map surface-form proof lines onto subgraph triples by Q-/P-ids.

  Labels are ignored; literal objects match on their value.

  Raises:
      ProofResolutionError: If a line names no triple of the subgraph
  """
  resolved: Dict[Tuple[str, str, str], Triple] = {}
  for s, p, o in proof:
    s_id, p_id, o_id = _trailing_id(s), _trailing_id(p), _trailing_id(o)
    match = None
    for triple in subgraph.triples:
      if triple.subject.qid != s_id or triple.predicate.pid != p_id:
        continue
      if isinstance(triple.object, LiteralTerm):
        if o_id is None and triple.object.value == o.strip():
          match = triple
          break
      elif triple.object.qid == o_id:
        match = triple
        break
    if match is None:
      raise ProofResolutionError(f'proof line {[s, p, o]} is not in the subgraph')
    resolved.setdefault(match.key, match)
  return list(resolved.values())


def synthesize_sparql(proof: List[Triple], answers: List[AnswerKey]) -> str:
  """Build the query whose answer variables range over the answer entities of the proof.

  Every occurrence of an answer entity (or answer literal) becomes its variable; a
  single answer uses ``?ans``, several use ``?ans1``..``?ansN``.

  Raises:
      SynthesisError: If the proof is empty or an answer does not occur in it
  """
  if not proof:
    raise SynthesisError('empty proof')
  keys = list(dict.fromkeys(answers))
  if not keys:
    raise SynthesisError('no answers')
  names = ['ans'] if len(keys) == 1 else [f'ans{i}' for i in range(1, len(keys) + 1)]

  entity_vars: Dict[str, str] = {}
  literal_vars: Dict[str, str] = {}
  for key, name in zip(keys, names, strict=True):
    if key.qid is not None:
      entity_vars.setdefault(key.qid, name)
    else:
      literal_vars.setdefault(key.normalized_label, name)

  used = set()

  def subject_term(ref: EntityRef) -> sparql.PatternTerm:
    if ref.qid in entity_vars:
      used.add(entity_vars[ref.qid])
      return sparql.Var(entity_vars[ref.qid])
    return sparql.EntityIri(ref.qid)

  def object_term(triple: Triple) -> sparql.PatternTerm:
    if isinstance(triple.object, EntityRef):
      return subject_term(triple.object)
    normalized = normalize_label(triple.object.value)
    if normalized in literal_vars:
      used.add(literal_vars[normalized])
      return sparql.Var(literal_vars[normalized])
    return sparql.Lit(triple.object.value)

  patterns = tuple(
    sparql.TriplePattern(
      subject_term(t.subject), sparql.PredicateIri(t.predicate.pid), object_term(t)
    )
    for t in proof
  )
  missing = [n for n in names if n not in used]
  if missing:
    raise SynthesisError(f'answer variables {missing} do not occur in the proof')

  query = sparql.Query(projected=tuple(names), patterns=patterns, label_service=True)
  return sparql.serialize(query)


def instance_id(seed: EntityRef, question: str, answers: List[AnswerKey]) -> str:
  """Content hash of seed, question and sorted answer ids."""
  answer_ids = sorted(k.qid or k.normalized_label for k in answers)
  payload = json.dumps([seed.qid, question, answer_ids], ensure_ascii=False)
  return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]


def _timestamp(cfg: PipelineConfig) -> str:
  if cfg.deterministic:
    return EPOCH
  return datetime.now(timezone.utc).isoformat(timespec='seconds')


def _assemble(
  subgraph: Subgraph, outcome: Sufficient, cfg: PipelineConfig
) -> GenerationResult:
  seed = subgraph.seed
  finalized = subgraph.model_copy(update={'finalized': True})
  try:
    proof = resolve_proof(outcome.proof, finalized)
  except ProofResolutionError as e:
    return Abandoned(
      seed=seed, reason='ProofResolutionFailed', detail=str(e), iterations=subgraph.iteration
    )

  keys = list(dict.fromkeys(canonicalize_answer(a) for a in outcome.answers))
  proof_ids = {t.subject.qid for t in proof} | {
    t.object.qid for t in proof if isinstance(t.object, EntityRef)
  }
  ungrounded = [k.qid for k in keys if k.qid is not None and k.qid not in proof_ids]
  if ungrounded:
    return Abandoned(
      seed=seed,
      reason='ProofResolutionFailed',
      detail=f'answers {ungrounded} do not occur in the proof',
      iterations=subgraph.iteration,
    )

  source = 'synthesized'
  try:
    query = synthesize_sparql(proof, keys)
  except SynthesisError as e:
    logger.info(f'{seed.qid}: no synthesized query ({e}); revision starts from scratch')
    query, source = UNSYNTHESIZED_SPARQL, 'unsynthesized'

  return CandidateInstance(
    id=instance_id(seed, outcome.question, keys),
    seed=seed,
    question=outcome.question,
    answers=outcome.answers,
    proof=proof,
    sparql=query,
    subgraph=finalized,
    meta=InstanceMeta(
      iterations=subgraph.iteration,
      model=cfg.generator_model,
      created_at=_timestamp(cfg),
      sparql_source=source,
    ),
  )


def generate_instance(
  backend: KgBackend,
  llm: Provider,
  seed: EntityRef,
  cfg: PipelineConfig,
  rng: random.Random,
) -> GenerationResult:
  """Run the expand/judge loop for one seed.

  Returns:
      CandidateInstance on success, otherwise Abandoned with the reason
  """
  iteration = 0
  try:
    subgraph = init_subgraph(backend, seed, cfg, rng)
    while True:
      iteration = subgraph.iteration
      outcome = step(subgraph, llm, cfg)
      if isinstance(outcome, Sufficient):
        break
      if subgraph.iteration >= cfg.max_iterations:
        return _abandon(seed, 'IterationLimit', 'iteration cap reached', iteration)
      fresh = [q for q in outcome.candidates if q not in subgraph.expanded]
      if not fresh:
        return _abandon(seed, 'IterationLimit', 'all candidates already expanded', iteration)
      subgraph = expand(subgraph, ExplorationSet(ids=fresh), backend, cfg, rng)
  except SeedExhausted as e:
    return _abandon(seed, 'SeedExhausted', str(e), iteration)
  except StepFailed as e:
    return _abandon(seed, 'StepFailed', str(e), iteration)
  except (InfrastructureError, QueryExecutionError) as e:
    return _abandon(seed, 'Infrastructure', describe(e), iteration)

  result = _assemble(subgraph, outcome, cfg)
  if isinstance(result, CandidateInstance):
    logger.info(f'{seed.qid}: generated {result.id} at iteration {result.meta.iterations}')
  else:
    logger.info(f'{seed.qid}: abandoned:{result.reason}')
  return result


def _abandon(seed: EntityRef, reason: str, detail: str, iterations: int) -> Abandoned:
  logger.info(f'{seed.qid}: abandoned:{reason} ({detail})')
  return Abandoned(seed=seed, reason=reason, detail=detail, iterations=iterations)


def run_generation(
  seeds: List[EntityRef],
  backend: KgBackend,
  llm: Provider,
  cfg: PipelineConfig,
  workers: int = 4,
) -> List[GenerationResult]:
  """Generate for every seed on a thread pool; results keep seed order.

  Each seed gets its own ``random.Random(rng_seed ^ index)``.
  """

  def work(index: int) -> GenerationResult:
    return generate_instance(backend, llm, seeds[index], cfg, random.Random(cfg.rng_seed ^ index))

  if workers <= 1:
    return [work(i) for i in range(len(seeds))]
  with ThreadPoolExecutor(max_workers=workers) as pool:
    return list(pool.map(work, range(len(seeds))))


def read_seeds(path: Path) -> List[EntityRef]:
  """Read a seed list: ``Q-id<TAB>label`` per line, ``#`` comments allowed.

  Raises:
      ValueError: On a malformed line, naming the line number
  """
  seeds: List[EntityRef] = []
  with open(path, encoding='utf-8') as f:
    for lineno, line in enumerate(f, start=1):
      text = line.rstrip('\r\n')
      if not text.strip() or text.lstrip().startswith('#'):
        continue
      qid, _, label = text.partition('\t')
      qid = qid.strip()
      if not re.match(r'^Q[0-9]+$', qid):
        raise ValueError(f'{path}:{lineno}: not a Q-ID: {qid!r}')
      seeds.append(EntityRef(label=label.strip(), qid=qid))
  return seeds
