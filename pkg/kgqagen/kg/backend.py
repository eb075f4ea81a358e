"""Knowledge-graph backends: in-memory store or a remote SPARQL 1.1 endpoint.

Both answer the same two calls, ``one_hop`` sampling and query ``execute``, so the
pipeline and the verifier never know which one they talk to.
"""

import logging
import random
import re
import time
from typing import Any, Dict, List, Optional, Protocol

import httpx

from kgqagen.config import AppConfig, KgConfig
from kgqagen.errors import (
  EndpointError,
  QueryRejectedError,
  QueryTimeoutError,
  RequestTimeoutError,
)
from kgqagen.kg import sparql
from kgqagen.kg.store import TripleStore, load_tsv, sample_triples, triple_sort_key
from kgqagen.models import BoundValue, EntityRef, LiteralTerm, PredicateRef, ResultSet, Triple
from kgqagen.services.http import RetryingClient, RetryPolicy, Sleep

logger = logging.getLogger(__name__)

ENTITY_URI_RE = re.compile(r'^https?://www\.wikidata\.org/entity/(Q[0-9]+)$')
PROPERTY_URI_RE = re.compile(
  r'^https?://www\.wikidata\.org/(?:entity|prop/direct)/(P[0-9]+)$'
)
XSD = 'http://www.w3.org/2001/XMLSchema#'
NUMBER_TYPES = {f'{XSD}{t}' for t in ('decimal', 'integer', 'double', 'float', 'int', 'long')}
DATE_TYPES = {f'{XSD}{t}' for t in ('dateTime', 'date', 'gYear', 'gYearMonth')}
RESULTS_MEDIA_TYPE = 'application/sparql-results+json'

ONE_HOP_OUT = '{ VALUES ?s { wd:%(qid)s } ?s ?direct ?o . }'
ONE_HOP_IN = '{ VALUES ?o { wd:%(qid)s } ?s ?direct ?o . }'
ONE_HOP_TEMPLATE = """SELECT ?s ?sLabel ?prop ?propLabel ?o ?oLabel WHERE {
  %(blocks)s
  ?prop wikibase:directClaim ?direct .
  SERVICE wikibase:label { bd:serviceParam wikibase:language "en". }
}
LIMIT %(cap)d"""


class KgBackend(Protocol):
  """What the pipeline and the verifier need from a knowledge graph."""

  def one_hop(self, qid: str, k: int, rng: random.Random) -> List[Triple]: ...

  def execute(self, text: str) -> ResultSet: ...


class InMemoryBackend:
  """Backend over a loaded ``TripleStore``; queries go through the restricted parser."""

  def __init__(self, store: TripleStore, direction: str = 'both'):
    self.store = store
    self.direction = direction

  def one_hop(self, qid: str, k: int, rng: random.Random) -> List[Triple]:
    return self.store.sample_one_hop(qid, k, rng, self.direction)

  def execute(self, text: str) -> ResultSet:
    return sparql.evaluate(sparql.parse(text), self.store)


class RemoteBackend:
  """SPARQL 1.1 Protocol client (POST, results JSON) with retries and an in-flight cap.

  Query text is sent unchanged, so queries outside the restricted grammar still run.
  """

  def __init__(
    self,
    endpoint_url: str,
    user_agent: str,
    timeout_s: float = 60.0,
    policy: RetryPolicy = RetryPolicy(),
    max_in_flight: int = 2,
    fetch_cap: int = 100,
    direction: str = 'both',
    transport: Optional[httpx.BaseTransport] = None,
    sleep: Sleep = time.sleep,
  ):
    if not user_agent.strip():
      raise ValueError('A descriptive User-Agent is required for remote SPARQL endpoints')
    self.endpoint_url = endpoint_url
    self.fetch_cap = fetch_cap
    self.direction = direction
    client = httpx.Client(
      timeout=timeout_s,
      headers={'User-Agent': user_agent, 'Accept': RESULTS_MEDIA_TYPE},
      transport=transport,
    )
    self.http = RetryingClient(
      client,
      policy=policy,
      max_in_flight=max_in_flight,
      sleep=sleep,
      retry_timeouts=False,
      is_final=_is_query_timeout,
    )

  @property
  def retries_total(self) -> int:
    return self.http.retries_total

  def execute(self, text: str) -> ResultSet:
    """Run a query and decode the results document.

    Raises:
        QueryRejectedError: The endpoint reports the query as malformed
        QueryTimeoutError: The query timed out on either side
        EndpointError: Unexpected status or malformed results JSON
        InfrastructureError: Transport/status failures after the retry policy
    """
    try:
      response = self.http.post(self.endpoint_url, data={'query': text})
    except RequestTimeoutError as e:
      raise QueryTimeoutError(str(e)) from e

    if response.status_code == 400:
      raise QueryRejectedError(' '.join(response.text.split())[:300])
    if _is_query_timeout(response):
      raise QueryTimeoutError(f'endpoint timed out (HTTP {response.status_code})')
    if response.status_code != 200:
      raise EndpointError(f'unexpected HTTP {response.status_code} from {self.endpoint_url}')

    try:
      document = response.json()
    except ValueError as e:
      raise EndpointError(f'results are not JSON: {e}') from e
    return decode_results(document)

  def one_hop(self, qid: str, k: int, rng: random.Random) -> List[Triple]:
    result = self.execute(one_hop_query(qid, self.direction, self.fetch_cap))
    pool = sorted(set(_rows_to_triples(result)), key=triple_sort_key)
    logger.debug(f'Fetched {len(pool)} neighbour triples of {qid}')
    return sample_triples(pool, k, rng)

  def close(self) -> None:
    self.http.close()


def _is_query_timeout(response: httpx.Response) -> bool:
  return response.status_code >= 500 and 'TimeoutException' in response.text


def one_hop_query(qid: str, direction: str, cap: int) -> str:
  """Template query for the direct-claim neighbourhood of ``qid``."""
  blocks = {
    'out': [ONE_HOP_OUT],
    'in': [ONE_HOP_IN],
    'both': [ONE_HOP_OUT, ONE_HOP_IN],
  }[direction]
  union = '\n  UNION\n  '.join(block % {'qid': qid} for block in blocks)
  return ONE_HOP_TEMPLATE % {'blocks': union, 'cap': cap}


def _decode_term(term: Dict[str, Any]) -> BoundValue:
  value = term.get('value')
  if not isinstance(value, str):
    raise EndpointError(f'binding without a string value: {term!r}')
  if term.get('type') == 'uri':
    entity = ENTITY_URI_RE.match(value)
    if entity:
      return BoundValue(qid=entity.group(1))
    prop = PROPERTY_URI_RE.match(value)
    if prop:
      return BoundValue(pid=prop.group(1))
  return BoundValue(literal=value, datatype=term.get('datatype'))


def decode_results(document: Any) -> ResultSet:
  """Decode an ``application/sparql-results+json`` document.

  ``?xLabel`` columns are folded into the label of ``?x``; rows leaving a variable
  unbound are dropped.

  Raises:
      EndpointError: If the document does not have the standard shape
  """
  try:
    names = list(document['head']['vars'])
    bindings = document['results']['bindings']
  except (KeyError, TypeError) as e:
    raise EndpointError(f'malformed results document: missing {e}') from e
  if not isinstance(bindings, list):
    raise EndpointError('malformed results document: bindings is not a list')

  variables = [v for v in names if not (v.endswith('Label') and v[: -len('Label')] in names)]
  rows: List[Dict[str, BoundValue]] = []
  for binding in bindings:
    if not isinstance(binding, dict) or any(v not in binding for v in variables):
      continue
    row = {}
    for name in variables:
      bound = _decode_term(binding[name])
      label = binding.get(f'{name}Label', {}).get('value')
      if label is not None and bound.literal is None:
        bound = bound.model_copy(update={'label': label})
      row[name] = bound
    rows.append(row)
  return ResultSet(variables=variables, rows=rows)


def _literal_kind(datatype: Optional[str]) -> str:
  if datatype in DATE_TYPES:
    return 'date'
  if datatype in NUMBER_TYPES:
    return 'number'
  return 'plain'


def _rows_to_triples(result: ResultSet) -> List[Triple]:
  triples = []
  for row in result.rows:
    subject, prop, obj = row['s'], row['prop'], row['o']
    if subject.qid is None or prop.pid is None:
      continue
    if obj.qid is not None:
      object_term = EntityRef(label=obj.label or '', qid=obj.qid)
    elif obj.literal is not None:
      object_term = LiteralTerm(value=obj.literal, kind=_literal_kind(obj.datatype))
    else:
      continue
    triples.append(
      Triple(
        subject=EntityRef(label=subject.label or '', qid=subject.qid),
        predicate=PredicateRef(label=prop.label or prop.pid, pid=prop.pid),
        object=object_term,
      )
    )
  return triples


def backend_from_config(
  config: AppConfig,
  transport: Optional[httpx.BaseTransport] = None,
  sleep: Sleep = time.sleep,
) -> KgBackend:
  """Build the backend selected by ``kg.mode``."""
  kg: KgConfig = config.kg
  direction = config.pipeline.direction
  if kg.mode == 'in_memory':
    return InMemoryBackend(load_tsv(kg.fixture_path), direction)
  return RemoteBackend(
    endpoint_url=kg.endpoint_url,
    user_agent=kg.user_agent,
    timeout_s=kg.timeout_s,
    policy=RetryPolicy.from_config(kg.retry),
    max_in_flight=kg.max_in_flight,
    fetch_cap=kg.fetch_cap,
    direction=direction,
    transport=transport,
    sleep=sleep,
  )
