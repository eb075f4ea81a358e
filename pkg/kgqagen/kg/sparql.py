"""Restricted SPARQL: parsing, canonical serialization and BGP evaluation.

Supported shape (what the revision prompt asks models to produce):

    [PREFIX p: <iri>]*
    SELECT [DISTINCT] ?v ...
    WHERE { tp . tp . ... [SERVICE wikibase:label { ... }] }
    [LIMIT n]

Triple patterns use variables, ``wd:Q…`` entities, ``wdt:P…`` predicates (or the full
Wikidata IRIs) and quoted literals; ``;`` and ``,`` abbreviations are expanded. Anything
else (OPTIONAL, FILTER, UNION, subqueries, property paths, ...) is a ``ParseError``.
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

from kgqagen.errors import ParseError
from kgqagen.kg.store import TripleStore
from kgqagen.models import BoundValue, ResultSet, Triple

logger = logging.getLogger(__name__)

VAR_NAME_RE = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')
ENTITY_IRI_RE = re.compile(r'^<https?://www\.wikidata\.org/entity/(Q[0-9]+)>$')
DIRECT_IRI_RE = re.compile(r'^<https?://www\.wikidata\.org/prop/direct/(P[0-9]+)>$')
LABEL_SERVICE_CLAUSE = 'SERVICE wikibase:label { bd:serviceParam wikibase:language "en". }'

UNSUPPORTED_KEYWORDS = {
  'OPTIONAL',
  'FILTER',
  'UNION',
  'MINUS',
  'BIND',
  'VALUES',
  'GRAPH',
  'ORDER',
  'GROUP',
  'HAVING',
  'OFFSET',
  'CONSTRUCT',
  'ASK',
  'DESCRIBE',
  'INSERT',
  'DELETE',
  'REDUCED',
  'NOT',
  'EXISTS',
  'FROM',
  'BASE',
}

# ============================================================================
# QUERY AST
# ============================================================================


@dataclass(frozen=True)
class Var:
  name: str

  def __post_init__(self):
    if not VAR_NAME_RE.match(self.name):
      raise ValueError(f'invalid variable name: {self.name!r}')


@dataclass(frozen=True)
class EntityIri:
  qid: str


@dataclass(frozen=True)
class PredicateIri:
  pid: str


@dataclass(frozen=True)
class Lit:
  value: str


PatternTerm = Union[Var, EntityIri, PredicateIri, Lit]


@dataclass(frozen=True)
class TriplePattern:
  s: PatternTerm
  p: PatternTerm
  o: PatternTerm

  def __post_init__(self):
    if not isinstance(self.s, (Var, EntityIri)):
      raise ValueError('subject must be a variable or an entity')
    if not isinstance(self.p, (Var, PredicateIri)):
      raise ValueError('predicate must be a variable or a predicate')

  def variables(self) -> List[str]:
    return [t.name for t in (self.s, self.p, self.o) if isinstance(t, Var)]


@dataclass(frozen=True)
class Query:
  """Parsed query.

  ``label_projections`` keeps ``?xLabel`` style projections; their values are folded into
  the label of ``?x`` rather than returned as separate columns.
  """

  projected: Tuple[str, ...]
  patterns: Tuple[TriplePattern, ...]
  label_service: bool = False
  distinct: bool = False
  limit: Optional[int] = None
  label_projections: Tuple[str, ...] = ()

  def __post_init__(self):
    if not self.patterns:
      raise ValueError('a query needs at least one triple pattern')
    bound = self.pattern_variables()
    for name in self.projected:
      if name not in bound:
        raise ValueError(f'projected variable ?{name} does not occur in any pattern')

  def output_variables(self) -> Tuple[str, ...]:
    """Result columns: projected variables, then the base of each label-only projection."""
    bases = tuple(name[: -len('Label')] for name in self.label_projections)
    return tuple(dict.fromkeys(self.projected + bases))

  def pattern_variables(self) -> List[str]:
    seen: Dict[str, None] = {}
    for pattern in self.patterns:
      for name in pattern.variables():
        seen.setdefault(name)
    return list(seen)


# ============================================================================
# TOKENIZER
# ============================================================================

TOKEN_SPEC = [
  ('SKIP', r'\s+|#[^\n]*'),
  ('IRI', r'<[^<>"{}|^`\\\s]*>'),
  ('VAR', r'[?$][A-Za-z_][A-Za-z0-9_]*'),
  ('STRING', r'"(?:[^"\\\n]|\\.)*"|\'(?:[^\'\\\n]|\\.)*\''),
  ('LANGTAG', r'@[A-Za-z]+(?:-[A-Za-z0-9]+)*'),
  ('DTYPE', r'\^\^'),
  ('PNAME', r'[A-Za-z_][A-Za-z0-9_\-]*:[A-Za-z0-9_]*'),
  ('NUMBER', r'[+-]?[0-9]+(?:\.[0-9]+)?'),
  ('NAME', r'[A-Za-z_][A-Za-z0-9_]*'),
  ('PUNCT', r'[{}().;,*/|^+?!=<>\[\]]'),
]
TOKEN_RE = re.compile('|'.join(f'(?P<{name}>{pattern})' for name, pattern in TOKEN_SPEC))
ESCAPES = {'n': '\n', 't': '\t', 'r': '\r'}


@dataclass(frozen=True)
class Token:
  kind: str
  text: str
  pos: int

  @property
  def upper(self) -> str:
    return self.text.upper()


def tokenize(text: str) -> List[Token]:
  """Split query text into tokens, dropping whitespace and comments."""
  tokens: List[Token] = []
  pos = 0
  while pos < len(text):
    match = TOKEN_RE.match(text, pos)
    if match is None:
      raise ParseError(f'unexpected character {text[pos]!r}', pos)
    kind = match.lastgroup
    if kind != 'SKIP':
      tokens.append(Token(kind, match.group(), pos))
    pos = match.end()
  tokens.append(Token('EOF', '', len(text)))
  return tokens


def _unquote(token: Token) -> str:
  body = token.text[1:-1]
  return re.sub(r'\\(.)', lambda m: ESCAPES.get(m.group(1), m.group(1)), body)


# ============================================================================
# PARSER
# ============================================================================


class _Parser:
  def __init__(self, text: str):
    self.tokens = tokenize(text)
    self.index = 0

  @property
  def current(self) -> Token:
    return self.tokens[self.index]

  def advance(self) -> Token:
    token = self.tokens[self.index]
    if token.kind != 'EOF':
      self.index += 1
    return token

  def at_keyword(self, keyword: str) -> bool:
    return self.current.kind == 'NAME' and self.current.upper == keyword

  def at_punct(self, char: str) -> bool:
    return self.current.kind == 'PUNCT' and self.current.text == char

  def expect_punct(self, char: str) -> Token:
    if not self.at_punct(char):
      found = self.current.text or 'end of query'
      raise ParseError(f'expected {char!r}, found {found!r}', self.current.pos)
    return self.advance()

  def reject_unsupported(self) -> None:
    token = self.current
    if token.kind == 'NAME' and token.upper in UNSUPPORTED_KEYWORDS:
      raise ParseError(f'unsupported construct {token.upper}', token.pos)
    if token.kind == 'NAME' and token.upper == 'SELECT':
      raise ParseError('subqueries are not supported', token.pos)

  def parse(self) -> Query:
    while self.at_keyword('PREFIX'):
      self.advance()
      name = self.advance()
      iri = self.advance()
      if name.kind != 'PNAME' or not name.text.endswith(':') or iri.kind != 'IRI':
        raise ParseError('malformed PREFIX declaration', name.pos)

    self.reject_unsupported_outer()
    if not self.at_keyword('SELECT'):
      raise ParseError('only SELECT queries are supported', self.current.pos)
    self.advance()

    distinct = False
    if self.at_keyword('DISTINCT'):
      self.advance()
      distinct = True
    self.reject_unsupported()

    projected: List[Tuple[str, int]] = []
    while self.current.kind == 'VAR':
      token = self.advance()
      projected.append((token.text[1:], token.pos))
    if not projected:
      raise ParseError(
        'SELECT needs at least one variable (SELECT * is not supported)', self.current.pos
      )

    if self.at_keyword('WHERE'):
      self.advance()
    open_brace = self.expect_punct('{')
    patterns, label_service = self.parse_group()
    self.expect_punct('}')
    if not patterns:
      raise ParseError('empty graph pattern', open_brace.pos)

    limit = None
    if self.at_keyword('LIMIT'):
      self.advance()
      token = self.advance()
      if token.kind != 'NUMBER' or not token.text.isdigit():
        raise ParseError('LIMIT needs a non-negative integer', token.pos)
      limit = int(token.text)

    self.reject_unsupported_outer()
    if self.current.kind != 'EOF':
      raise ParseError(f'unexpected {self.current.text!r} after query', self.current.pos)

    return self.build(projected, patterns, label_service, distinct, limit)

  def reject_unsupported_outer(self) -> None:
    token = self.current
    if token.kind == 'NAME' and token.upper in UNSUPPORTED_KEYWORDS:
      raise ParseError(f'unsupported construct {token.upper}', token.pos)

  def build(
    self,
    projected: List[Tuple[str, int]],
    patterns: List[TriplePattern],
    label_service: bool,
    distinct: bool,
    limit: Optional[int],
  ) -> Query:
    bound = set()
    for pattern in patterns:
      bound.update(pattern.variables())

    plain: List[str] = []
    labels: List[str] = []
    for name, pos in projected:
      if name in plain or name in labels:
        continue
      if name in bound:
        plain.append(name)
      elif label_service and name.endswith('Label') and name[: -len('Label')] in bound:
        labels.append(name)
      else:
        raise ParseError(f'projected variable ?{name} does not occur in any pattern', pos)

    return Query(
      projected=tuple(plain),
      patterns=tuple(patterns),
      label_service=label_service,
      distinct=distinct,
      limit=limit,
      label_projections=tuple(labels),
    )

  def parse_group(self) -> Tuple[List[TriplePattern], bool]:
    patterns: List[TriplePattern] = []
    label_service = False
    while not self.at_punct('}'):
      token = self.current
      if token.kind == 'EOF':
        raise ParseError('unterminated graph pattern', token.pos)
      self.reject_unsupported()
      if token.kind == 'NAME' and token.upper == 'SERVICE':
        if label_service:
          raise ParseError('only a single SERVICE wikibase:label clause is allowed', token.pos)
        self.parse_label_service()
        label_service = True
      elif self.at_punct('{'):
        raise ParseError('nested groups are not supported', token.pos)
      elif self.at_punct('.'):
        self.advance()
      else:
        patterns.extend(self.parse_triples())
    return patterns, label_service

  def parse_label_service(self) -> None:
    self.advance()
    target = self.advance()
    if target.kind != 'PNAME' or target.text != 'wikibase:label':
      raise ParseError('only the wikibase:label SERVICE is supported', target.pos)
    self.expect_punct('{')
    depth = 1
    while depth:
      token = self.advance()
      if token.kind == 'EOF':
        raise ParseError('unterminated SERVICE clause', token.pos)
      if token.kind == 'PUNCT' and token.text == '{':
        depth += 1
      elif token.kind == 'PUNCT' and token.text == '}':
        depth -= 1

  def parse_triples(self) -> List[TriplePattern]:
    subject = self.parse_subject()
    patterns: List[TriplePattern] = []
    while True:
      predicate = self.parse_predicate()
      while True:
        patterns.append(TriplePattern(subject, predicate, self.parse_object()))
        if not self.at_punct(','):
          break
        self.advance()
      if not self.at_punct(';'):
        break
      self.advance()
      if self.at_punct('.') or self.at_punct('}'):
        break
    return patterns

  def parse_subject(self) -> PatternTerm:
    token = self.current
    if token.kind == 'VAR':
      self.advance()
      return Var(token.text[1:])
    entity = self._entity(token)
    if entity is not None:
      self.advance()
      return entity
    if token.kind in ('STRING', 'NUMBER'):
      raise ParseError('literal in subject position', token.pos)
    raise ParseError(f'unsupported subject {token.text!r}', token.pos)

  def parse_predicate(self) -> PatternTerm:
    token = self.current
    if token.kind == 'PUNCT' and token.text in '^!(':
      raise ParseError('property paths are not supported', token.pos)
    if token.kind == 'VAR':
      self.advance()
      term: PatternTerm = Var(token.text[1:])
    elif token.kind == 'PNAME' and re.match(r'^wdt:P[0-9]+$', token.text):
      self.advance()
      term = PredicateIri(token.text[len('wdt:') :])
    elif token.kind == 'IRI' and DIRECT_IRI_RE.match(token.text):
      self.advance()
      term = PredicateIri(DIRECT_IRI_RE.match(token.text).group(1))
    elif token.kind == 'NAME' and token.text == 'a':
      raise ParseError("the 'a' shorthand is not supported; use wdt:P31", token.pos)
    elif token.kind == 'PNAME' and token.text == 'rdfs:label':
      raise ParseError(
        'rdfs:label patterns are not supported; project ?xLabel with SERVICE wikibase:label',
        token.pos,
      )
    else:
      raise ParseError(f'unsupported predicate {token.text!r}', token.pos)

    following = self.current
    if following.kind == 'PUNCT' and following.text in '/|*+?^':
      raise ParseError('property paths are not supported', following.pos)
    return term

  def parse_object(self) -> PatternTerm:
    token = self.current
    if token.kind == 'VAR':
      self.advance()
      return Var(token.text[1:])
    entity = self._entity(token)
    if entity is not None:
      self.advance()
      return entity
    if token.kind == 'STRING':
      self.advance()
      value = _unquote(token)
      if self.current.kind == 'LANGTAG':
        self.advance()
      elif self.current.kind == 'DTYPE':
        self.advance()
        datatype = self.advance()
        if datatype.kind not in ('PNAME', 'IRI'):
          raise ParseError('malformed datatype', datatype.pos)
      return Lit(value)
    if token.kind == 'NUMBER':
      self.advance()
      return Lit(token.text)
    self.reject_unsupported()
    raise ParseError(f'unsupported object {token.text!r}', token.pos)

  @staticmethod
  def _entity(token: Token) -> Optional[EntityIri]:
    if token.kind == 'PNAME' and re.match(r'^wd:Q[0-9]+$', token.text):
      return EntityIri(token.text[len('wd:') :])
    if token.kind == 'IRI':
      match = ENTITY_IRI_RE.match(token.text)
      if match:
        return EntityIri(match.group(1))
    return None


def parse(text: str) -> Query:
  """Parse query text in the supported subset.

  Raises:
      ParseError: with the character offset of the offending construct
  """
  return _Parser(text).parse()


# ============================================================================
# SERIALIZATION
# ============================================================================


def _quote(value: str) -> str:
  escaped = value.replace('\\', '\\\\').replace('"', '\\"')
  escaped = escaped.replace('\n', '\\n').replace('\t', '\\t').replace('\r', '\\r')
  return f'"{escaped}"'


def format_term(term: PatternTerm) -> str:
  if isinstance(term, Var):
    return f'?{term.name}'
  if isinstance(term, EntityIri):
    return f'wd:{term.qid}'
  if isinstance(term, PredicateIri):
    return f'wdt:{term.pid}'
  return _quote(term.value)


def serialize(query: Query) -> str:
  """Canonical single-line text of a query."""
  head = ['SELECT']
  if query.distinct:
    head.append('DISTINCT')
  head.extend(f'?{name}' for name in query.projected + query.label_projections)

  body = [
    f'{format_term(p.s)} {format_term(p.p)} {format_term(p.o)} .' for p in query.patterns
  ]
  if query.label_service:
    body.append(LABEL_SERVICE_CLAUSE)

  text = f'{" ".join(head)} WHERE {{ {" ".join(body)} }}'
  if query.limit is not None:
    text += f' LIMIT {query.limit}'
  return text


# ============================================================================
# EVALUATION
# ============================================================================

Binding = Dict[str, str]


def _concrete(term: PatternTerm, binding: Binding) -> Optional[str]:
  if isinstance(term, Var):
    return binding.get(term.name)
  if isinstance(term, EntityIri):
    return term.qid
  if isinstance(term, PredicateIri):
    return term.pid
  return None


def _match(pattern: TriplePattern, triple: Triple, binding: Binding) -> Optional[Binding]:
  extended = binding
  for term, key in (
    (pattern.s, triple.subject.qid),
    (pattern.p, triple.predicate.pid),
    (pattern.o, triple.object_key),
  ):
    if isinstance(term, Var):
      bound = extended.get(term.name)
      if bound is None:
        if extended is binding:
          extended = dict(binding)
        extended[term.name] = key
      elif bound != key:
        return None
    elif isinstance(term, Lit):
      if not key.startswith('lit:') or key.split(':', 2)[2] != term.value:
        return None
    elif _concrete(term, binding) != key:
      return None
  return extended


def _boundness(pattern: TriplePattern, binding: Binding) -> int:
  score = 0
  if _concrete(pattern.s, binding) is not None:
    score += 4
  if isinstance(pattern.o, Lit) or _concrete(pattern.o, binding) is not None:
    score += 2
  if _concrete(pattern.p, binding) is not None:
    score += 1
  return score


def _candidates(pattern: TriplePattern, binding: Binding, store: TripleStore) -> Iterable[Triple]:
  subject = _concrete(pattern.s, binding)
  if subject is not None:
    return store.outgoing(subject)
  obj = _concrete(pattern.o, binding)
  if obj is not None and obj.startswith('Q'):
    return store.incoming(obj)
  return store


def _solve(
  remaining: List[TriplePattern], binding: Binding, store: TripleStore, out: List[Binding]
) -> None:
  if not remaining:
    out.append(binding)
    return
  # Most constrained pattern first; ties keep query order.
  best = max(range(len(remaining)), key=lambda i: (_boundness(remaining[i], binding), -i))
  pattern = remaining[best]
  rest = remaining[:best] + remaining[best + 1 :]
  for triple in _candidates(pattern, binding, store):
    extended = _match(pattern, triple, binding)
    if extended is not None:
      _solve(rest, extended, store, out)


def _bound_value(key: str, store: TripleStore, with_labels: bool) -> BoundValue:
  if key.startswith('lit:'):
    return BoundValue(literal=key.split(':', 2)[2])
  label = store.label(key) if with_labels else None
  if key.startswith('P'):
    return BoundValue(pid=key, label=label)
  return BoundValue(qid=key, label=label)


def solutions(query: Query, store: TripleStore) -> List[Binding]:
  """All bindings of the pattern variables that satisfy every pattern."""
  found: List[Binding] = []
  _solve(list(query.patterns), {}, store, found)
  return found


def evaluate(query: Query, store: TripleStore) -> ResultSet:
  """Evaluate a basic graph pattern query over a store.

  Rows are the projections of all solutions (duplicates kept unless DISTINCT), sorted
  by their binding keys; LIMIT applies after sorting.
  """
  columns = query.output_variables()
  projected_rows = [tuple(s[name] for name in columns) for s in solutions(query, store)]
  if query.distinct:
    projected_rows = list(dict.fromkeys(projected_rows))
  projected_rows.sort()
  if query.limit is not None:
    projected_rows = projected_rows[: query.limit]

  rows = [
    {
      name: _bound_value(key, store, query.label_service)
      for name, key in zip(columns, row, strict=True)
    }
    for row in projected_rows
  ]
  logger.debug(f'Evaluated query with {len(query.patterns)} patterns: {len(rows)} rows')
  return ResultSet(variables=list(columns), rows=rows)
