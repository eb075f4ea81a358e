import random

import pytest

from kgqagen.errors import TsvFormatError
from kgqagen.kg.store import (
  TripleStore,
  dump_tsv,
  format_tsv_line,
  load_tsv,
  parse_tsv_line,
  sample_triples,
)
from kgqagen.models import EntityRef, LiteralTerm, PredicateRef, Triple


def _triple(s, p, o):
  return Triple(
    subject=EntityRef(label=f'label {s}', qid=s),
    predicate=PredicateRef(label=f'label {p}', pid=p),
    object=EntityRef(label=f'label {o}', qid=o),
  )


def test_load_fixture_counts(store):
  assert len(store) == 20
  assert store.label('Q12712') == 'Johann Martin Schleyer'
  assert store.label('P1411') == 'nominated for'
  assert store.label('Q999') is None


def test_neighbors_by_direction(store):
  assert len(store.neighbors('Q12712', 'out')) == 2
  assert len(store.neighbors('Q12712', 'in')) == 1
  assert len(store.neighbors('Q12712', 'both')) == 3
  assert len(store.neighbors('Q35637', 'both')) == 4
  assert store.neighbors('Q42', 'both') == []


def test_neighbors_rejects_unknown_direction(store):
  with pytest.raises(ValueError):
    store.neighbors('Q12712', 'sideways')


def test_neighbors_sorted_and_self_loop_once():
  loop = _triple('Q1', 'P1', 'Q1')
  store = TripleStore([_triple('Q1', 'P2', 'Q3'), loop, _triple('Q0', 'P5', 'Q1')])
  both = store.neighbors('Q1', 'both')
  assert [t.key for t in both] == [('Q0', 'P5', 'Q1'), ('Q1', 'P1', 'Q1'), ('Q1', 'P2', 'Q3')]


def test_duplicate_lines_stored_once(tmp_path):
  line = 'A\tQ1\tp\tP1\tB\tQ2\n'
  path = tmp_path / 'dup.tsv'
  path.write_text(line + line, encoding='utf-8')
  assert len(load_tsv(path)) == 1


def test_missing_label_falls_back_to_qid(store):
  unlabeled = [t for t in store if t.missing_label]
  assert len(unlabeled) == 1
  assert unlabeled[0].object.label == 'Q123456789'
  assert unlabeled[0].object.surface == 'Q123456789 (Q123456789)'


def test_literal_objects(store):
  inception = store.outgoing('Q114404')[0]
  assert inception.object == LiteralTerm(value='1920', kind='date')
  assert inception.object_key == 'lit:date:1920'
  assert inception.surface == ['EDP Sciences (Q114404)', 'inception (P571)', '1920']


@pytest.mark.parametrize(
  'line,field',
  [
    ('A\tQ1\tp\tP1\tB', 'line'),
    ('A\tX1\tp\tP1\tB\tQ2', 's_qid'),
    ('A\tQ1\tp\tQ1\tB\tQ2', 'p_pid'),
    ('A\tQ1\tp\tP1\tB\tnope', 'o_qid_or_literal'),
    ('A\tQ1\tp\tP1\tB\tlit:color:red', 'o_qid_or_literal'),
  ],
)
def test_malformed_lines_name_the_field(line, field):
  with pytest.raises(TsvFormatError) as info:
    parse_tsv_line(line, 7)
  assert info.value.line == 7
  assert info.value.field == field


def test_load_reports_line_number(tmp_path):
  path = tmp_path / 'bad.tsv'
  path.write_text('# header\nA\tQ1\tp\tP1\tB\tQ2\nA\tQ1\tp\n', encoding='utf-8')
  with pytest.raises(TsvFormatError) as info:
    load_tsv(path)
  assert info.value.line == 3


def test_dump_and_reload_preserves_store(store, tmp_path):
  path = tmp_path / 'copy.tsv'
  assert dump_tsv(store, path) == len(store)
  assert load_tsv(path) == store


def test_format_tsv_line_keeps_empty_label(store):
  unlabeled = next(t for t in store if t.missing_label)
  assert format_tsv_line(unlabeled).split('\t')[4] == ''


def test_sample_is_bounded_and_deterministic(store):
  pool = list(store)
  first = sample_triples(pool, 5, random.Random(3))
  second = sample_triples(pool, 5, random.Random(3))
  assert first == second
  assert len(first) == 5
  assert len(set(t.key for t in first)) == 5
  assert first == sorted(first, key=lambda t: t.key)


def test_sample_returns_everything_when_k_exceeds_degree(store):
  assert store.sample_one_hop('Q12712', 15, random.Random(0)) == store.neighbors('Q12712')


def test_sample_rejects_non_positive_k(store):
  with pytest.raises(ValueError):
    sample_triples(list(store), 0, random.Random(0))
