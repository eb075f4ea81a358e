import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from kgqagen.cli import ExitStatus, cli
from kgqagen.kg.backend import InMemoryBackend
from kgqagen.kg.store import load_tsv
from kgqagen.models import (
  Abandoned,
  CandidateInstance,
  InstanceRecord,
  RecordMeta,
  RejectionRecord,
)
from kgqagen.services import dataset
from kgqagen.services.verifier import answers_equal, canonicalize_answer, resultset_to_answers

REPO_CONFIG = Path(__file__).parent.parent / 'config'
GRAPH_PATH = Path(__file__).parent / 'fixtures' / 'worked_examples.tsv'
EMPTY_QUERY = 'SELECT ?ans WHERE { ?ans wdt:P1411 wd:Q265 }'


@pytest.fixture
def runner():
  return CliRunner()


def _invoke(runner, config_path, *args):
  return runner.invoke(cli, ['--config', str(config_path), *args], obj={})


def _generate(runner, config_path, out_dir):
  return _invoke(runner, config_path, 'generate', '--deterministic', '--out', str(out_dir))


def _verify(runner, config_path, raw_path, out_path, *extra):
  return _invoke(
    runner,
    config_path,
    'verify',
    '--deterministic',
    '--in',
    str(raw_path),
    '--out',
    str(out_path),
    *extra,
  )


def _records(count):
  return [
    InstanceRecord(
      id=f'r{i}',
      seed={'label': 'Johann Martin Schleyer', 'qid': 'Q12712'},
      question=f'Question number {i}?',
      answers=['Johann Martin Schleyer (Q12712)'],
      proof=[('Schleyer (Q12712)', 'place of birth (P19)', 'Oberlauda (Q885402)')],
      sparql='SELECT ?ans WHERE { ?ans wdt:P19 wd:Q885402 }',
      meta=RecordMeta(iterations=0, validation_attempts=0, model='m', created_at='1970-01-01'),
    )
    for i in range(count)
  ]


# ============================================================================
# END TO END ON THE FIXTURE GRAPH
# ============================================================================


def test_generate_and_verify_fixture_graph(runner, write_config, tmp_path):
  config_path = write_config()
  out_dir = tmp_path / 'run'

  generated = _generate(runner, config_path, out_dir)
  assert generated.exit_code == 0, generated.output
  candidates = dataset.read_jsonl(out_dir / 'raw.jsonl', CandidateInstance)
  abandoned = dataset.read_jsonl(out_dir / 'abandoned.jsonl', Abandoned)
  assert [c.seed.qid for c in candidates] == ['Q12712', 'Q752075']
  assert [(a.seed.qid, a.reason) for a in abandoned] == [('Q484245', 'IterationLimit')]

  verified = _verify(runner, config_path, out_dir / 'raw.jsonl', out_dir / 'verified.jsonl')
  assert verified.exit_code == 0, verified.output
  records = dataset.read_jsonl(out_dir / 'verified.jsonl')
  assert len(records) == 2
  assert (out_dir / 'rejected.jsonl').read_text(encoding='utf-8') == ''

  backend = InMemoryBackend(load_tsv(GRAPH_PATH))
  expected = {'Q12712', 'Q752075'}
  found = set()
  for record in records:
    retrieved = resultset_to_answers(backend.execute(record.sparql))
    assert answers_equal(retrieved, [canonicalize_answer(a) for a in record.answers])
    found.update(key.qid for key in retrieved)
  assert found == expected


def test_runs_are_byte_identical(runner, write_config, tmp_path):
  config_path = write_config()
  outputs = []
  for name in ('first', 'second'):
    out_dir = tmp_path / name
    assert _generate(runner, config_path, out_dir).exit_code == 0
    verified = _verify(runner, config_path, out_dir / 'raw.jsonl', out_dir / 'verified.jsonl')
    assert verified.exit_code == 0
    outputs.append({path.name: path.read_bytes() for path in out_dir.iterdir()})
  assert set(outputs[0]) == {'abandoned.jsonl', 'raw.jsonl', 'rejected.jsonl', 'verified.jsonl'}
  assert outputs[0] == outputs[1]


def test_generate_reads_seeds_and_output_dir_from_config(runner, write_config, tmp_path):
  config_path = write_config()
  result = _invoke(runner, config_path, 'generate', '--deterministic')
  assert result.exit_code == 0, result.output
  assert (tmp_path / 'out' / 'raw.jsonl').exists()
  assert 'generated' in result.output


# ============================================================================
# EXIT STATUS
# ============================================================================


def test_verify_with_nothing_accepted_exits_3(runner, write_config, tmp_path):
  out_dir = tmp_path / 'run'
  assert _generate(runner, write_config(), out_dir).exit_code == 0

  raw = out_dir / 'raw.jsonl'
  broken = [
    c.model_copy(update={'sparql': EMPTY_QUERY})
    for c in dataset.read_jsonl(raw, CandidateInstance)
  ]
  dataset.write_jsonl(broken, raw)
  script = tmp_path / 'revisions.json'
  script.write_text(json.dumps(['no idea'] * 20), encoding='utf-8')

  result = _verify(runner, write_config(script), raw, out_dir / 'verified.jsonl')
  assert result.exit_code == ExitStatus.NOTHING_ACCEPTED
  rejected = dataset.read_jsonl(out_dir / 'rejected.jsonl', RejectionRecord)
  assert len(rejected) == 2
  assert (out_dir / 'verified.jsonl').read_text(encoding='utf-8') == ''


def test_exhausted_provider_exits_2(runner, write_config, tmp_path):
  script = tmp_path / 'empty.json'
  script.write_text('[]', encoding='utf-8')
  result = _generate(runner, write_config(script), tmp_path / 'run')
  assert result.exit_code == ExitStatus.INFRASTRUCTURE
  abandoned = dataset.read_jsonl(tmp_path / 'run' / 'abandoned.jsonl', Abandoned)
  assert {a.reason for a in abandoned} == {'Infrastructure'}


def test_invalid_config_exits_1(runner, write_config, tmp_path):
  config_path = write_config(kg={'mode': 'carrier-pigeon'})
  result = _generate(runner, config_path, tmp_path / 'run')
  assert result.exit_code == ExitStatus.USAGE
  assert 'kg.mode' in result.output
  assert not (tmp_path / 'run').exists()


def test_missing_config_exits_1(runner, tmp_path):
  result = _invoke(runner, tmp_path / 'nowhere.yaml', 'validate-config')
  assert result.exit_code == ExitStatus.USAGE
  assert 'Configuration not found' in result.output


def test_deterministic_needs_scripted_provider(runner, tmp_path, monkeypatch):
  monkeypatch.setenv('OPENAI_API_KEY', 'sk-test')
  config_path = tmp_path / 'http.yaml'
  config_path.write_text(
    json.dumps(
      {
        'kg': {'mode': 'in_memory', 'fixture_path': str(GRAPH_PATH)},
        'llm': {'provider': 'http'},
        'paths': {'seeds_file': str(GRAPH_PATH.with_name('worked_examples_seeds.tsv'))},
      }
    ),
    encoding='utf-8',
  )
  result = _generate(runner, config_path, tmp_path / 'run')
  assert result.exit_code == ExitStatus.USAGE
  assert '--deterministic' in result.output


def test_validate_config_accepts_bundled_configs(runner):
  for name in ('base.yaml', 'fixture.yaml'):
    result = _invoke(runner, REPO_CONFIG / name, 'validate-config')
    assert result.exit_code == 0, result.output
    assert 'valid' in result.output


# ============================================================================
# DATASET COMMANDS
# ============================================================================


def test_split_command(runner, write_config, tmp_path):
  source = tmp_path / 'verified.jsonl'
  dataset.write_jsonl(_records(10), source)
  result = _invoke(
    runner, write_config(), 'split', '--in', str(source), '--out', str(tmp_path / 'parts')
  )
  assert result.exit_code == 0, result.output
  sizes = {
    name: len(dataset.read_jsonl(tmp_path / 'parts' / f'{name}.jsonl'))
    for name in ('train', 'dev', 'test')
  }
  assert sizes == {'train': 8, 'dev': 1, 'test': 1}


def test_split_command_refuses_tiny_datasets(runner, write_config, tmp_path):
  source = tmp_path / 'verified.jsonl'
  dataset.write_jsonl(_records(2), source)
  result = _invoke(
    runner, write_config(), 'split', '--in', str(source), '--out', str(tmp_path / 'parts')
  )
  assert result.exit_code == ExitStatus.USAGE
  assert 'cannot split' in result.output


def test_stats_command_writes_report(runner, write_config, tmp_path):
  source = tmp_path / 'verified.jsonl'
  dataset.write_jsonl(_records(4), source)
  report = tmp_path / 'stats.json'
  result = _invoke(runner, write_config(), 'stats', '--in', str(source), '--report', str(report))
  assert result.exit_code == 0, result.output
  assert '4 instances' in result.output
  document = json.loads(report.read_text(encoding='utf-8'))
  assert document['count'] == 4
  assert document['question_length_pct']['<=15'] == 100.0


def test_stats_command_names_bad_line(runner, write_config, tmp_path):
  source = tmp_path / 'verified.jsonl'
  source.write_text('{"id": "x"}\n', encoding='utf-8')
  result = _invoke(runner, write_config(), 'stats', '--in', str(source))
  assert result.exit_code == ExitStatus.USAGE
  assert 'line 1' in result.output


def test_eval_command_em(runner, tmp_path):
  gold, pred, report = tmp_path / 'gold.jsonl', tmp_path / 'pred.jsonl', tmp_path / 'em.json'
  dataset.write_jsonl(_records(2), gold)
  pred.write_text(
    '{"id": "r0", "predictions": ["johann martin schleyer"]}\n'
    '{"id": "r1", "predictions": ["J. M. Schleyer"]}\n',
    encoding='utf-8',
  )
  # no --config: exact match needs no configuration at all
  result = CliRunner().invoke(
    cli,
    ['eval', '--gold', str(gold), '--pred', str(pred), '--report', str(report)],
    obj={},
  )
  assert result.exit_code == 0, result.output
  document = json.loads(report.read_text(encoding='utf-8'))
  assert document['reports']['em']['accuracy'] == 50.0
  assert 'Accuracy' in document['table']


def test_eval_command_both_modes_with_scripted_judge(runner, write_config, tmp_path):
  gold, pred, cache = tmp_path / 'gold.jsonl', tmp_path / 'pred.jsonl', tmp_path / 'judge.jsonl'
  dataset.write_jsonl(_records(1), gold)
  pred.write_text('{"id": "r0", "predictions": ["J. M. Schleyer"]}\n', encoding='utf-8')
  script = tmp_path / 'judge.json'
  script.write_text(json.dumps(['yes']), encoding='utf-8')
  args = ['eval', '--gold', str(gold), '--pred', str(pred), '--mode', 'both', '--cache', str(cache)]

  result = _invoke(runner, write_config(script), *args)
  assert result.exit_code == 0, result.output
  assert 'delta' in result.output
  assert 'judge calls: 1, cache hits: 0' in result.output

  rerun = _invoke(runner, write_config(script), *args)
  assert rerun.exit_code == 0, rerun.output
  assert 'judge calls: 0, cache hits: 1' in rerun.output
