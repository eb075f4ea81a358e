"""Tests for configuration loading and validation."""

from pathlib import Path

import pytest

from kgqagen.config import (
  AppConfig,
  KgConfig,
  LlmConfig,
  PathsConfig,
  PipelineConfig,
  get_api_key,
  get_config,
  load_config,
  reset_config,
  validate_config,
)
from kgqagen.errors import ConfigError


def _config(**sections):
  return AppConfig(
    kg=sections.get('kg', KgConfig(fixture_path=Path(__file__))),
    llm=sections.get('llm', LlmConfig()),
    pipeline=sections.get('pipeline', PipelineConfig()),
    paths=sections.get('paths', PathsConfig()),
  )


def test_fixture_config_loads(fixture_config):
  assert fixture_config.kg.mode == 'in_memory'
  assert fixture_config.llm.provider == 'scripted'
  assert fixture_config.pipeline.init_k == 15
  assert fixture_config.pipeline.max_revision_attempts == 3
  assert fixture_config.pipeline.generator_model == fixture_config.llm.generator_model


def test_relative_paths_resolve_against_the_document(tmp_path):
  (tmp_path / 'graph.tsv').write_text('', encoding='utf-8')
  (tmp_path / 'script.json').write_text('[]', encoding='utf-8')
  path = tmp_path / 'nested' / 'config.yaml'
  path.parent.mkdir()
  path.write_text(
    'kg:\n'
    '  fixture_path: ../graph.tsv\n'
    'llm:\n'
    '  provider: scripted\n'
    '  script_path: ../script.json\n'
    'paths:\n'
    '  output_dir: out\n',
    encoding='utf-8',
  )
  config = load_config(path)
  assert config.kg.fixture_path == path.parent.resolve() / '../graph.tsv'
  assert config.kg.fixture_path.exists()
  assert config.paths.output_dir == path.parent.resolve() / 'out'
  assert config.paths.seeds_file is None
  assert config.source == path


def test_json_documents_are_accepted(tmp_path, write_config):
  yaml_config = load_config(write_config())
  path = tmp_path / 'config.json'
  path.write_text(
    '{"kg": {"mode": "in_memory", "fixture_path": "%s"},'
    ' "llm": {"provider": "scripted", "script_path": "%s"}}'
    % (yaml_config.kg.fixture_path, yaml_config.llm.script_path),
    encoding='utf-8',
  )
  assert load_config(path).kg.fixture_path == yaml_config.kg.fixture_path


def test_missing_document(tmp_path):
  with pytest.raises(ConfigError) as info:
    load_config(tmp_path / 'absent.yaml')
  assert 'not found' in info.value.problems[0]


@pytest.mark.parametrize('text', ['kg: [unclosed', '- just\n- a list\n'])
def test_unusable_document(tmp_path, text):
  path = tmp_path / 'config.yaml'
  path.write_text(text, encoding='utf-8')
  with pytest.raises(ConfigError):
    load_config(path)


def test_every_problem_is_reported(write_config):
  path = write_config(pipeline={'init_k': 0, 'direction': 'sideways'}, llm={'temperature': 3})
  with pytest.raises(ConfigError) as info:
    load_config(path)
  problems = '\n'.join(info.value.problems)
  assert 'pipeline.init_k must be positive' in problems
  assert 'pipeline.direction' in problems
  assert 'llm.temperature' in problems


def test_validate_config_modes():
  assert validate_config(_config()) == []
  assert validate_config(_config(kg=KgConfig(mode='remote', user_agent='x/1 (a@b.c)'))) == []

  remote = validate_config(_config(kg=KgConfig(mode='remote')))
  assert remote == ['kg.user_agent is required when kg.mode is remote']

  missing = validate_config(_config(kg=KgConfig(fixture_path=None)))
  assert missing == ['kg.fixture_path is required when kg.mode is in_memory']

  scripted = validate_config(_config(llm=LlmConfig(provider='scripted')))
  assert scripted == ['llm.script_path is required when llm.provider is scripted']

  unknown = validate_config(_config(llm=LlmConfig(provider='carrier-pigeon')))
  assert len(unknown) == 1


def test_requests_per_minute_zero_disables_limit():
  assert validate_config(_config(llm=LlmConfig(requests_per_minute=0))) == []
  assert validate_config(_config(llm=LlmConfig(requests_per_minute=-1)))


def test_revision_attempts_are_capped_at_three():
  assert validate_config(_config(pipeline=PipelineConfig(max_revision_attempts=3))) == []
  problems = validate_config(_config(pipeline=PipelineConfig(max_revision_attempts=4)))
  assert problems == ['pipeline.max_revision_attempts must be at most 3, got 4']


def test_get_config_is_cached(write_config):
  path = write_config()
  first = get_config(path)
  assert get_config() is first
  reset_config()
  assert get_config(path) is not first


def test_api_key_comes_from_the_named_variable(monkeypatch):
  monkeypatch.setenv('KGQAGEN_CONFIG_TEST_KEY', 'sk-from-env')
  assert get_api_key(LlmConfig(api_key_env='KGQAGEN_CONFIG_TEST_KEY')) == 'sk-from-env'


def test_missing_api_key(monkeypatch):
  monkeypatch.delenv('KGQAGEN_CONFIG_TEST_KEY', raising=False)
  with pytest.raises(ConfigError) as info:
    get_api_key(LlmConfig(api_key_env='KGQAGEN_CONFIG_TEST_KEY'))
  assert 'KGQAGEN_CONFIG_TEST_KEY' in info.value.problems[0]
