"""Shared fixtures: the bundled fixture graph, scripted model outputs and configs."""

import json
from pathlib import Path

import pytest
import yaml

from kgqagen.config import PipelineConfig, load_config, reset_config
from kgqagen.kg.backend import InMemoryBackend
from kgqagen.kg.store import load_tsv

FIXTURES = Path(__file__).parent / 'fixtures'
GRAPH_PATH = FIXTURES / 'worked_examples.tsv'
SEEDS_PATH = FIXTURES / 'worked_examples_seeds.tsv'
SCRIPT_PATH = FIXTURES / 'worked_examples_script.json'


@pytest.fixture(autouse=True)
def _fresh_config():
  reset_config()
  yield
  reset_config()


@pytest.fixture
def store():
  return load_tsv(GRAPH_PATH)


@pytest.fixture
def backend(store):
  return InMemoryBackend(store)


@pytest.fixture
def responses():
  """Generator outputs keyed by example name, as JSON text."""
  with open(FIXTURES / 'worked_examples_responses.json', encoding='utf-8') as f:
    raw = json.load(f)
  return {name: json.dumps(value, ensure_ascii=False) for name, value in raw.items()}


@pytest.fixture
def pipeline_cfg():
  return PipelineConfig(deterministic=True)


@pytest.fixture
def write_config(tmp_path):
  """Write a fixture-graph config into tmp_path and return its path."""

  def _write(script_path: Path = SCRIPT_PATH, **overrides) -> Path:
    document = {
      'kg': {'mode': 'in_memory', 'fixture_path': str(GRAPH_PATH)},
      'llm': {'provider': 'scripted', 'script_path': str(script_path)},
      'pipeline': {'rng_seed': 0, 'max_revision_attempts': 3},
      'paths': {'seeds_file': str(SEEDS_PATH), 'output_dir': str(tmp_path / 'out')},
    }
    for section, values in overrides.items():
      document.setdefault(section, {}).update(values)
    path = tmp_path / 'config.yaml'
    path.write_text(yaml.safe_dump(document, sort_keys=False), encoding='utf-8')
    return path

  return _write


@pytest.fixture
def fixture_config(write_config):
  return load_config(write_config())
