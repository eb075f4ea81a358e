"""Centralized configuration management for kgqagen.

This module provides a unified configuration system:
- All settings live in one document (default: config/base.yaml). JSON documents are
  accepted too, since YAML is a superset of JSON.
- Relative paths inside the document are resolved against the document's directory.
- Secrets come from environment variables only:
  - the chat-completion API key, read from the variable named by ``llm.api_key_env``
    (after loading .env and .env.local)

Usage:
    from kgqagen.config import get_config

    config = get_config()
    print(config.kg.mode)
    print(config.pipeline.init_k)
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from kgqagen.errors import ConfigError
from kgqagen.models import MAX_REVISION_ATTEMPTS

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / 'config' / 'base.yaml'
DIRECTIONS = ('out', 'in', 'both')


@dataclass
class RetryConfig:
  """Retry policy for an HTTP integration."""

  max_attempts: int = 5
  base_delay_s: float = 1.0
  max_delay_s: float = 30.0


@dataclass
class KgConfig:
  """Knowledge-graph backend configuration."""

  mode: str = 'in_memory'
  fixture_path: Optional[Path] = None
  endpoint_url: str = 'https://query.wikidata.org/sparql'
  user_agent: str = ''
  timeout_s: float = 60.0
  max_in_flight: int = 2
  fetch_cap: int = 100
  retry: RetryConfig = field(default_factory=RetryConfig)


@dataclass
class LlmConfig:
  """Chat-completion provider configuration."""

  provider: str = 'http'
  base_url: str = 'https://api.openai.com/v1'
  generator_model: str = 'gpt-4.1'
  revision_model: str = 'gpt-4o-mini'
  judge_model: str = 'gpt-4o-mini'
  api_key_env: str = 'OPENAI_API_KEY'
  max_concurrency: int = 4
  requests_per_minute: int = 500
  timeout_s: float = 120.0
  temperature: float = 0.0
  script_path: Optional[Path] = None
  retry: RetryConfig = field(default_factory=RetryConfig)


@dataclass
class PipelineConfig:
  """Generation and validation loop settings."""

  init_k: int = 15
  expand_k: int = 12
  max_iterations: int = 5
  max_subgraph_triples: int = 200
  direction: str = 'both'
  rng_seed: int = 0
  max_revision_attempts: int = 3
  generator_model: str = 'gpt-4.1'
  revision_model: str = 'gpt-4o-mini'
  temperature: float = 0.0
  deterministic: bool = False


@dataclass
class PathsConfig:
  """Input/output locations."""

  seeds_file: Optional[Path] = None
  output_dir: Path = Path('output')


@dataclass
class AppConfig:
  """Complete application configuration."""

  kg: KgConfig
  llm: LlmConfig
  pipeline: PipelineConfig
  paths: PathsConfig
  source: Optional[Path] = None


def _resolve(base_dir: Path, value: Optional[str]) -> Optional[Path]:
  if value in (None, ''):
    return None
  path = Path(value).expanduser()
  return path if path.is_absolute() else (base_dir / path)


def _retry(block: Optional[Dict[str, Any]]) -> RetryConfig:
  block = block or {}
  defaults = RetryConfig()
  return RetryConfig(
    max_attempts=int(block.get('max_attempts', defaults.max_attempts)),
    base_delay_s=float(block.get('base_delay_s', defaults.base_delay_s)),
    max_delay_s=float(block.get('max_delay_s', defaults.max_delay_s)),
  )


def config_from_dict(raw: Dict[str, Any], base_dir: Path) -> AppConfig:
  """Build an ``AppConfig`` from a parsed document.

  Args:
      raw: Parsed configuration document
      base_dir: Directory relative paths are resolved against

  Returns:
      AppConfig: configuration with defaults filled in (not yet validated)
  """
  kg = raw.get('kg') or {}
  llm = raw.get('llm') or {}
  pipeline = raw.get('pipeline') or {}
  paths = raw.get('paths') or {}

  kg_defaults = KgConfig()
  kg_config = KgConfig(
    mode=kg.get('mode', kg_defaults.mode),
    fixture_path=_resolve(base_dir, kg.get('fixture_path')),
    endpoint_url=kg.get('endpoint_url', kg_defaults.endpoint_url),
    user_agent=kg.get('user_agent', kg_defaults.user_agent),
    timeout_s=float(kg.get('timeout_s', kg_defaults.timeout_s)),
    max_in_flight=int(kg.get('max_in_flight', kg_defaults.max_in_flight)),
    fetch_cap=int(kg.get('fetch_cap', kg_defaults.fetch_cap)),
    retry=_retry(kg.get('retry')),
  )

  llm_defaults = LlmConfig()
  llm_config = LlmConfig(
    provider=llm.get('provider', llm_defaults.provider),
    base_url=llm.get('base_url', llm_defaults.base_url),
    generator_model=llm.get('generator_model', llm_defaults.generator_model),
    revision_model=llm.get('revision_model', llm_defaults.revision_model),
    judge_model=llm.get('judge_model', llm_defaults.judge_model),
    api_key_env=llm.get('api_key_env', llm_defaults.api_key_env),
    max_concurrency=int(llm.get('max_concurrency', llm_defaults.max_concurrency)),
    requests_per_minute=int(llm.get('requests_per_minute', llm_defaults.requests_per_minute)),
    timeout_s=float(llm.get('timeout_s', llm_defaults.timeout_s)),
    temperature=float(llm.get('temperature', llm_defaults.temperature)),
    script_path=_resolve(base_dir, llm.get('script_path')),
    retry=_retry(llm.get('retry')),
  )

  pipeline_defaults = PipelineConfig()
  pipeline_config = PipelineConfig(
    init_k=int(pipeline.get('init_k', pipeline_defaults.init_k)),
    expand_k=int(pipeline.get('expand_k', pipeline_defaults.expand_k)),
    max_iterations=int(pipeline.get('max_iterations', pipeline_defaults.max_iterations)),
    max_subgraph_triples=int(
      pipeline.get('max_subgraph_triples', pipeline_defaults.max_subgraph_triples)
    ),
    direction=pipeline.get('direction', pipeline_defaults.direction),
    rng_seed=int(pipeline.get('rng_seed', pipeline_defaults.rng_seed)),
    max_revision_attempts=int(
      pipeline.get('max_revision_attempts', pipeline_defaults.max_revision_attempts)
    ),
    generator_model=llm_config.generator_model,
    revision_model=llm_config.revision_model,
    temperature=llm_config.temperature,
  )

  paths_config = PathsConfig(
    seeds_file=_resolve(base_dir, paths.get('seeds_file')),
    output_dir=_resolve(base_dir, paths.get('output_dir')) or PathsConfig().output_dir,
  )

  return AppConfig(kg=kg_config, llm=llm_config, pipeline=pipeline_config, paths=paths_config)


def validate_config(config: AppConfig) -> List[str]:
  """Check a configuration for missing or inconsistent values.

  Args:
      config: Configuration to check

  Returns:
      List of human-readable problems (empty when the configuration is usable)
  """
  problems: List[str] = []

  counts = {
    'kg.timeout_s': config.kg.timeout_s,
    'kg.max_in_flight': config.kg.max_in_flight,
    'kg.fetch_cap': config.kg.fetch_cap,
    'kg.retry.max_attempts': config.kg.retry.max_attempts,
    'llm.max_concurrency': config.llm.max_concurrency,
    'llm.timeout_s': config.llm.timeout_s,
    'llm.retry.max_attempts': config.llm.retry.max_attempts,
    'pipeline.init_k': config.pipeline.init_k,
    'pipeline.expand_k': config.pipeline.expand_k,
    'pipeline.max_iterations': config.pipeline.max_iterations,
    'pipeline.max_subgraph_triples': config.pipeline.max_subgraph_triples,
    'pipeline.max_revision_attempts': config.pipeline.max_revision_attempts,
  }
  for name, value in counts.items():
    if value <= 0:
      problems.append(f'{name} must be positive, got {value}')

  if config.pipeline.max_revision_attempts > MAX_REVISION_ATTEMPTS:
    problems.append(
      f'pipeline.max_revision_attempts must be at most {MAX_REVISION_ATTEMPTS}, '
      f'got {config.pipeline.max_revision_attempts}'
    )
  if config.llm.requests_per_minute < 0:
    problems.append('llm.requests_per_minute must be >= 0 (0 disables the limit)')
  if not 0 <= config.llm.temperature <= 2:
    problems.append(f'llm.temperature must be within [0, 2], got {config.llm.temperature}')
  if config.pipeline.direction not in DIRECTIONS:
    problems.append(f'pipeline.direction must be one of {DIRECTIONS}')

  if config.kg.mode == 'in_memory':
    if config.kg.fixture_path is None:
      problems.append('kg.fixture_path is required when kg.mode is in_memory')
    elif not config.kg.fixture_path.exists():
      problems.append(f'kg.fixture_path not found: {config.kg.fixture_path}')
  elif config.kg.mode == 'remote':
    if not config.kg.endpoint_url:
      problems.append('kg.endpoint_url is required when kg.mode is remote')
    if not config.kg.user_agent.strip():
      problems.append('kg.user_agent is required when kg.mode is remote')
  else:
    problems.append(f'kg.mode must be in_memory or remote, got {config.kg.mode!r}')

  if config.llm.provider == 'http':
    if not config.llm.base_url:
      problems.append('llm.base_url is required when llm.provider is http')
    if not config.llm.api_key_env:
      problems.append('llm.api_key_env is required when llm.provider is http')
  elif config.llm.provider == 'scripted':
    if config.llm.script_path is None:
      problems.append('llm.script_path is required when llm.provider is scripted')
    elif not config.llm.script_path.exists():
      problems.append(f'llm.script_path not found: {config.llm.script_path}')
  else:
    problems.append(f'llm.provider must be http or scripted, got {config.llm.provider!r}')

  return problems


def load_config(path: Optional[Path] = None) -> AppConfig:
  """Load and validate configuration.

  Args:
      path: Configuration document; defaults to config/base.yaml

  Returns:
      AppConfig: Fully loaded and validated configuration

  Raises:
      ConfigError: If the document is missing, unparsable or invalid
  """
  config_path = Path(path) if path else DEFAULT_CONFIG_PATH
  if not config_path.exists():
    raise ConfigError([f'Configuration not found: {config_path}'])

  try:
    with open(config_path, encoding='utf-8') as f:
      raw = yaml.safe_load(f) or {}
  except yaml.YAMLError as e:
    raise ConfigError([f'Cannot parse {config_path}: {e}']) from e

  if not isinstance(raw, dict):
    raise ConfigError([f'{config_path} must contain a mapping at the top level'])

  config = config_from_dict(raw, config_path.resolve().parent)
  config.source = config_path

  problems = validate_config(config)
  if problems:
    raise ConfigError(problems)
  return config


def get_api_key(config: LlmConfig) -> str:
  """Read the provider API key from the configured environment variable.

  Raises:
      ConfigError: If the variable is unset
  """
  load_dotenv('.env')
  load_dotenv('.env.local')
  api_key = os.getenv(config.api_key_env)
  if not api_key:
    raise ConfigError(
      [f'{config.api_key_env} not found. Add it to .env.local or export it in the shell.']
    )
  return api_key


# Global config instance (loaded once on first use)
_config: Optional[AppConfig] = None


def get_config(path: Optional[Path] = None) -> AppConfig:
  """Get the application configuration (singleton pattern).

  The configuration is loaded once on first call and cached for subsequent calls.
  """
  global _config
  if _config is None:
    _config = load_config(path)
  return _config


def reset_config() -> None:
  """Reset the global config instance (useful for testing).

  This forces a reload on the next call to get_config().
  """
  global _config
  _config = None
