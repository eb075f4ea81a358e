"""kgqagen command line: generate, verify, split, stats, eval and validate-config.

Exit status: 0 success, 1 usage/config/input error, 2 infrastructure failure,
3 verification accepted nothing.
"""

import json
import logging
from collections import Counter
from dataclasses import replace
from enum import IntEnum
from pathlib import Path
from typing import Callable, Dict, List, Optional, TypeVar

import click
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from kgqagen.config import AppConfig, load_config
from kgqagen.errors import ConfigError, InfrastructureError, KgqaGenError, describe
from kgqagen.kg.backend import KgBackend, backend_from_config
from kgqagen.models import (
  Abandoned,
  Accepted,
  CandidateInstance,
  DatasetStats,
  InstanceRecord,
  MetricReport,
  RunSummary,
  SplitSpec,
)
from kgqagen.services import dataset, evaluation
from kgqagen.services.llm_gateway import Provider, ScriptedProvider, provider_from_config
from kgqagen.services.pipeline import read_seeds, run_generation
from kgqagen.services.verifier import rejection_record, retention, validate_batch

logger = logging.getLogger(__name__)
console = Console()

T = TypeVar('T')


class ExitStatus(IntEnum):
  OK = 0
  USAGE = 1
  INFRASTRUCTURE = 2
  NOTHING_ACCEPTED = 3


# ============================================================================
# COMMAND IMPLEMENTATIONS
# ============================================================================


def _check_deterministic(config: AppConfig, llm: Provider, workers: int) -> int:
  if config.llm.provider != 'scripted' or not isinstance(llm, ScriptedProvider):
    raise ConfigError(['--deterministic requires llm.provider: scripted'])
  # Queue scripts are consumed in call order.
  return 1 if llm.is_queue else workers


def cmd_generate(
  config: AppConfig,
  seeds_path: Path,
  out_dir: Path,
  workers: int = 4,
  deterministic: bool = False,
  backend: Optional[KgBackend] = None,
  llm: Optional[Provider] = None,
) -> RunSummary:
  """Generate candidates for every seed into ``raw.jsonl`` and ``abandoned.jsonl``."""
  seeds = read_seeds(seeds_path)
  backend = backend or backend_from_config(config)
  llm = llm or provider_from_config(config.llm)
  if deterministic:
    workers = _check_deterministic(config, llm, workers)
  cfg = replace(config.pipeline, deterministic=deterministic)

  results = run_generation(seeds, backend, llm, cfg, workers=workers)
  candidates: Dict[str, CandidateInstance] = {}
  abandoned: List[Abandoned] = []
  duplicates = 0
  for result in results:
    if isinstance(result, Abandoned):
      abandoned.append(result)
    elif result.id in candidates:
      duplicates += 1
    else:
      candidates[result.id] = result

  out_dir.mkdir(parents=True, exist_ok=True)
  dataset.write_jsonl(candidates.values(), out_dir / 'raw.jsonl')
  dataset.write_jsonl(abandoned, out_dir / 'abandoned.jsonl')

  reasons = Counter(a.reason for a in abandoned)
  counts = {'seeds': len(seeds), 'generated': len(candidates), 'duplicates': duplicates}
  counts.update({f'abandoned:{reason}': n for reason, n in sorted(reasons.items())})
  status = ExitStatus.INFRASTRUCTURE if reasons.get('Infrastructure') else ExitStatus.OK
  return RunSummary(command='generate', counts=counts, exit_status=int(status))


def cmd_verify(
  config: AppConfig,
  in_path: Path,
  out_path: Path,
  rejected_path: Optional[Path] = None,
  workers: int = 4,
  deterministic: bool = False,
  backend: Optional[KgBackend] = None,
  llm: Optional[Provider] = None,
) -> RunSummary:
  """Validate candidates; accepted records go to ``out_path``, the rest to the sidecar."""
  candidates = dataset.read_jsonl(in_path, CandidateInstance)
  backend = backend or backend_from_config(config)
  llm = llm or provider_from_config(config.llm)
  if deterministic:
    workers = _check_deterministic(config, llm, workers)

  outcomes = validate_batch(candidates, backend, llm, config.pipeline, workers=workers)
  accepted = []
  rejected = []
  for candidate, outcome in zip(candidates, outcomes, strict=True):
    if isinstance(outcome, Accepted):
      accepted.append(dataset.to_record(candidate, outcome))
    else:
      rejected.append(rejection_record(candidate, outcome))

  rejected_path = rejected_path or out_path.with_name('rejected.jsonl')
  out_path.parent.mkdir(parents=True, exist_ok=True)
  dataset.write_jsonl(accepted, out_path)
  dataset.write_jsonl(rejected, rejected_path)

  reasons = Counter(r.reason for r in rejected)
  counts = {'candidates': len(candidates), 'accepted': len(accepted), 'rejected': len(rejected)}
  counts.update({f'rejected:{reason}': n for reason, n in sorted(reasons.items())})
  if reasons.get('Infrastructure'):
    status = ExitStatus.INFRASTRUCTURE
  elif not accepted:
    status = ExitStatus.NOTHING_ACCEPTED
  else:
    status = ExitStatus.OK
  return RunSummary(
    command='verify',
    counts=counts,
    retention=retention(len(accepted), len(candidates)),
    exit_status=int(status),
  )


def cmd_split(
  in_path: Path, out_dir: Path, seed: int = 0, dev_fraction: float = 0.1, test_fraction: float = 0.1
) -> RunSummary:
  records = dataset.read_jsonl(in_path, InstanceRecord)
  spec = SplitSpec(dev_fraction=dev_fraction, test_fraction=test_fraction, seed=seed)
  counts = dataset.write_split(out_dir, dataset.split(records, spec))
  return RunSummary(command='split', counts=counts)


def cmd_stats(in_path: Path, report_path: Optional[Path] = None) -> DatasetStats:
  report = dataset.stats(dataset.read_jsonl(in_path, InstanceRecord))
  if report_path is not None:
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.model_dump_json(indent=2) + '\n', encoding='utf-8')
  return report


def cmd_eval(
  gold_path: Path,
  pred_path: Path,
  mode: str = 'em',
  report_path: Optional[Path] = None,
  cache_path: Optional[Path] = None,
  config: Optional[AppConfig] = None,
  llm: Optional[Provider] = None,
  workers: int = 1,
) -> List[MetricReport]:
  """Score a prediction file in ``em``, ``lasm`` or ``both`` modes."""
  modes = list(evaluation.MODES) if mode == 'both' else [mode]
  judge = None
  if 'lasm' in modes:
    if config is None:
      raise ConfigError(['LASM scoring needs a configuration with an llm block'])
    judge = evaluation.LasmJudge(
      llm or provider_from_config(config.llm),
      config.llm.judge_model,
      evaluation.JudgeCache(cache_path),
      config.llm.temperature,
    )

  reports = evaluation.evaluate_files(gold_path, pred_path, modes, judge, workers)
  if report_path is not None:
    document = {
      'reports': {r.mode: r.model_dump() for r in reports},
      'table': evaluation.render_report_table(reports),
    }
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(document, indent=2) + '\n', encoding='utf-8')
  return reports


# ============================================================================
# CLICK WIRING
# ============================================================================


def _run(action: Callable[[], T]) -> T:
  """Run a command body, mapping failures onto exit statuses."""
  try:
    return action()
  except ConfigError as e:
    for problem in e.problems:
      console.print(f'[red]config: {escape(problem)}[/red]')
    raise click.exceptions.Exit(ExitStatus.USAGE) from e
  except InfrastructureError as e:
    console.print(f'[red]infrastructure failure: {escape(describe(e))}[/red]')
    raise click.exceptions.Exit(ExitStatus.INFRASTRUCTURE) from e
  except (KgqaGenError, ValueError, OSError) as e:
    console.print(f'[red]{escape(describe(e))}[/red]')
    raise click.exceptions.Exit(ExitStatus.USAGE) from e


def _config(ctx: click.Context) -> AppConfig:
  return load_config(ctx.obj.get('config_path'))


def _print_summary(summary: RunSummary) -> None:
  table = Table(title=f'kgqagen {summary.command}')
  table.add_column('outcome')
  table.add_column('count', justify='right')
  for name, count in summary.counts.items():
    table.add_row(name, str(count))
  if summary.retention is not None:
    table.add_row('retention', f'{summary.retention:.1%}')
  console.print(table)


def _finish(summary: RunSummary) -> None:
  _print_summary(summary)
  if summary.exit_status:
    raise click.exceptions.Exit(summary.exit_status)


@click.group()
@click.option(
  '--config',
  'config_path',
  type=click.Path(path_type=Path),
  default=None,
  help='Configuration file (YAML or JSON); defaults to config/base.yaml',
)
@click.option('--verbose', is_flag=True, default=False, help='Log at DEBUG level')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], verbose: bool):
  """Knowledge-graph-grounded QA dataset generation, verification and evaluation."""
  logging.basicConfig(
    level=logging.DEBUG if verbose else logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
  )
  ctx.ensure_object(dict)
  ctx.obj['config_path'] = config_path


@cli.command()
@click.option('--seeds', 'seeds_path', type=click.Path(path_type=Path), default=None)
@click.option('--out', 'out_dir', type=click.Path(path_type=Path), default=None)
@click.option('--workers', type=click.IntRange(min=1), default=4, show_default=True)
@click.option('--deterministic', is_flag=True, default=False)
@click.pass_context
def generate(ctx, seeds_path, out_dir, workers, deterministic):
  """Generate candidate instances from a seed list."""

  def action() -> RunSummary:
    config = _config(ctx)
    seeds = seeds_path or config.paths.seeds_file
    if seeds is None:
      raise ConfigError(['no seeds file: pass --seeds or set paths.seeds_file'])
    return cmd_generate(
      config, seeds, out_dir or config.paths.output_dir, workers, deterministic
    )

  _finish(_run(action))


@cli.command()
@click.option('--in', 'in_path', type=click.Path(path_type=Path), required=True)
@click.option('--out', 'out_path', type=click.Path(path_type=Path), required=True)
@click.option('--rejected', 'rejected_path', type=click.Path(path_type=Path), default=None)
@click.option('--workers', type=click.IntRange(min=1), default=4, show_default=True)
@click.option('--deterministic', is_flag=True, default=False)
@click.pass_context
def verify(ctx, in_path, out_path, rejected_path, workers, deterministic):
  """Validate candidates by executing and revising their SPARQL."""
  summary = _run(
    lambda: cmd_verify(_config(ctx), in_path, out_path, rejected_path, workers, deterministic)
  )
  _finish(summary)


@cli.command()
@click.option('--in', 'in_path', type=click.Path(path_type=Path), required=True)
@click.option('--out', 'out_dir', type=click.Path(path_type=Path), required=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--dev-fraction', type=float, default=0.1, show_default=True)
@click.option('--test-fraction', type=float, default=0.1, show_default=True)
def split(in_path, out_dir, seed, dev_fraction, test_fraction):
  """Split a verified dataset into train/dev/test."""
  _finish(_run(lambda: cmd_split(in_path, out_dir, seed, dev_fraction, test_fraction)))


@cli.command()
@click.option('--in', 'in_path', type=click.Path(path_type=Path), required=True)
@click.option('--report', 'report_path', type=click.Path(path_type=Path), default=None)
def stats(in_path, report_path):
  """Question-length and answer-count statistics."""
  report = _run(lambda: cmd_stats(in_path, report_path))
  console.print(dataset.render_stats_table(report))


@cli.command(name='eval')
@click.option('--gold', 'gold_path', type=click.Path(path_type=Path), required=True)
@click.option('--pred', 'pred_path', type=click.Path(path_type=Path), required=True)
@click.option(
  '--mode', type=click.Choice(['em', 'lasm', 'both']), default='em', show_default=True
)
@click.option('--report', 'report_path', type=click.Path(path_type=Path), default=None)
@click.option('--cache', 'cache_path', type=click.Path(path_type=Path), default=None)
@click.option('--workers', type=click.IntRange(min=1), default=1, show_default=True)
@click.pass_context
def eval_command(ctx, gold_path, pred_path, mode, report_path, cache_path, workers):
  """Score predictions with Exact Match and/or LLM-Assisted Semantic Match."""

  def action() -> List[MetricReport]:
    config = _config(ctx) if mode != 'em' else None
    return cmd_eval(
      gold_path, pred_path, mode, report_path, cache_path, config=config, workers=workers
    )

  reports = _run(action)
  console.print(evaluation.render_report_table(reports))
  for report in reports:
    if report.mode == 'lasm':
      console.print(f'judge calls: {report.judge_calls}, cache hits: {report.cache_hits}')


@cli.command(name='validate-config')
@click.pass_context
def validate_config_command(ctx):
  """Load the configuration and report every problem found."""
  config = _run(lambda: _config(ctx))
  console.print(f'[green]✅ {config.source} is valid[/green]')


def main():
  cli(obj={})


if __name__ == '__main__':
  main()
