import os
import re
import csv
import json
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from services.core import (GritConfig, StreamLabel, ValidatedConfig, config_from_dict, config_to_dict,
                           derive_seed, derive_stream, validate_config)
from services.evaluation import DEFAULT_MASK_GRID, DEFAULT_RETRIEVAL_KS, retrieval_at_k, uov
from services.formats import dump_corpus, dump_schedule, load_schedule
from services.ledger import RunLedger, ledger_path
from services.toymodel import (CorpusSpec, check_corpus_spec, corpus_spec_from_dict, corpus_spec_to_dict,
                               generate_corpus, split_corpus)
from services.training import METRIC_COLUMNS, TIMING_COLUMNS, init_train_state, train_epoch

logger = logging.getLogger(__name__)

COMPARE_COLUMNS = ('r1_i2t', 'r1_t2i', 'mean_intra_batch_similarity', 'mean_negative_similarity',
                   'same_cluster_negative_fraction', 'uov1', 'uov5', 'steps_to_threshold', 'epoch_seconds')
_ARM_NAME = re.compile(r'^[A-Za-z0-9][A-Za-z0-9_.-]*$')
_PLAN_KEYS = {'name', 'base', 'corpus', 'arms', 'epochs', 'seeds', 'master_seed', 'eval_size', 'eval_mask_grid',
              'retrieval_ks', 'r1_threshold', 'eval_every', 'dump_schedules', 'dump_corpus'}


class PlanError(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ArmSpec:
    name: str
    overrides: Mapping[str, Any] = field(default_factory=dict)
    initial_schedule: Optional[str] = None


@dataclass(frozen=True)
class ExperimentPlan:
    """A grid of arms x seeds over one synthetic corpus recipe. Each arm is
    the base config with its overrides applied."""

    name: str
    base: GritConfig
    corpus: CorpusSpec
    arms: Tuple[ArmSpec, ...]
    epochs: int = 10
    seeds: Tuple[int, ...] = (0,)
    master_seed: int = 42
    eval_size: int = 512
    eval_mask_grid: Tuple[float, ...] = DEFAULT_MASK_GRID
    retrieval_ks: Tuple[int, ...] = DEFAULT_RETRIEVAL_KS
    r1_threshold: float = 0.9
    eval_every: int = 0
    dump_schedules: bool = False
    dump_corpus: bool = False

    def arm(self, name: str) -> ArmSpec:
        for arm in self.arms:
            if arm.name == name:
                return arm
        raise PlanError(f"No arm named {name!r}")

    def cell_seed(self, seed: int) -> int:
        return derive_seed(self.master_seed, seed)

    def cell_config(self, arm: ArmSpec, seed: int) -> ValidatedConfig:
        """The arm's config with the cell's derived master seed. Arms share
        cell seeds, so every arm of one seed sees the same corpus, initial
        weights and epoch-0 order."""
        raw = {**config_to_dict(self.base), **dict(arm.overrides), 'master_seed': self.cell_seed(seed)}
        return validate_config(config_from_dict(raw))

    def cell_corpus_spec(self, cfg: ValidatedConfig) -> CorpusSpec:
        return replace(self.corpus, n_examples=cfg.D + self.eval_size)


def plan_from_dict(raw: Mapping[str, Any]) -> ExperimentPlan:
    unknown = sorted(set(raw) - _PLAN_KEYS)
    if unknown:
        raise PlanError(f"Unknown plan key(s): {', '.join(unknown)}")
    if not raw.get('arms'):
        raise PlanError("Plan needs at least one arm")
    arms = []
    for entry in raw['arms']:
        if 'name' not in entry:
            raise PlanError(f"Arm entry without a name: {entry}")
        arms.append(ArmSpec(name=entry['name'], overrides=dict(entry.get('overrides', {})),
                            initial_schedule=entry.get('initial_schedule')))
    kwargs = {k: raw[k] for k in ('name', 'epochs', 'master_seed', 'eval_size', 'r1_threshold',
                                  'eval_every', 'dump_schedules', 'dump_corpus') if k in raw}
    for key in ('seeds', 'eval_mask_grid', 'retrieval_ks'):
        if key in raw:
            kwargs[key] = tuple(raw[key])
    plan = ExperimentPlan(base=config_from_dict(raw.get('base', {})),
                          corpus=corpus_spec_from_dict(raw.get('corpus', {})),
                          arms=tuple(arms), **{'name': 'experiment', **kwargs})
    validate_plan(plan)
    return plan


def load_plan(path: str) -> ExperimentPlan:
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise PlanError(f"Plan file {path} must hold a JSON object")
    plan = plan_from_dict(raw)
    override = os.environ.get('GRIT_SEED')
    if override:
        plan = replace(plan, master_seed=int(override))
        logger.info(f"GRIT_SEED overrides the plan master seed: {plan.master_seed}")
    return plan


def validate_plan(plan: ExperimentPlan) -> None:
    """Everything that can fail before any work starts: names, counts and
    every arm x seed config."""
    names = [a.name for a in plan.arms]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise PlanError(f"Duplicate arm name(s): {', '.join(duplicates)}")
    for name in names:
        if not _ARM_NAME.match(name):
            raise PlanError(f"Arm name {name!r} is not usable as a directory name")
    if plan.epochs < 1:
        raise PlanError(f"epochs must be >= 1, got {plan.epochs}")
    if not plan.seeds or len(set(plan.seeds)) != len(plan.seeds):
        raise PlanError("seeds must be a non-empty list without repeats")
    if any(s < 0 for s in plan.seeds):
        raise PlanError("seeds must be >= 0")
    if plan.eval_size < 2 or (plan.retrieval_ks and max(plan.retrieval_ks) > plan.eval_size):
        raise PlanError(f"eval_size {plan.eval_size} must be >= 2 and cover every retrieval k")
    if 1 not in plan.retrieval_ks:
        raise PlanError("retrieval_ks must include 1")
    if not plan.eval_mask_grid or any(not 0.0 <= p <= 1.0 for p in plan.eval_mask_grid):
        raise PlanError("eval_mask_grid must be a non-empty list of probabilities")
    if not 0.0 < plan.r1_threshold <= 1.0:
        raise PlanError(f"r1_threshold must be within (0, 1], got {plan.r1_threshold}")
    if plan.eval_every < 0:
        raise PlanError(f"eval_every must be >= 0, got {plan.eval_every}")
    for arm in plan.arms:
        cfg = plan.cell_config(arm, plan.seeds[0])
        check_corpus_spec(plan.cell_corpus_spec(cfg))
        if arm.initial_schedule and not os.path.exists(arm.initial_schedule):
            raise PlanError(f"Arm {arm.name}: initial schedule {arm.initial_schedule} does not exist")


def mean_r1(retrieval: Mapping[str, float]) -> float:
    """Average of image->text and text->image R@1."""
    return 0.5 * (retrieval['r1_i2t'] + retrieval['r1_t2i'])


def cell_dir(out_dir: str, arm: str, seed: int) -> Path:
    return Path(out_dir) / arm / f"seed-{seed}"


def _write_csv(path: Path, columns: Sequence[str], rows: List[Dict], header: str) -> None:
    with open(path, 'w', newline='') as f:
        f.write(f"# {header}\n")
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_cell(plan: ExperimentPlan, arm_name: str, seed: int, out_dir: str,
             ledger_file: Optional[str] = None) -> Dict[str, Any]:
    """Train one (arm, seed) cell end to end and write its artifacts.
    Returns the summary document."""
    arm = plan.arm(arm_name)
    ledger = RunLedger(ledger_file, plan.name) if ledger_file else None
    if ledger:
        ledger.mark_running(arm.name, seed)

    target = cell_dir(out_dir, arm.name, seed)
    target.mkdir(parents=True, exist_ok=True)
    cfg = plan.cell_config(arm, seed)
    cell_seed = cfg.config.master_seed
    header = f"config_hash={cfg.config_hash} arm={arm.name} seed={seed}"
    logger.info(f"Cell {arm.name}/seed-{seed}: config {cfg.config_hash}, {plan.epochs} epoch(s)")

    spec = plan.cell_corpus_spec(cfg)
    full = generate_corpus(spec, derive_stream(cell_seed, StreamLabel.DATA_GEN))
    train, held_out = split_corpus(full, cfg.D)
    if plan.dump_corpus:
        dump_corpus(full, str(target / 'corpus.grco'))

    initial = load_schedule(arm.initial_schedule) if arm.initial_schedule else None
    state = init_train_state(cfg, spec, initial)
    schedule = state.pending_schedule
    metric_rows, timing_rows, r1_curve = [], [], []
    steps_to_threshold: Optional[int] = None
    retrieval = None

    def check_threshold(current) -> None:
        nonlocal steps_to_threshold
        if steps_to_threshold is None and current.steps % plan.eval_every == 0:
            if mean_r1(retrieval_at_k(current.model, held_out, (1,)).as_dict()) >= plan.r1_threshold:
                steps_to_threshold = current.steps

    on_step = check_threshold if plan.eval_every else None
    for epoch in range(plan.epochs):
        if plan.dump_schedules:
            dump_schedule(schedule, str(target / 'schedules' / f"epoch-{epoch:03d}.grsc"))
        state, schedule, metrics = train_epoch(state, train, schedule, on_step=on_step)
        retrieval = retrieval_at_k(state.model, held_out, plan.retrieval_ks).as_dict()
        r1 = mean_r1(retrieval)
        r1_curve.append(r1)
        if steps_to_threshold is None and r1 >= plan.r1_threshold:
            steps_to_threshold = state.steps
        metric_rows.append(metrics.metric_row())
        timing_rows.append(metrics.timing_row())

    _write_csv(target / 'metrics.csv', METRIC_COLUMNS, metric_rows, header)
    _write_csv(target / 'timing.csv', TIMING_COLUMNS, timing_rows, header)

    report = uov(state.model, held_out, plan.eval_mask_grid,
                 derive_stream(cell_seed, StreamLabel.MASKING, plan.epochs))
    uov_rows = report.records()
    _write_csv(target / 'uov.csv', list(uov_rows[0]), uov_rows, header)
    hardest = max(report.rows, key=lambda r: r.mask_prob)

    final = metric_rows[-1]
    summary = {
        'arm': arm.name,
        'seed': seed,
        'cell_seed': cell_seed,
        'config_hash': cfg.config_hash,
        'config': config_to_dict(cfg.config),
        'epochs': plan.epochs,
        'corpus': corpus_spec_to_dict(spec),
        'steps': state.steps,
        'metrics': {
            **{k: final[k] for k in METRIC_COLUMNS if k not in ('epoch', 'steps')},
            **retrieval,
            'uov1': hardest.uov1,
            'uov5': hardest.uov5,
            'uov_mask_prob': hardest.mask_prob,
            'steps_to_threshold': steps_to_threshold,
        },
        'r1_curve': r1_curve,
    }
    summary_path = target / 'summary.json'
    with open(summary_path, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write('\n')
    if ledger:
        ledger.mark_done(arm.name, seed, _sha256_file(summary_path))
    logger.info(f"Cell {arm.name}/seed-{seed} finished: R@1 {r1_curve[-1]:.3f}, steps {state.steps}")
    return summary


@dataclass(frozen=True)
class RunOutcome:
    completed: Tuple[Tuple[str, int], ...]
    failed: Tuple[Tuple[str, int], ...]

    @property
    def ok(self) -> bool:
        return not self.failed


def run(plan: ExperimentPlan, out_dir: str, jobs: int = 1) -> RunOutcome:
    """Execute every cell, keeping the ledger and manifest.json current after
    each one. A failing cell is recorded and the remaining cells still run."""
    validate_plan(plan)
    os.makedirs(out_dir, exist_ok=True)
    ledger_file = ledger_path(out_dir)
    ledger = RunLedger(ledger_file, plan.name)
    cells = [(arm.name, seed) for arm in plan.arms for seed in plan.seeds]
    ledger.register((arm, seed, plan.cell_config(plan.arm(arm), seed).config_hash) for arm, seed in cells)
    manifest_path = os.path.join(out_dir, 'manifest.json')
    extra = {'master_seed': plan.master_seed, 'epochs': plan.epochs}
    ledger.export_manifest(manifest_path, extra)
    worker_ledger = ledger_file if ledger.shared else None

    completed, failed = [], []

    def settle(arm: str, seed: int, error: Optional[BaseException]) -> None:
        if error is None:
            completed.append((arm, seed))
            summary_path = cell_dir(out_dir, arm, seed) / 'summary.json'
            ledger.mark_done(arm, seed, _sha256_file(summary_path))
        else:
            logger.error(f"Cell {arm}/seed-{seed} failed: {error}")
            failed.append((arm, seed))
            ledger.mark_failed(arm, seed, str(error))
        ledger.export_manifest(manifest_path, extra)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_cell, plan, arm, seed, out_dir, worker_ledger): (arm, seed)
                       for arm, seed in cells}
            for future in as_completed(futures):
                arm, seed = futures[future]
                settle(arm, seed, future.exception())
    else:
        for arm, seed in cells:
            try:
                run_cell(plan, arm, seed, out_dir, worker_ledger)
            except Exception as e:
                settle(arm, seed, e)
            else:
                settle(arm, seed, None)

    if completed:
        table = compare([out_dir])
        # Wall-clock columns stay in timing.csv so summary.csv replays byte for byte.
        table = table.drop(columns=[c for c in table.columns if c.startswith('epoch_seconds')])
        table.to_csv(os.path.join(out_dir, 'summary.csv'), float_format='%.6g')
    logger.info(f"Run {plan.name}: {len(completed)} cell(s) done, {len(failed)} failed")
    return RunOutcome(tuple(sorted(completed)), tuple(sorted(failed)))


def _read_cells(result_dir: str, label_prefix: str) -> pd.DataFrame:
    records = []
    for summary_path in sorted(Path(result_dir).glob('*/seed-*/summary.json')):
        with open(summary_path) as f:
            summary = json.load(f)
        timing_path = summary_path.parent / 'timing.csv'
        if not timing_path.exists():
            raise SchemaMismatch(f"{summary_path.parent} is missing timing.csv")
        timing = pd.read_csv(timing_path, comment='#')
        if 'wall_seconds' not in timing.columns:
            raise SchemaMismatch(f"{timing_path} has no column 'wall_seconds'")
        record = {'label': f"{label_prefix}/{summary['arm']}", 'seed': summary['seed'],
                  **summary.get('metrics', {}), 'epoch_seconds': float(timing['wall_seconds'].mean())}
        records.append(record)
    if not records:
        raise SchemaMismatch(f"No result cells found under {result_dir}")
    return pd.DataFrame.from_records(records)


def compare(result_dirs: Sequence[str]) -> pd.DataFrame:
    """Per-arm medians and IQRs of the final metrics, plus each median's
    difference from the first arm listed. One row per (directory, arm)."""
    names = [Path(d).resolve().name or str(d) for d in result_dirs]
    frames = []
    for i, (d, name) in enumerate(zip(result_dirs, names)):
        prefix = name if names.count(name) == 1 else f"{name}#{i}"
        frames.append(_read_cells(d, prefix))
    cells = pd.concat(frames, ignore_index=True)
    for column in COMPARE_COLUMNS:
        if column not in cells.columns:
            raise SchemaMismatch(f"Result cells have no column {column!r}")
    values = cells[['label', *COMPARE_COLUMNS]].copy()
    values[list(COMPARE_COLUMNS)] = values[list(COMPARE_COLUMNS)].apply(pd.to_numeric, errors='coerce')

    grouped = values.groupby('label', sort=False)
    median = grouped.median()
    iqr = grouped.quantile(0.75) - grouped.quantile(0.25)
    table = pd.DataFrame(index=median.index)
    table['cells'] = grouped.size()
    reference = median.iloc[0]
    for column in COMPARE_COLUMNS:
        table[f"{column}_median"] = median[column]
        table[f"{column}_iqr"] = iqr[column]
        table[f"{column}_delta"] = median[column] - reference[column]
    return table


def format_table(table: pd.DataFrame) -> str:
    columns = ['cells'] + [c for c in table.columns if c.endswith('_median')]
    shown = table[columns].rename(columns=lambda c: c.replace('_median', ''))
    return shown.to_string(float_format=lambda v: f"{v:.4f}")
