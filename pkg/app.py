import os
import sys
from dotenv import load_dotenv
load_dotenv()  # this loads values from .env into os.environment
import argparse
from dataclasses import replace
import logging
from typing import List, Optional

from services.core import GritConfig, StreamLabel, derive_stream, load_config, validate_config
from services.formats import dump_corpus, dump_schedule, load_corpus, load_schedule
from services.toymodel import CorpusSpec, generate_corpus, load_corpus_spec
from services.training import init_train_state, train_epoch
from services import experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def configure_logging(level: Optional[str] = None) -> None:
    level = (level or os.environ.get('GRIT_LOG_LEVEL') or 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def cmd_run(args) -> int:
    plan = experiment.load_plan(args.plan)
    outcome = experiment.run(plan, args.out, jobs=args.jobs)
    if not outcome.ok:
        logger.error(f"{len(outcome.failed)} cell(s) failed, see {os.path.join(args.out, 'manifest.json')}")
        return EXIT_RUNTIME
    return EXIT_OK


def schedule_for_epoch(cfg: GritConfig, epoch: int, corpus_path: Optional[str] = None,
                       spec_path: Optional[str] = None):
    """Train epochs 0..epoch-1 on a synthetic corpus and return the schedule
    built for `epoch` (epoch 0 is the uniform shuffle)."""
    validated = validate_config(cfg)
    if corpus_path:
        corpus = load_corpus(corpus_path)
    else:
        spec = load_corpus_spec(spec_path) if spec_path else CorpusSpec()
        spec = replace(spec, n_examples=validated.D)
        corpus = generate_corpus(spec, derive_stream(cfg.master_seed, StreamLabel.DATA_GEN))
    state = init_train_state(validated, corpus.spec)
    schedule = state.pending_schedule
    for _ in range(epoch):
        state, schedule, _metrics = train_epoch(state, corpus, schedule)
    return schedule


def cmd_dump_schedule(args) -> int:
    if args.check:
        schedule = load_schedule(args.check)
        sizes = sorted({len(b) for b in schedule.batches})
        print(f"{args.check}: {schedule.dataset_size} ids in {len(schedule)} batches "
              f"(sizes {sizes}), permutation={schedule.is_permutation()}")
        return EXIT_OK
    if not (args.config and args.out):
        raise ValueError("dump-schedule needs --config and --out (or --check <file>)")
    schedule = schedule_for_epoch(load_config(args.config), args.epoch, args.corpus, args.corpus_spec)
    dump_schedule(schedule, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    table = experiment.compare(args.dirs)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        table.to_csv(os.path.join(args.out, 'comparison.csv'), float_format='%.6g')
        with open(os.path.join(args.out, 'comparison.txt'), 'w') as f:
            f.write(experiment.format_table(table) + '\n')
    print(experiment.format_table(table))
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    spec = load_corpus_spec(args.spec)
    seed = args.seed if args.seed is not None else int(os.environ.get('GRIT_SEED', 42))
    corpus = generate_corpus(spec, derive_stream(seed, StreamLabel.DATA_GEN))
    dump_corpus(corpus, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='grit', description='Grouped mini-batch scheduling experiments')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR (default: GRIT_LOG_LEVEL or INFO)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('run', help='run every arm x seed cell of a plan')
    p.add_argument('--plan', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--jobs', type=int, default=1)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('dump-schedule', help='write (or inspect) a GRSC schedule file')
    p.add_argument('--config')
    p.add_argument('--epoch', type=int, default=0)
    p.add_argument('--out')
    p.add_argument('--corpus', help='GRCO corpus to train on instead of a generated one')
    p.add_argument('--corpus-spec', help='corpus spec JSON used when --corpus is not given')
    p.add_argument('--check', metavar='FILE', help='load a schedule file and print its shape')
    p.set_defaults(handler=cmd_dump_schedule)

    p = sub.add_parser('compare', help='compare result directories')
    p.add_argument('dirs', nargs='+')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser('gen-corpus', help='generate a synthetic corpus and write it as GRCO')
    p.add_argument('--spec', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_gen_corpus)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
