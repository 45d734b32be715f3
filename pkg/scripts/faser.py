#!/usr/bin/env python3
"""
Faser - Single entry point for the function-similarity toolkit
Routes subcommands to the pipeline stages and chains them end to end:
fixtures → ingest → normalize → dedup → vocab → train → index → eval

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, configure_threads, load_config, log_operation, setup_logging, utc_now
from error_recovery import (EXIT_DATA, EXIT_OK, EXIT_USAGE, ErrorRecovery, ErrorSeverity,
                            FaserError, UsageError, exit_code_for)
from run_manifest import RunManifest, manifest_path_for

logger = logging.getLogger('faser.cli')


class FaserArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


# --- Subcommand handlers ---

def _manifest(args, config: Dict, inputs: List, output, seed: Optional[int], run) -> int:
    manifest = RunManifest.start(args.argv, config, inputs, seed)
    run()
    manifest.add_output(output)
    manifest.finish().write(manifest_path_for(output))
    return EXIT_OK


def cmd_ingest(args, config) -> int:
    from ingest import Ingestor

    def run():
        print(json.dumps(Ingestor(config).run(args.in_path, args.out_path)))
    return _manifest(args, config, [args.in_path], args.out_path, None, run)


def cmd_normalize(args, config) -> int:
    from normalize import Normalizer

    def run():
        normalizer = Normalizer(config, args.register_norm, args.addr_min, args.reg_table)
        print(json.dumps(normalizer.run(args.in_path, args.out_path)))
    return _manifest(args, config, [args.in_path, args.reg_table], args.out_path, None, run)


def cmd_dedup(args, config) -> int:
    from dedup import Deduplicator

    def run():
        print(json.dumps(Deduplicator().run(args.in_path, args.out_path, args.report_path).to_dict()))
    return _manifest(args, config, [args.in_path], args.out_path, None, run)


def cmd_vocab(args, config) -> int:
    from vocab import VocabBuilder

    builder = VocabBuilder(config)
    if args.vocab_action == 'build':
        def run():
            print(json.dumps({'size': len(builder.build(args.in_path, args.out_path, args.min_frequency))}))
        return _manifest(args, config, [args.in_path], args.out_path, None, run)

    def run():
        print(json.dumps(builder.encode_file(args.in_path, args.vocab, args.out_path, args.input_len)))
    return _manifest(args, config, [args.in_path, args.vocab], args.out_path, None, run)


def cmd_train(args, config) -> int:
    from train import TrainingRun

    def run():
        summary = TrainingRun(config).run(args.corpus, args.vocab, args.out_dir, seed=args.seed,
                                          epochs=args.epochs, save_every=args.save_every,
                                          threads=args.threads)
        print(json.dumps({k: summary[k] for k in ('epochs', 'optimizer_steps', 'initial_loss', 'final_loss')}))
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    return _manifest(args, config, [args.corpus, args.vocab], args.out_dir, args.seed, run)


def cmd_index(args, config) -> int:
    from embedding_index import IndexBuilder, load_store

    if args.index_action == 'build':
        def run():
            store = IndexBuilder(config).run(args.corpus, args.checkpoint, args.vocab, args.out_path,
                                             args.batch_size)
            print(json.dumps({'count': store.count, 'dim': store.dim}))
        return _manifest(args, config, [args.corpus, args.checkpoint, args.vocab], args.out_path, None, run)

    k = args.k or int(config_section(config, 'index').get('k', 10))
    for hit in load_store(args.store).search(args.query_fn, k):
        print(f"{hit['rank']:>4}  {hit['similarity']:+.4f}  {hit['record_id']}")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    from evaluate import Evaluator, ModelEmbedder

    evaluator = Evaluator(config)
    embedder = ModelEmbedder.from_files(args.checkpoint, args.vocab, config)
    out: Dict = {}

    if args.eval_action == 'pools':
        inputs = [args.corpus]

        def run():
            out['summary'] = evaluator.pools(args.corpus, embedder, args.out_dir, args.num_pools,
                                             args.negatives, args.seed, args.task)
    elif args.eval_action == 'vuln':
        inputs = [args.queries, args.target]

        def run():
            report = evaluator.vuln(args.queries, args.target, embedder, args.out_dir)
            out['summary'], out['table'] = report.summary, report.table()
    else:
        inputs = [args.train_corpus, args.eval_corpus, args.target]

        def run():
            out['summary'] = evaluator.zero_shot(args.train_corpus, args.eval_corpus, args.holdout, embedder,
                                                 args.out_dir, args.target, args.num_pools, args.negatives,
                                                 args.seed)

    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    code = _manifest(args, config, inputs + [args.checkpoint, args.vocab], args.out_dir,
                     getattr(args, 'seed', None), run)
    summary = out['summary']
    if args.format == 'table':
        if 'table' in out:
            print(out['table'])
        elif summary is not None:
            print(f"Recall@1 {summary.recall_at_1:.4f}  MRR@10 {summary.mrr_at_10:.4f}  "
                  f"Mean Rank {summary.mean_rank:g}  Median Rank {summary.median_rank:g}")
    else:
        print(json.dumps(summary.to_dict() if summary else None))
    return code


def cmd_fixtures(args, config) -> int:
    from fixtures import SYNTH_FLAGS, FixtureGenerator

    def run():
        stats = FixtureGenerator(config).run(args.out_path, **{k: getattr(args, k) for k in SYNTH_FLAGS})
        print(json.dumps({'functions': stats['functions'], 'labels': stats['labels']}))
    return _manifest(args, config, [], args.out_path, args.seed, run)


def cmd_pipeline(args, config) -> int:
    from fixtures import SYNTH_FLAGS

    pipeline = FaserPipeline(config)
    work_dir = Path(args.work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    out: Dict = {}

    def run():
        out['results'] = pipeline.run(
            work_dir, seed=args.seed, epochs=args.epochs, register_norm=args.register_norm,
            num_pools=args.num_pools, threads=args.threads,
            synth={k: getattr(args, k) for k in SYNTH_FLAGS if k != 'seed'},
        )
    code = _manifest(args, config, [], work_dir, args.seed, run)
    print(json.dumps(out['results']['stages']))
    return code


class FaserPipeline:
    """Runs every stage in one work directory and records what each produced."""

    def __init__(self, config: Dict):
        self.config = config

    def run(self, work_dir, seed: Optional[int] = None, epochs: Optional[int] = None,
            register_norm: Optional[bool] = None, num_pools: Optional[int] = None,
            threads: Optional[int] = None, synth: Optional[Dict] = None) -> Dict:
        from fixtures import FixtureGenerator
        from ingest import Ingestor
        from normalize import Normalizer
        from dedup import Deduplicator
        from vocab import VocabBuilder
        from train import TrainingRun
        from embedding_index import IndexBuilder
        from evaluate import Evaluator, ModelEmbedder

        work_dir = Path(work_dir)
        paths = {
            'corpus': work_dir / "corpus.jsonl",
            'strings': work_dir / "strings.jsonl",
            'normalized': work_dir / "normalized.jsonl",
            'dedup': work_dir / "dedup.jsonl",
            'dedup_report': work_dir / "dedup_report.json",
            'vocab': work_dir / "vocab.txt",
            'train': work_dir / "train",
            'index': work_dir / "index.fasx",
            'eval': work_dir / "eval",
        }
        results = {'work_dir': str(work_dir), 'started_at': utc_now(), 'stages': {}}
        stages = results['stages']

        def stage(name, fn):
            logger.info(f"[pipeline] {name}")
            try:
                outcome = fn()
            except FaserError:
                stages[name] = 'failed'
                logger.error(f"[pipeline] halted at {name}")
                raise
            stages[name] = 'success'
            return outcome

        stage('fixtures', lambda: FixtureGenerator(self.config).run(paths['corpus'], seed=seed, **(synth or {})))
        stage('ingest', lambda: Ingestor(self.config).run(paths['corpus'], paths['strings']))
        stage('normalize', lambda: Normalizer(self.config, register_norm).run(paths['strings'], paths['normalized']))
        report = stage('dedup', lambda: Deduplicator().run(
            paths['normalized'], paths['dedup'], paths['dedup_report']))
        stage('vocab', lambda: VocabBuilder(self.config).build(paths['dedup'], paths['vocab']))
        stage('train', lambda: TrainingRun(self.config).run(
            paths['dedup'], paths['vocab'], paths['train'], seed=seed, epochs=epochs, threads=threads))
        checkpoint = paths['train'] / "checkpoint.fasr"
        stage('index', lambda: IndexBuilder(self.config).run(paths['dedup'], checkpoint, paths['vocab'], paths['index']))

        evaluator = Evaluator(self.config)
        labels = len(set(_labels_of(paths["dedup"])))
        negatives = min(evaluator.negatives, labels - 1)
        summary = stage('eval', lambda: evaluator.pools(
            paths['dedup'], ModelEmbedder.from_files(checkpoint, paths['vocab'], self.config), paths['eval'],
            num_pools=num_pools, negatives=negatives, seed=seed))

        results['dedup'] = report.to_dict()
        results['eval'] = {k: v for k, v in summary.to_dict().items() if k != 'ranks'}
        results['artifacts'] = sorted(str(p) for p in work_dir.rglob("*") if p.is_file())
        results['completed_at'] = utc_now()
        log_operation('Faser', 'pipeline', 'success', {
            'work_dir': str(work_dir),
            'stages_completed': list(stages),
            'recall_at_1': summary.recall_at_1,
        })
        return results


def _labels_of(path) -> List[str]:
    from corpus import read_normalized
    return [fn.label for fn in read_normalized(path)]


# --- Parser ---

def _common_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument('--config', default=default, help='YAML file merged over config.yaml')
    parser.add_argument('--threads', type=int, default=default,
                        help='Cap worker threads (fallback: FASER_THREADS; 1 gives bitwise determinism)')
    parser.add_argument('--verbose', '-v', action='store_true',
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> FaserArgumentParser:
    from fixtures import add_synth_arguments

    parser = FaserArgumentParser(prog='faser', description='Faser - binary function similarity toolkit')
    _common_flags(parser, suppress=False)
    common = FaserArgumentParser(add_help=False)
    _common_flags(common, suppress=True)
    sub = parser.add_subparsers(dest='command', metavar='command', parser_class=FaserArgumentParser)
    sub.required = True

    p = sub.add_parser('ingest', parents=[common], help='Corpus file -> function strings')
    p.add_argument('--in', dest='in_path', required=True)
    p.add_argument('--out', dest='out_path', required=True)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser('normalize', parents=[common], help='Normalize function strings (NRM or RN)')
    p.add_argument('--in', dest='in_path', required=True)
    p.add_argument('--out', dest='out_path', required=True)
    p.add_argument('--register-norm', action='store_true', default=None,
                   help='Replace general purpose registers with reg32/reg64')
    p.add_argument('--addr-min', type=int, help='Smallest decimal treated as an address (default 4096)')
    p.add_argument('--reg-table', help='JSON register table overriding the built-in tables')
    p.set_defaults(handler=cmd_normalize)

    p = sub.add_parser('dedup', parents=[common], help='Remove duplicates and singleton labels')
    p.add_argument('--in', dest='in_path', required=True)
    p.add_argument('--out', dest='out_path', required=True)
    p.add_argument('--report', dest='report_path')
    p.set_defaults(handler=cmd_dedup)

    p = sub.add_parser('vocab', help='Vocabulary build / corpus encoding')
    vsub = p.add_subparsers(dest='vocab_action', metavar='action', parser_class=FaserArgumentParser)
    vsub.required = True
    v = vsub.add_parser('build', parents=[common])
    v.add_argument('--in', dest='in_path', required=True)
    v.add_argument('--out', dest='out_path', required=True)
    v.add_argument('--min-frequency', type=int, help='Drop tokens seen fewer times (default 1)')
    v = vsub.add_parser('encode', parents=[common])
    v.add_argument('--in', dest='in_path', required=True)
    v.add_argument('--vocab', required=True)
    v.add_argument('--out', dest='out_path', required=True)
    v.add_argument('--input-len', type=int)
    p.set_defaults(handler=cmd_vocab)

    p = sub.add_parser('train', parents=[common], help='Train the encoder with Circle Loss')
    p.add_argument('--corpus', required=True)
    p.add_argument('--vocab', required=True)
    p.add_argument('--out-dir', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--save-every', type=int, help='Also checkpoint every N optimizer steps')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('index', help='Embedding store build / search')
    isub = p.add_subparsers(dest='index_action', metavar='action', parser_class=FaserArgumentParser)
    isub.required = True
    i = isub.add_parser('build', parents=[common])
    i.add_argument('--corpus', required=True)
    i.add_argument('--checkpoint', required=True)
    i.add_argument('--vocab', required=True)
    i.add_argument('--out', dest='out_path', required=True)
    i.add_argument('--batch-size', type=int)
    i = isub.add_parser('search', parents=[common])
    i.add_argument('--store', required=True)
    i.add_argument('--query-fn', required=True, help='Function name or record id')
    i.add_argument('--k', type=int)
    p.set_defaults(handler=cmd_index)

    p = sub.add_parser('eval', help='Retrieval evaluation')
    esub = p.add_subparsers(dest='eval_action', metavar='action', parser_class=FaserArgumentParser)
    esub.required = True

    def model_args(e):
        e.add_argument('--checkpoint', required=True)
        e.add_argument('--vocab', required=True)
        e.add_argument('--out-dir', required=True)
        e.add_argument('--format', choices=('json', 'table'), default='json')

    e = esub.add_parser('pools', parents=[common], help='Recall@1 / MRR@10 over search pools')
    e.add_argument('--corpus', required=True)
    e.add_argument('--num-pools', type=int, help='default 1000')
    e.add_argument('--negatives', type=int, help='Negatives per pool (default 100)')
    e.add_argument('--seed', type=int)
    e.add_argument('--task', choices=('xa', 'xc', 'xm', 'xo'), help='Pool provenance constraint (default xm)')
    model_args(e)
    e = esub.add_parser('vuln', parents=[common], help='Rank a target corpus per query')
    e.add_argument('--queries', required=True)
    e.add_argument('--target', required=True)
    model_args(e)
    e = esub.add_parser('zero-shot', parents=[common], help='Queries from an architecture unseen in training')
    e.add_argument('--train-corpus', required=True)
    e.add_argument('--eval-corpus', required=True)
    e.add_argument('--holdout', required=True)
    e.add_argument('--target')
    e.add_argument('--num-pools', type=int)
    e.add_argument('--negatives', type=int)
    e.add_argument('--seed', type=int)
    model_args(e)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('fixtures', help='Synthetic corpora')
    fsub = p.add_subparsers(dest='fixtures_action', metavar='action', parser_class=FaserArgumentParser)
    fsub.required = True
    f = fsub.add_parser('generate', parents=[common])
    f.add_argument('--out', dest='out_path', required=True)
    add_synth_arguments(f)
    p.set_defaults(handler=cmd_fixtures)

    p = sub.add_parser('pipeline', parents=[common], help='fixtures → ingest → ... → eval in one directory')
    p.add_argument('--work-dir', required=True)
    p.add_argument('--epochs', type=int)
    p.add_argument('--num-pools', type=int)
    p.add_argument('--register-norm', action='store_true', default=None)
    add_synth_arguments(p)
    p.set_defaults(handler=cmd_pipeline)

    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the subcommand, map the outcome to an exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as e:
        # --help and friends
        return e.code if isinstance(e.code, int) else EXIT_OK
    args.argv = ['faser'] + argv

    setup_logging(args.verbose)
    recovery = None
    try:
        config = load_config(args.config)
        log_dir = config_section(config, 'logging').get('dir')
        if log_dir and not os.environ.get('FASER_LOG_DIR'):
            os.environ['FASER_LOG_DIR'] = str(log_dir)
        recovery = ErrorRecovery()
        if args.threads is None:
            args.threads = config_section(config, 'runtime').get('threads')
        args.threads = configure_threads(args.threads)
        return args.handler(args, config)
    except FaserError as e:
        logger.error(str(e))
        (recovery or ErrorRecovery()).log_error('Faser', args.command, e)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"unexpected failure in {args.command}")
        (recovery or ErrorRecovery()).log_error('Faser', args.command, e, ErrorSeverity.CRITICAL)
        return EXIT_DATA


def main(argv=None):
    """CLI entry point."""
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
