"""
Command-line entry point: `python -m src.main <command> [--config run.toml] [--out DIR] ...`

Stages exchange data through files under the output directory so each one
can be re-run or inspected on its own:

    corpus/    parsed, rejected, train and OOD emails
    finetune/  fine-tune examples and the exported training file
    attack/    one run directory per attack label
    pii/       ground truth and extracted PII sets
    analysis/  leakage reports (JSON)
    reports/   rendered reports
"""
import io
import os
import sys
import json
import argparse
import logging

from src import __version__
from src.analysis import (ReportFormat, build_report, collect_extracted_pii, compute_metrics, filter_novel,
                          parse_report, provenance_for, render_comparison, render_report)
from src.attack import AttackKind, load_records, run_autocomplete_attack, run_naive_attack
from src.backend import BackendRole, estimate_token_budget
from src.config import load_config
from src.corpus import (CorpusFormat, FinetuneExample, Task, apply_filter_policy, build_examples,
                        export_finetune_file, parse_email_corpus, rejection_summary, split_train_ood,
                        write_records, write_rejections)
from src.errors import ConfigError, CorpusError, LeakprobeError, is_validation_error
from src.logger_config import setup_logging
from src.pii import (Gazetteer, PiiSet, build_ground_truth, ground_truth_from_annotations, import_external_annotations,
                     load_gazetteer)
from src.synthetic import generate_synthetic_corpus
from src.utils import atomic_write_bytes, atomic_write_jsonl, iter_jsonl, read_json, write_json

logger = logging.getLogger(__name__)

LOG_FILE = 'leakprobe.log'
MANIFEST_FILE = 'manifest.json'
CORPUS_DIR, FINETUNE_DIR, ATTACK_DIR, PII_DIR, ANALYSIS_DIR, REPORTS_DIR = (
    'corpus', 'finetune', 'attack', 'pii', 'analysis', 'reports')
SYNTHETIC_GAZETTEER = 'synthetic_gazetteer.json'

TASK_LABELS = {Task.CLASSIFICATION: ['classification'],
               Task.AUTOCOMPLETE: ['autocomplete-train', 'autocomplete-ood']}

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _artifact(out, *parts):
    return os.path.join(out, *parts)


def _require(path, stage):
    if not os.path.exists(path):
        raise ConfigError('MissingArtifact', f"{os.path.basename(path)} not found; run the {stage} stage first",
                          path=path)
    return path


def _write_stream(path, writer, items):
    buffer = io.BytesIO()
    writer(items, buffer)
    atomic_write_bytes(path, buffer.getvalue())


def _read_emails(out, name):
    with open(_require(_artifact(out, CORPUS_DIR, name), 'prepare'), 'rb') as handle:
        return parse_email_corpus(handle, CorpusFormat.JSONL)


def _read_pii_set(path, stage):
    return PiiSet.from_dict(read_json(_require(path, stage)))


def _gazetteer(cfg, out):
    path = cfg.path('pii', 'gazetteer')
    if path is None:
        synthetic = _artifact(out, PII_DIR, SYNTHETIC_GAZETTEER)
        path = synthetic if os.path.exists(synthetic) else None
    if path is None:
        logger.warning("No gazetteer configured; named categories will not be extracted")
        return Gazetteer.empty()
    return load_gazetteer(path)


def _records_file(out, label, role):
    return _artifact(out, ATTACK_DIR, label, f"records_{BackendRole(role).value}.jsonl")


def _update_manifest(cfg, out, stage):
    path = _artifact(out, MANIFEST_FILE)
    stages = read_json(path).get('stages', []) if os.path.exists(path) else []
    if stage not in stages:
        stages.append(stage)
    write_json(path, {'version': __version__, 'config': cfg.to_manifest(), 'stages': stages})


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(cfg, out):
    section = cfg.section('synthetic')
    synthetic = generate_synthetic_corpus(int(section['n_emails']), int(section['n_pii']), cfg.seed)
    _write_stream(_artifact(out, 'emails.jsonl'), write_records, synthetic.records)
    write_json(_artifact(out, 'gazetteer.json'), synthetic.gazetteer)
    write_json(_artifact(out, 'planted_pii.json'), synthetic.planted.to_dict())
    return synthetic


def stage_prepare(cfg, out):
    if cfg.uses_synthetic_corpus:
        section = cfg.section('synthetic')
        synthetic = generate_synthetic_corpus(int(section['n_emails']), int(section['n_pii']), cfg.seed)
        records = synthetic.records
        write_json(_artifact(out, PII_DIR, SYNTHETIC_GAZETTEER), synthetic.gazetteer)
        write_json(_artifact(out, PII_DIR, 'planted_pii.json'), synthetic.planted.to_dict())
    else:
        with open(cfg.path('corpus', 'path'), 'rb') as handle:
            records = parse_email_corpus(handle, cfg.corpus_format)

    kept, rejected = apply_filter_policy(records, cfg.filter_policy())
    train_count = len(kept) if cfg.train_count is None else cfg.train_count
    split = split_train_ood(kept, train_count, cfg.seed)

    _write_stream(_artifact(out, CORPUS_DIR, 'records.jsonl'), write_records, records)
    _write_stream(_artifact(out, CORPUS_DIR, 'rejected.jsonl'), write_rejections, rejected)
    _write_stream(_artifact(out, CORPUS_DIR, 'train.jsonl'), write_records, split.train)
    _write_stream(_artifact(out, CORPUS_DIR, 'ood.jsonl'), write_records, split.ood)
    summary = rejection_summary(rejected)
    for reason, count in summary.items():
        logger.info(f"Rejected {count} emails by rule {reason}")
    write_json(_artifact(out, CORPUS_DIR, 'summary.json'),
               {'parsed': len(records), 'kept': len(kept), 'rejected': len(rejected),
                'rejections': {reason: int(count) for reason, count in summary.items()},
                'train': len(split.train), 'ood': len(split.ood), 'seed': cfg.seed})
    return split


def stage_build(cfg, out):
    train = _read_emails(out, 'train.jsonl')
    examples = build_examples(train, cfg.task, cfg.separator)
    atomic_write_jsonl(_artifact(out, FINETUNE_DIR, 'examples.jsonl'), [example.to_dict() for example in examples])
    logger.info(f"Built {len(examples)} {cfg.task.value} examples")
    return examples


def stage_export(cfg, out):
    path = _require(_artifact(out, FINETUNE_DIR, 'examples.jsonl'), 'build')
    examples = [FinetuneExample.from_dict(row) for row in _load_jsonl_dicts(path)]
    examples = [example for example in examples if example.task is cfg.task]
    _write_stream(_artifact(out, FINETUNE_DIR, f"{cfg.task.value}_train.jsonl"), export_finetune_file, examples)
    return examples


def _load_jsonl_dicts(path):
    rows = []
    with open(path, 'rb') as handle:
        for line_number, line in iter_jsonl(handle):
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise CorpusError('MalformedRow', f"invalid JSON: {e.msg}", path=path, line=line_number) from e
    return rows


def stage_attack(cfg, out):
    section = cfg.section('attack')
    train = _read_emails(out, 'train.jsonl')
    options = dict(api_key={role: cfg.api_key(role) for role in cfg.roles()},
                   request_limit=section['request_limit'], checkpoint_every=int(section['checkpoint_every']),
                   retry_failed=bool(section['retry_failed']))
    budgets = {}
    if cfg.task is Task.CLASSIFICATION:
        plan = cfg.attack_plan(AttackKind.NAIVE_EXTRACTION)
        ft = cfg.backend_descriptor(BackendRole.FINE_TUNED, train)
        base = cfg.backend_descriptor(BackendRole.BASE, train)
        # Per backend: the base model receives the same prompts
        budgets['classification'] = estimate_token_budget(plan.n_queries, plan.config)
        run_naive_attack(ft, base, plan, cfg.prompt_source(), run_dir=_artifact(out, ATTACK_DIR, 'classification'),
                         label='classification', **options)
    else:
        plan = cfg.attack_plan(AttackKind.AUTOCOMPLETE)
        ft = cfg.backend_descriptor(BackendRole.FINE_TUNED, train)
        ood = _read_emails(out, 'ood.jsonl')
        for label, records in zip(TASK_LABELS[Task.AUTOCOMPLETE], (train, ood)):
            subjects = [record.subject for record in records]
            budgets[label] = estimate_token_budget(len(subjects) * plan.queries_per_subject, plan.config)
            run_autocomplete_attack(ft, subjects, plan, run_dir=_artifact(out, ATTACK_DIR, label), label=label,
                                    **options)
    for label, budget in budgets.items():
        logger.info(f"{label}: at most {budget.max_tokens_total} generated tokens (~{budget.approx_words} words)")
    write_json(_artifact(out, ATTACK_DIR, 'budget.json'),
               {label: {'max_tokens_total': budget.max_tokens_total, 'approx_words': budget.approx_words}
                for label, budget in budgets.items()})


def stage_extract(cfg, out):
    gazetteer = _gazetteer(cfg, out)
    patterns = cfg.pattern_set()
    train = _read_emails(out, 'train.jsonl')

    annotations = cfg.path('pii', 'annotations')
    if annotations is not None:
        with open(annotations, 'rb') as handle:
            mentions = import_external_annotations(handle, texts={record.id: record.body for record in train})
        ground_truth = ground_truth_from_annotations(mentions)
    else:
        ground_truth = build_ground_truth(train, gazetteer, patterns)
    write_json(_artifact(out, PII_DIR, 'ground_truth.json'), ground_truth.to_dict())

    for label in TASK_LABELS[cfg.task]:
        for role in cfg.roles():
            records = load_records(_require(_records_file(out, label, role), 'attack'))
            extracted = collect_extracted_pii(records, gazetteer, patterns, provenance_for(role))
            write_json(_artifact(out, PII_DIR, f"{label}_{role.value}.json"), extracted.to_dict())
            logger.info(f"{label}/{role.value}: {len(extracted)} unique PIIs in {len(records)} generations")


def stage_analyze(cfg, out):
    ground_truth = _read_pii_set(_artifact(out, PII_DIR, 'ground_truth.json'), 'extract')
    reports = []
    for label in TASK_LABELS[cfg.task]:
        e_ft = _read_pii_set(_artifact(out, PII_DIR, f"{label}_{BackendRole.FINE_TUNED.value}.json"), 'extract')
        base_path = _artifact(out, PII_DIR, f"{label}_{BackendRole.BASE.value}.json")
        candidates = e_ft
        subtracted = cfg.subtract_base and os.path.exists(base_path)
        if subtracted:
            candidates = filter_novel(e_ft, _read_pii_set(base_path, 'extract'))
        records = load_records(_require(_records_file(out, label, BackendRole.FINE_TUNED), 'attack'))
        metadata = {'task': cfg.task.value, 'seed': cfg.seed, 'generations': len(records),
                    'failed_generations': sum(1 for record in records if record.failed),
                    'base_subtracted': subtracted}
        report = build_report(label, compute_metrics(candidates, ground_truth), metadata,
                              cfg.examples_per_category)
        atomic_write_bytes(_artifact(out, ANALYSIS_DIR, f"{label}.json"), render_report(report, ReportFormat.JSON))
        reports.append(report)
    return reports


def stage_report(cfg, out):
    reports = []
    for label in TASK_LABELS[cfg.task]:
        with open(_require(_artifact(out, ANALYSIS_DIR, f"{label}.json"), 'analyze'), 'rb') as handle:
            reports.append(parse_report(handle.read()))
    for fmt in map(ReportFormat, cfg.report_formats):
        for report in reports:
            atomic_write_bytes(_artifact(out, REPORTS_DIR, f"{report.label}.{fmt.extension}"),
                               render_report(report, fmt))
        if len(reports) > 1:
            atomic_write_bytes(_artifact(out, REPORTS_DIR, f"comparison.{fmt.extension}"),
                               render_comparison(reports, fmt))
    return reports


STAGES = {
    'synth': stage_synth,
    'prepare': stage_prepare,
    'build': stage_build,
    'export': stage_export,
    'attack': stage_attack,
    'extract': stage_extract,
    'analyze': stage_analyze,
    'report': stage_report,
}
PIPELINE = ['prepare', 'build', 'export', 'attack', 'extract', 'analyze', 'report']
BACKEND_STAGES = {'attack', 'audit'}

COMMAND_HELP = {
    'synth': "write a synthetic corpus with planted PII and its gazetteer",
    'prepare': "parse, filter and split the email corpus",
    'build': "build fine-tune examples for the configured task",
    'export': "export the fine-tune JSONL file",
    'attack': "run the extraction attack(s) for the configured task",
    'extract': "extract PII from generations and the training corpus",
    'analyze': "compute precision and recall",
    'report': "render leakage reports",
    'audit': "run the full pipeline",
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the validation code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', help="run configuration (TOML); defaults to config/default.toml")
    common.add_argument('--out', help="output directory (overrides output_dir)")
    common.add_argument('--seed', type=int, help="global seed (overrides seed)")
    common.add_argument('--backend', choices=['mock', 'http'], help="backend kind for every role")
    common.add_argument('--task', choices=[task.value for task in Task], help="fine-tuning task")

    parser = ArgumentParser(prog='leakprobe', description="Audit fine-tuned language models for PII leakage")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest='command', metavar='command', parser_class=ArgumentParser)
    subparsers.required = True
    for command, help_text in COMMAND_HELP.items():
        subparsers.add_parser(command, parents=[common], help=help_text)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_VALIDATION

    main_logger = setup_logging("main")
    try:
        cfg = load_config(args.config, {'output_dir': args.out, 'seed': args.seed, 'backend': args.backend,
                                        'task': args.task})
        cfg.validate(require_backends=args.command in BACKEND_STAGES)
    except LeakprobeError as e:
        main_logger.error(f"Invalid configuration: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    setup_logging("main", log_file=_artifact(out, LOG_FILE))
    stages = PIPELINE if args.command == 'audit' else [args.command]
    main_logger.info(f"Starting {args.command} ({cfg.task.value}) into {out}")

    try:
        for stage in stages:
            main_logger.info(f"Stage {stage}")
            STAGES[stage](cfg, out)
            _update_manifest(cfg, out, stage)
    except LeakprobeError as e:
        main_logger.error(f"Stage {stage} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION if is_validation_error(e) else EXIT_RUNTIME
    except OSError as e:
        main_logger.error(f"Stage {stage} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    main_logger.info(f"Finished {args.command}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
