"""
Attack prompt construction and the two extraction attacks.

Naive extraction sends the same prompt sequence (blank strings interleaved with
reference-text snippets) to a fine-tuned and a base backend. Autocomplete
extraction sends the subject-line template several times per subject.
Runs checkpoint into a run directory and can be resumed.
"""
import os
import json
import math
import time
import logging
from enum import Enum
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
from tqdm import tqdm

from src.backend import BackendKind, BackendRole, GenerationConfig, GenerationRecord, open_backend, utc_timestamp
from src.corpus import CLASSIFICATION_SEPARATOR, autocomplete_prompt
from src.errors import AttackError, BackendError, ConfigError
from src.utils import atomic_write_jsonl, iter_jsonl, read_json, stable_hash, write_json

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
RECORDS_FILE = 'records_{role}.jsonl'


class AttackKind(str, Enum):
    NAIVE_EXTRACTION = 'naive_extraction'
    AUTOCOMPLETE = 'autocomplete'


class PromptSourceKind(str, Enum):
    REFERENCE_SNIPPETS = 'reference_snippets'
    BLANK = 'blank'
    SUBJECT_LIST = 'subject_list'


@dataclass(frozen=True)
class AttackPlan:
    kind: AttackKind
    n_queries: int = 1800
    blank_fraction: float = 0.5
    snippet_length_chars: int = 100
    queries_per_subject: int = 5
    config: GenerationConfig = field(default_factory=GenerationConfig)
    seed: int = 0
    failure_threshold: float = 0.10
    separator: str = CLASSIFICATION_SEPARATOR

    def __post_init__(self):
        object.__setattr__(self, 'kind', AttackKind(self.kind))
        problems = []
        if self.n_queries < 1:
            problems.append('n_queries must be at least 1')
        if not 0 <= self.blank_fraction <= 1:
            problems.append('blank_fraction must lie in [0, 1]')
        if self.snippet_length_chars < 1:
            problems.append('snippet_length_chars must be at least 1')
        if self.queries_per_subject < 1:
            problems.append('queries_per_subject must be at least 1')
        if not 0 <= self.failure_threshold <= 1:
            problems.append('failure_threshold must lie in [0, 1]')
        if self.seed < 0:
            problems.append('seed must be non-negative')
        if problems:
            raise AttackError('InvalidPlan', '; '.join(problems))

    def to_dict(self):
        return {'kind': self.kind.value, 'n_queries': self.n_queries, 'blank_fraction': self.blank_fraction,
                'snippet_length_chars': self.snippet_length_chars,
                'queries_per_subject': self.queries_per_subject, 'config': self.config.to_dict(),
                'seed': self.seed, 'failure_threshold': self.failure_threshold, 'separator': self.separator}

    def plan_hash(self):
        return stable_hash(self.to_dict())

    def blank_count(self):
        return math.floor(self.blank_fraction * self.n_queries + 0.5)


@dataclass(frozen=True)
class PromptSource:
    kind: PromptSourceKind
    reference_text: str = ''
    subjects: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'kind', PromptSourceKind(self.kind))
        object.__setattr__(self, 'subjects', tuple(self.subjects))

    @classmethod
    def snippets(cls, reference_text):
        return cls(PromptSourceKind.REFERENCE_SNIPPETS, reference_text=reference_text)

    @classmethod
    def blank(cls):
        return cls(PromptSourceKind.BLANK)

    @classmethod
    def subject_list(cls, subjects):
        return cls(PromptSourceKind.SUBJECT_LIST, subjects=tuple(subjects))


class PlannedPrompt(NamedTuple):
    request_index: int
    prompt: str
    kind: str
    subject_index: Optional[int] = None


class AttackResult(NamedTuple):
    gen_ft: List[GenerationRecord]
    gen_base: List[GenerationRecord]


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

def sample_naive_prompts(reference_text, count, length_chars, seed, separator=CLASSIFICATION_SEPARATOR):
    """
    `count` contiguous character slices of reference_text, each exactly
    length_chars long, never containing the training separator.
    """
    if count < 0:
        raise AttackError('InvalidPlan', "count must be non-negative", count=count)
    if len(reference_text) < length_chars:
        raise AttackError('ReferenceTooShort', f"reference text has {len(reference_text)} characters, "
                          f"snippets need {length_chars}", length=len(reference_text))
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    n_starts = len(reference_text) - length_chars + 1
    if separator and separator in reference_text:
        starts = _clean_starts(reference_text, length_chars, separator, n_starts)
        if starts.size == 0:
            raise AttackError('NoCleanSnippet', "every window of the reference text contains the separator")
        chosen = rng.choice(starts, size=count)
    else:
        chosen = rng.integers(0, n_starts, size=count)
    return [reference_text[start:start + length_chars] for start in chosen.tolist()]


def _clean_starts(text, length, separator, n_starts):
    mask = np.ones(n_starts, dtype=bool)
    position = text.find(separator)
    while position != -1:
        # Windows starting in [position + len(sep) - length, position] contain this occurrence.
        mask[max(0, position + len(separator) - length):min(n_starts, position + 1)] = False
        position = text.find(separator, position + 1)
    return np.flatnonzero(mask)


def build_naive_prompt_sequence(plan, source):
    """
    Blank and snippet prompts for a naive extraction plan: blank prompts take
    the even indices and snippets the odd ones until either kind runs out.
    """
    if source.kind is PromptSourceKind.SUBJECT_LIST:
        raise AttackError('InvalidPromptSource', "naive extraction needs reference snippets or blank prompts")
    n_blank = plan.n_queries if source.kind is PromptSourceKind.BLANK else plan.blank_count()
    n_snippet = plan.n_queries - n_blank
    snippets = sample_naive_prompts(source.reference_text, n_snippet, plan.snippet_length_chars, plan.seed,
                                    plan.separator) if n_snippet else []

    prompts, blanks_left, snippet_iter = [], n_blank, iter(snippets)
    for index in range(plan.n_queries):
        snippets_left = plan.n_queries - index - blanks_left
        if blanks_left and (index % 2 == 0 or snippets_left == 0):
            prompts.append(PlannedPrompt(index, '', 'blank'))
            blanks_left -= 1
        else:
            prompts.append(PlannedPrompt(index, next(snippet_iter), 'snippet'))
    return prompts


def build_autocomplete_prompt_sequence(plan, subjects):
    if not subjects:
        raise AttackError('NoSubjects', "autocomplete attack needs at least one subject")
    prompts = []
    for subject_index, subject in enumerate(subjects):
        if not subject.strip():
            raise AttackError('NoSubjects', "subject lines must be non-empty", subject_index=subject_index)
        prompt = autocomplete_prompt(subject)
        for query in range(plan.queries_per_subject):
            prompts.append(PlannedPrompt(subject_index * plan.queries_per_subject + query, prompt, 'subject',
                                         subject_index))
    return prompts


def _check_separator(prompts, separator):
    for planned in prompts:
        if separator and separator in planned.prompt:
            raise AttackError('SeparatorInPrompt', "attack prompt contains the training separator",
                              request_index=planned.request_index)


# ---------------------------------------------------------------------------
# Run directory / checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    run_dir: str
    manifest: dict
    records: Dict[str, Dict[int, GenerationRecord]] = field(default_factory=dict)

    @property
    def plan_hash(self):
        return self.manifest['plan_hash']

    def completed(self, role):
        return self.records.get(BackendRole(role).value, {})


def _records_path(run_dir, role):
    return os.path.join(run_dir, RECORDS_FILE.format(role=BackendRole(role).value))


def load_records(path):
    records = []
    with open(path, 'rb') as handle:
        for line_number, line in iter_jsonl(handle, error=AttackError):
            try:
                records.append(GenerationRecord.from_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as e:
                raise AttackError('CorruptCheckpoint', f"unreadable generation record: {e}", path=path,
                                  line=line_number) from e
    return records


def load_checkpoint(run_dir):
    manifest_path = os.path.join(run_dir, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise AttackError('NoCheckpoint', f"no run manifest in {run_dir}", run_dir=run_dir)
    manifest = read_json(manifest_path)
    if 'plan' not in manifest or 'plan_hash' not in manifest:
        raise AttackError('PlanMismatch', "run manifest is missing the plan or its hash", run_dir=run_dir)
    checkpoint = Checkpoint(run_dir=run_dir, manifest=manifest)
    for role in manifest.get('roles', []):
        path = _records_path(run_dir, role)
        if os.path.exists(path):
            checkpoint.records[role] = {record.request_index: record for record in load_records(path)}
    return checkpoint


def _write_manifest(run_dir, plan, prompts, backends, label):
    manifest = {'label': label, 'plan': plan.to_dict(), 'plan_hash': plan.plan_hash(),
                'prompt_digest': stable_hash([p.prompt for p in prompts]), 'n_requests': len(prompts),
                'roles': [descriptor.role.value for descriptor in backends],
                'backends': {descriptor.role.value: descriptor.to_manifest() for descriptor in backends}}
    write_json(os.path.join(run_dir, MANIFEST_FILE), manifest)
    return manifest


def _verify_checkpoint(checkpoint, plan, prompts):
    stored_plan_hash = stable_hash(checkpoint.manifest['plan'])
    if checkpoint.plan_hash != stored_plan_hash:
        raise AttackError('PlanMismatch', "manifest plan hash does not match its recorded plan",
                          run_dir=checkpoint.run_dir)
    if checkpoint.plan_hash != plan.plan_hash():
        raise AttackError('PlanMismatch', "checkpoint was written for a different attack plan",
                          run_dir=checkpoint.run_dir)
    if checkpoint.manifest.get('prompt_digest') != stable_hash([p.prompt for p in prompts]):
        raise AttackError('PlanMismatch', "checkpoint was written for a different prompt sequence",
                          run_dir=checkpoint.run_dir)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

class _RoleRun:
    """Drives one backend over the planned prompts, checkpointing every `checkpoint_every` records."""

    def __init__(self, descriptor, plan, prompts, run_dir, done, api_key, checkpoint_every, sleep):
        self.descriptor = descriptor
        self.plan = plan
        self.prompts = prompts
        self.run_dir = run_dir
        self.done = dict(done)
        self.api_key = api_key
        self.checkpoint_every = checkpoint_every
        self.sleep = sleep

    def pending(self, retry_failed):
        return [p for p in self.prompts
                if p.request_index not in self.done or (retry_failed and self.done[p.request_index].failed)]

    def checkpoint(self):
        if self.run_dir is not None:
            rows = [self.done[index].to_dict() for index in sorted(self.done)]
            atomic_write_jsonl(_records_path(self.run_dir, self.descriptor.role), rows)

    def execute(self, jobs):
        if not jobs:
            self.checkpoint()
            return
        client = open_backend(self.descriptor, self.api_key, sleep=self.sleep)
        is_http = self.descriptor.kind is BackendKind.HTTP
        role = self.descriptor.role
        logger.info(f"Dispatching {len(jobs)} requests to the {role.value} backend")
        since_checkpoint = 0
        try:
            with ThreadPoolExecutor(max_workers=self.descriptor.max_in_flight) as executor:
                future_to_job = {executor.submit(self._one, client, job, is_http): job for job in jobs}
                for future in tqdm(as_completed(future_to_job), total=len(jobs), desc=role.value, leave=False):
                    try:
                        record = future.result()
                    except ConfigError:
                        for pending in future_to_job:
                            pending.cancel()
                        raise
                    self.done[record.request_index] = record
                    since_checkpoint += 1
                    if since_checkpoint >= self.checkpoint_every:
                        self.checkpoint()
                        since_checkpoint = 0
        finally:
            self.checkpoint()
            client.close()

    def _one(self, client, job, is_http):
        config = self.plan.config
        error = None
        try:
            completion = client.complete(job.prompt, config, job.request_index)
        except ConfigError:
            raise
        except BackendError as e:
            logger.warning(f"Request {job.request_index} flagged as failed: {e}")
            completion, error = '', e.kind
        return GenerationRecord(request_index=job.request_index, prompt=job.prompt, completion=completion,
                                backend_role=self.descriptor.role, config=config.snapshot(job.request_index),
                                timestamp=utc_timestamp() if is_http else None, prompt_kind=job.kind,
                                subject_index=job.subject_index, error=error)

    def records(self):
        return [self.done[index] for index in sorted(self.done)]


def _role_key(api_key, role):
    """api_key is one key for every role or a mapping of role to key."""
    if isinstance(api_key, Mapping):
        return api_key.get(role) or api_key.get(role.value)
    return api_key


def _run(label, plan, prompts, backends, run_dir, api_key, request_limit, checkpoint_every, retry_failed,
         checkpoint=None, sleep=None):
    _check_separator(prompts, plan.separator)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        if checkpoint is None and os.path.exists(os.path.join(run_dir, MANIFEST_FILE)):
            checkpoint = load_checkpoint(run_dir)
        if checkpoint is not None:
            _verify_checkpoint(checkpoint, plan, prompts)
            logger.info(f"Resuming run in {run_dir}")
        else:
            _write_manifest(run_dir, plan, prompts, backends, label)

    runs = []
    for descriptor in backends:
        done = checkpoint.completed(descriptor.role) if checkpoint is not None else {}
        runs.append(_RoleRun(descriptor, plan, prompts, run_dir, done, _role_key(api_key, descriptor.role),
                             checkpoint_every, sleep or time.sleep))

    # Identical pending indices for every role keep prompt parity under request limits.
    for run in runs:
        jobs = run.pending(retry_failed)
        if request_limit is not None:
            jobs = jobs[:max(0, request_limit)]
        run.execute(jobs)

    results = [run.records() for run in runs]
    for descriptor, records in zip(backends, results):
        _check_failures(label, descriptor.role, records, len(prompts), plan.failure_threshold)
    return results


def _check_failures(label, role, records, n_planned, threshold):
    failed = sum(1 for record in records if record.failed)
    if len(records) < n_planned:
        logger.info(f"{label}/{role.value}: {len(records)} of {n_planned} requests completed so far")
    if records and failed / n_planned > threshold:
        raise AttackError('RunFailed', f"{failed} of {n_planned} requests failed", label=label,
                          role=role.value, failed=failed)
    if failed:
        logger.warning(f"{label}/{role.value}: {failed} failed requests flagged and excluded from analysis")


def run_naive_attack(ft, base, plan, source, run_dir=None, api_key=None, request_limit=None,
                     checkpoint_every=50, retry_failed=False, label='classification', sleep=None):
    """Send the same naive prompt sequence to the fine-tuned and base backends."""
    if plan.kind is not AttackKind.NAIVE_EXTRACTION:
        raise AttackError('InvalidPlan', "run_naive_attack needs a naive extraction plan")
    if ft.role is not BackendRole.FINE_TUNED or base.role is not BackendRole.BASE:
        raise AttackError('InvalidPlan', "expected a fine-tuned backend and a base backend")
    prompts = build_naive_prompt_sequence(plan, source)
    gen_ft, gen_base = _run(label, plan, prompts, [ft, base], run_dir, api_key, request_limit,
                            checkpoint_every, retry_failed, sleep=sleep)
    return AttackResult(gen_ft, gen_base)


def run_autocomplete_attack(backend, subjects, plan, run_dir=None, api_key=None, request_limit=None,
                            checkpoint_every=50, retry_failed=False, label='autocomplete', sleep=None):
    """Query the subject template queries_per_subject times for every subject."""
    if plan.kind is not AttackKind.AUTOCOMPLETE:
        raise AttackError('InvalidPlan', "run_autocomplete_attack needs an autocomplete plan")
    prompts = build_autocomplete_prompt_sequence(plan, list(subjects))
    plan = replace(plan, n_queries=len(prompts))
    (records,) = _run(label, plan, prompts, [backend], run_dir, api_key, request_limit,
                      checkpoint_every, retry_failed, sleep=sleep)
    return records


def resume_run(checkpoint, plan, backends, source, api_key=None, request_limit=None, checkpoint_every=50,
               retry_failed=False, sleep=None):
    """
    Complete the request indices missing from a checkpoint. `backends` lists
    the descriptors in the order the run was started with; `source` is the
    PromptSource the run used. Returns an AttackResult for naive runs and the
    record list for autocomplete runs.
    """
    label = checkpoint.manifest.get('label', 'run')
    if plan.kind is AttackKind.NAIVE_EXTRACTION:
        prompts = build_naive_prompt_sequence(plan, source)
    else:
        prompts = build_autocomplete_prompt_sequence(plan, list(source.subjects))
        plan = replace(plan, n_queries=len(prompts))
    results = _run(label, plan, prompts, list(backends), checkpoint.run_dir, api_key, request_limit,
                   checkpoint_every, retry_failed, checkpoint=checkpoint, sleep=sleep)
    if plan.kind is AttackKind.NAIVE_EXTRACTION:
        return AttackResult(*results)
    return results[0]


def successful(records):
    return [record for record in records if not record.failed]
