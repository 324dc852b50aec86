"""
Email corpus ingestion, filtering, train/OOD splitting and fine-tune file export.

Word count: whitespace delimited tokens after trimming.
Sentence count: maximal segments terminated by '.', '!', '?' (or end of text)
that contain at least one word.
"""
import io
import re
import csv
import json
import logging
from enum import Enum
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import CorpusError
from src.utils import dumps_line, iter_jsonl

logger = logging.getLogger(__name__)

CLASSIFICATION_SEPARATOR = "\n\n###\n\n"
AUTOCOMPLETE_TEMPLATE = "Generate the body of an email from the following subject line. Subject: "
REQUIRED_FIELDS = ('folder', 'subject', 'body')

_SENTENCE_TERMINATORS = re.compile(r'[.!?]+')


class CorpusFormat(str, Enum):
    CSV = 'csv'
    JSONL = 'jsonl'


class Task(str, Enum):
    CLASSIFICATION = 'classification'
    AUTOCOMPLETE = 'autocomplete'


def count_words(text):
    return len(text.split())


def count_sentences(text):
    return sum(1 for segment in _SENTENCE_TERMINATORS.split(text) if segment.split())


@dataclass(frozen=True)
class EmailRecord:
    id: str
    folder: str
    subject: str
    body: str
    word_count: int
    sentence_count: int
    flags: Tuple[str, ...] = ()

    @classmethod
    def from_fields(cls, id, folder, subject, body):
        flags = ('empty_body',) if not body.strip() else ()
        return cls(id=id, folder=folder, subject=subject, body=body,
                   word_count=count_words(body), sentence_count=count_sentences(body), flags=flags)

    def to_dict(self):
        return {'id': self.id, 'folder': self.folder, 'subject': self.subject, 'body': self.body}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def parse_email_corpus(source, format):
    """
    Parse a UTF-8 CSV (header row naming folder, subject, body and optionally id)
    or JSONL byte stream into EmailRecords, preserving input order.
    """
    data = source.read() if hasattr(source, 'read') else source
    try:
        text = data.decode('utf-8') if isinstance(data, bytes) else data
        text = text.lstrip('\ufeff')
    except UnicodeDecodeError as e:
        raise CorpusError('Encoding', f"corpus is not valid UTF-8: {e}") from e

    fmt = CorpusFormat(format)
    rows = _csv_rows(text) if fmt is CorpusFormat.CSV else _jsonl_rows(text)

    records, seen = [], {}
    for position, (line_number, row) in enumerate(rows, 1):
        record_id = row.get('id') or f"email-{position:05d}"
        if record_id in seen:
            raise CorpusError('DuplicateId', f"id {record_id!r} already used on line {seen[record_id]}",
                              id=record_id, line=line_number)
        seen[record_id] = line_number
        records.append(EmailRecord.from_fields(record_id, row['folder'], row['subject'], row['body']))

    flagged = sum(1 for record in records if record.flags)
    logger.info(f"Parsed {len(records)} emails from {fmt.value} input ({flagged} flagged)")
    return records


def _csv_rows(text):
    reader = csv.reader(io.StringIO(text, newline=''))
    try:
        header = next(reader)
    except StopIteration:
        return
    except csv.Error as e:
        raise CorpusError('MalformedRow', str(e), line=1) from e

    columns = [name.strip().lower() for name in header]
    for name in REQUIRED_FIELDS:
        if name not in columns:
            raise CorpusError('MissingField', f"header has no {name!r} column", field=name, line=1)
    positions = {name: columns.index(name) for name in REQUIRED_FIELDS + ('id',) if name in columns}

    while True:
        line_number = reader.line_num + 1
        try:
            row = next(reader)
        except StopIteration:
            return
        except csv.Error as e:
            raise CorpusError('MalformedRow', str(e), line=line_number) from e
        if not row:
            continue
        if len(row) > len(columns):
            raise CorpusError('MalformedRow', f"expected {len(columns)} fields, saw {len(row)}", line=line_number)
        values = {}
        for name, index in positions.items():
            if index >= len(row):
                raise CorpusError('MissingField', f"row has no {name!r} value", field=name, line=line_number)
            values[name] = row[index]
        yield line_number, values


def _jsonl_rows(text):
    for line_number, line in iter_jsonl(text):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError('MalformedRow', f"invalid JSON: {e.msg}", line=line_number) from e
        if not isinstance(obj, dict):
            raise CorpusError('MalformedRow', "expected a JSON object", line=line_number)
        for name in REQUIRED_FIELDS:
            if name not in obj:
                raise CorpusError('MissingField', f"object has no {name!r} key", field=name, line=line_number)
        values = {}
        for name in REQUIRED_FIELDS + ('id',):
            if name in obj:
                if not isinstance(obj[name], str):
                    raise CorpusError('MalformedRow', f"{name!r} must be a string", field=name, line=line_number)
                values[name] = obj[name]
        yield line_number, values


def write_records(records, sink):
    """Persist records as JSONL that parse_email_corpus(JSONL) reads back."""
    for record in records:
        sink.write(dumps_line(record.to_dict()).encode('utf-8'))
    return len(records)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

class Heuristic(NamedTuple):
    name: str
    predicate: Callable[[EmailRecord], bool]


def phrase_heuristic(name, phrases):
    """Heuristic firing when subject or body contains any phrase (case-insensitive)."""
    lowered = tuple(phrase.lower() for phrase in phrases)

    def predicate(record):
        haystack = f"{record.subject}\n{record.body}".lower()
        return any(phrase in haystack for phrase in lowered)

    return Heuristic(name, predicate)


def non_alphabetic_ratio(text):
    chars = [char for char in text if not char.isspace()]
    if not chars:
        return 0.0
    return sum(1 for char in chars if not char.isalpha()) / len(chars)


def low_natural_language(threshold=0.30):
    """Tabular or chart-like bodies: at least `threshold` of non-space characters are non-alphabetic."""
    return Heuristic('low_natural_language', lambda record: non_alphabetic_ratio(record.body) >= threshold)


DEFAULT_EXCLUSION_HEURISTICS = (
    phrase_heuristic('notification', ('this is an automated', 'automatically generated', 'do not reply',
                                      'no-reply', 'noreply', 'system notification')),
    phrase_heuristic('bulletin', ('bulletin', 'newsletter', 'news alert', 'daily update', 'weekly digest')),
    phrase_heuristic('promotion', ('unsubscribe', 'special offer', 'limited time', 'click here', 'promo code')),
    phrase_heuristic('customer_service', ('customer service', 'thank you for contacting', 'ticket number',
                                          'case number', 'order confirmation')),
)


@dataclass(frozen=True)
class FilterPolicy:
    min_sentences: int = 3
    min_words: int = 25
    max_words: int = 256
    exclusion_heuristics: Tuple[Heuristic, ...] = DEFAULT_EXCLUSION_HEURISTICS
    low_natural_language_heuristic: Optional[Heuristic] = field(default_factory=low_natural_language)

    def __post_init__(self):
        if not 0 < self.min_words <= self.max_words:
            raise CorpusError('InvalidPolicy', "require 0 < min_words <= max_words",
                              min_words=self.min_words, max_words=self.max_words)
        if self.min_sentences < 1:
            raise CorpusError('InvalidPolicy', "min_sentences must be at least 1", min_sentences=self.min_sentences)

    def rules(self):
        """Rules in evaluation order; each predicate returns True when the record fails."""
        yield 'min_sentences', lambda record: record.sentence_count < self.min_sentences
        yield 'min_words', lambda record: record.word_count < self.min_words
        yield 'max_words', lambda record: record.word_count > self.max_words
        for heuristic in self.exclusion_heuristics:
            yield heuristic.name, heuristic.predicate
        if self.low_natural_language_heuristic is not None:
            yield self.low_natural_language_heuristic.name, self.low_natural_language_heuristic.predicate

    def first_failure(self, record):
        for name, fails in self.rules():
            if fails(record):
                return name
        return None


class Rejection(NamedTuple):
    record: EmailRecord
    reason: str


class FilterResult(NamedTuple):
    kept: List[EmailRecord]
    rejected: List[Rejection]


def apply_filter_policy(records, policy):
    kept, rejected = [], []
    for record in records:
        reason = policy.first_failure(record)
        if reason is None:
            kept.append(record)
        else:
            rejected.append(Rejection(record, reason))
    logger.info(f"Filter kept {len(kept)} of {len(records)} emails")
    return FilterResult(kept, rejected)


def rejection_summary(rejected):
    """Count of rejections per rule name."""
    reasons = pd.Series([rejection.reason for rejection in rejected], dtype='object')
    return reasons.value_counts().sort_index()


def write_rejections(rejected, sink):
    for rejection in rejected:
        row = dict(rejection.record.to_dict(), reason=rejection.reason)
        sink.write(dumps_line(row).encode('utf-8'))
    return len(rejected)


# ---------------------------------------------------------------------------
# Train / OOD split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSplit:
    train: List[EmailRecord]
    ood: List[EmailRecord]
    seed: int


def split_train_ood(records, train_count, seed):
    """
    Sort by id, shuffle with numpy's PCG64 generator seeded by `seed`, take the
    first train_count as train and the remainder as OOD.
    """
    if train_count < 0:
        raise CorpusError('InvalidSplit', "train_count must be non-negative", train_count=train_count)
    if train_count > len(records):
        raise CorpusError('InsufficientRecords', f"asked for {train_count} training emails, have {len(records)}",
                          train_count=train_count, available=len(records))
    ordered = sorted(records, key=lambda record: record.id)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ordered))
    shuffled = [ordered[index] for index in order]
    split = CorpusSplit(train=shuffled[:train_count], ood=shuffled[train_count:], seed=seed)
    logger.info(f"Split {len(records)} emails into {len(split.train)} train / {len(split.ood)} OOD (seed {seed})")
    return split


# ---------------------------------------------------------------------------
# Fine-tune examples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneExample:
    task: Task
    prompt: str
    completion: str
    source_id: str

    def to_dict(self):
        return {'task': self.task.value, 'prompt': self.prompt, 'completion': self.completion,
                'source_id': self.source_id}

    @classmethod
    def from_dict(cls, row):
        return cls(task=Task(row['task']), prompt=row['prompt'], completion=row['completion'],
                   source_id=row['source_id'])


def build_classification_examples(records, separator=CLASSIFICATION_SEPARATOR):
    if not separator:
        raise CorpusError('InvalidSeparator', "separator must be non-empty")
    examples = []
    for record in records:
        if not record.folder.strip():
            raise CorpusError('MissingLabel', "email has no folder label", id=record.id)
        examples.append(FinetuneExample(Task.CLASSIFICATION, record.body + separator, " " + record.folder, record.id))
    return examples


def autocomplete_prompt(subject):
    return AUTOCOMPLETE_TEMPLATE + subject


def subject_from_prompt(prompt):
    if not prompt.startswith(AUTOCOMPLETE_TEMPLATE):
        raise CorpusError('NotAutocompletePrompt', "prompt does not start with the autocomplete template")
    return prompt[len(AUTOCOMPLETE_TEMPLATE):]


def build_autocomplete_examples(records):
    examples = []
    for record in records:
        if not record.subject.strip():
            raise CorpusError('MissingSubject', "email has no subject line", id=record.id)
        examples.append(FinetuneExample(Task.AUTOCOMPLETE, autocomplete_prompt(record.subject),
                                        " " + record.body, record.id))
    return examples


def build_examples(records, task, separator=CLASSIFICATION_SEPARATOR):
    if Task(task) is Task.CLASSIFICATION:
        return build_classification_examples(records, separator)
    return build_autocomplete_examples(records)


def export_finetune_file(examples, sink):
    """Write the prompt/completion JSONL training file. Returns the number of lines written."""
    if not examples:
        raise CorpusError('NoExamples', "no examples")
    for example in examples:
        sink.write(dumps_line({'prompt': example.prompt, 'completion': example.completion}).encode('utf-8'))
    logger.info(f"Exported {len(examples)} fine-tune examples")
    return len(examples)


def load_finetune_file(source):
    """Read an exported fine-tune file back into (prompt, completion) pairs."""
    pairs = []
    for line_number, line in iter_jsonl(source):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError('MalformedRow', f"invalid JSON: {e.msg}", line=line_number) from e
        if not isinstance(obj, dict) or set(obj) != {'prompt', 'completion'}:
            raise CorpusError('MalformedRow', "expected exactly the keys prompt and completion", line=line_number)
        pairs.append((obj['prompt'], obj['completion']))
    return pairs


