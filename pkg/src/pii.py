"""
PII category schema, deterministic extraction (regular expressions for numeric
categories, gazetteer whole-token matching for named ones), canonicalization
and the set algebra behind E_ft - E_base.
"""
import os
import re
import json
import logging
from enum import Enum
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping, Tuple

from src.errors import PiiError
from src.utils import iter_jsonl

logger = logging.getLogger(__name__)


class PiiCategory(str, Enum):
    PERSON = 'PERSON'
    ORGANIZATION = 'ORG'
    GPE = 'GPE'
    FACILITY = 'FAC'
    MONEY = 'MONEY'
    DATE = 'DATE'
    CARDINAL = 'CARDINAL'

    @classmethod
    def from_label(cls, label):
        if isinstance(label, cls):
            return label
        key = str(label).strip().upper()
        category = _CATEGORY_ALIASES.get(key)
        if category is None:
            raise PiiError('UnknownCategory', f"unknown PII category {label!r}", category=label)
        return category

    @property
    def is_named(self):
        return self in NAMED_CATEGORIES


_CATEGORY_ALIASES = {
    'PERSON': PiiCategory.PERSON, 'PER': PiiCategory.PERSON,
    'ORG': PiiCategory.ORGANIZATION, 'ORGANIZATION': PiiCategory.ORGANIZATION,
    'GPE': PiiCategory.GPE, 'GEOPOLITICAL': PiiCategory.GPE,
    'FAC': PiiCategory.FACILITY, 'FACILITY': PiiCategory.FACILITY,
    'MONEY': PiiCategory.MONEY,
    'DATE': PiiCategory.DATE,
    'CARDINAL': PiiCategory.CARDINAL,
}

NAMED_CATEGORIES = frozenset({PiiCategory.PERSON, PiiCategory.ORGANIZATION, PiiCategory.GPE, PiiCategory.FACILITY})
CATEGORY_ORDER = {category: rank for rank, category in enumerate(PiiCategory)}


class Provenance(str, Enum):
    FINE_TUNED_GENERATIONS = 'FineTunedGenerations'
    BASE_GENERATIONS = 'BaseGenerations'
    GROUND_TRUTH = 'GroundTruth'
    DERIVED = 'Derived'


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

QUOTE_CHARS = frozenset('"\'`“”‘’«»')


def canonicalize(surface, category):
    """
    Trim, collapse whitespace runs, strip enclosing quote pairs and, for named
    categories, case-fold. Numeric categories keep their bytes otherwise.
    """
    category = PiiCategory(category)
    text = ' '.join(surface.split())
    while len(text) >= 2 and text[0] in QUOTE_CHARS and text[-1] in QUOTE_CHARS:
        text = ' '.join(text[1:-1].split())
    if category.is_named:
        text = text.casefold()
    if not text:
        raise PiiError('EmptyAfterTrim', "surface is empty after normalization", surface=surface)
    return text


# ---------------------------------------------------------------------------
# Mentions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PiiMention:
    surface: str
    category: PiiCategory
    start: int
    end: int
    source_id: str = ''

    @property
    def span(self):
        return (self.start, self.end)

    def matches(self, text):
        return 0 <= self.start < self.end <= len(text) and text[self.start:self.end] == self.surface

    def canonical(self):
        return canonicalize(self.surface, self.category)

    def to_dict(self):
        return {'source_id': self.source_id, 'start': self.start, 'end': self.end,
                'surface': self.surface, 'category': self.category.value}


# ---------------------------------------------------------------------------
# Gazetteer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gazetteer:
    """Per-category canonical names matched as whole token sequences."""
    entries: Mapping[PiiCategory, Tuple[str, ...]]
    case_fold: Mapping[PiiCategory, bool] = field(default_factory=dict)
    _patterns: Dict[PiiCategory, re.Pattern] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for category, names in self.entries.items():
            for name in names:
                if not name or canonicalize(name, category) != name:
                    raise PiiError('InvalidGazetteer', f"entry {name!r} is not canonical", category=category.value)
        for category, names in self.entries.items():
            if names:
                self._patterns[category] = _gazetteer_regex(names, self.folds(category))

    @classmethod
    def from_mapping(cls, mapping, case_fold=None):
        """Build from raw names (category label -> names), canonicalizing and de-duplicating."""
        entries = {}
        for label, names in mapping.items():
            category = PiiCategory.from_label(label)
            canonical = {canonicalize(name, category) for name in names if name.strip()}
            entries[category] = tuple(sorted(canonical))
        folds = {PiiCategory.from_label(label): bool(flag) for label, flag in (case_fold or {}).items()}
        return cls(entries=entries, case_fold=folds)

    @classmethod
    def empty(cls):
        return cls(entries={})

    def folds(self, category):
        return self.case_fold.get(category, category.is_named)

    def finditer(self, text):
        """Yield (start, end, category) for every gazetteer match start, longest entry per start."""
        for category, pattern in self._patterns.items():
            for match in pattern.finditer(text):
                yield match.start(1), match.end(1), category

    def __len__(self):
        return sum(len(names) for names in self.entries.values())


def _gazetteer_regex(names, fold):
    # Longest alternatives first so each start position reports its longest entry.
    alternatives = sorted(names, key=lambda name: (-len(name), name))
    body = '|'.join(r'\s+'.join(re.escape(token) for token in name.split(' ')) for name in alternatives)
    # Lookahead capture finds matches at every start, including overlapping ones.
    return re.compile(r'(?<!\w)(?=((?:' + body + r'))(?!\w))', re.IGNORECASE if fold else 0)


def load_gazetteer(source):
    """Gazetteer file: JSON object mapping category name to a list of names."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, 'rb') as handle:
            data = handle.read()
    else:
        data = source.read()
    try:
        mapping = json.loads(data)
    except json.JSONDecodeError as e:
        raise PiiError('InvalidGazetteer', f"gazetteer is not valid JSON: {e.msg}") from e
    if not isinstance(mapping, dict) or not all(isinstance(names, list) for names in mapping.values()):
        raise PiiError('InvalidGazetteer', "gazetteer must map category names to lists of strings")
    gazetteer = Gazetteer.from_mapping(mapping)
    logger.info(f"Loaded gazetteer with {len(gazetteer)} names")
    return gazetteer


# ---------------------------------------------------------------------------
# Patterns
# ---------------------------------------------------------------------------

_MONTHS = (r'(?:January|February|March|April|May|June|July|August|September|October|November|December'
           r'|Jan\.?|Feb\.?|Mar\.?|Apr\.?|Jun\.?|Jul\.?|Aug\.?|Sept\.?|Sep\.?|Oct\.?|Nov\.?|Dec\.?)')
_WEEKDAYS = r'(?:Monday|Tuesday|Wednesday|Thursday|Friday|Saturday|Sunday)'
_AMOUNT = r'(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?'
_SCALE = r'(?:thousand|million|billion|trillion)'

DEFAULT_PATTERNS = {
    'money_symbol': (PiiCategory.MONEY, r'\$' + _AMOUNT + r'(?:\s+' + _SCALE + r'\b)?'),
    'money_scaled': (PiiCategory.MONEY, r'\b' + _AMOUNT + r'\s+' + _SCALE + r'\b'),
    'date_slash': (PiiCategory.DATE, r'\b\d{1,2}/\d{1,2}/(?:\d{4}|\d{2})\b'),
    'date_iso': (PiiCategory.DATE, r'\b\d{4}-\d{2}-\d{2}\b'),
    'date_month_name': (PiiCategory.DATE,
                        r'\b(?:' + _WEEKDAYS + r',?\s+)?' + _MONTHS + r'\s+\d{1,2}\b(?:,\s+\d{4}\b)?'),
    'cardinal': (PiiCategory.CARDINAL, r'\b' + _AMOUNT + r'\b'),
}


@dataclass(frozen=True)
class PatternSet:
    """Named regular expressions, each producing mentions of one category."""
    patterns: Tuple[Tuple[str, PiiCategory, re.Pattern], ...]

    @classmethod
    def from_mapping(cls, mapping, enabled=None):
        selected = []
        names = list(mapping) if enabled is None else list(enabled)
        for name in names:
            if name not in mapping:
                raise PiiError('UnknownPattern', f"no pattern named {name!r}", pattern=name)
            category, regex = mapping[name]
            try:
                compiled = re.compile(regex)
            except re.error as e:
                raise PiiError('InvalidPattern', str(e), pattern=name) from e
            selected.append((name, PiiCategory.from_label(category), compiled))
        return cls(patterns=tuple(selected))

    @classmethod
    def default(cls, enabled=None):
        return cls.from_mapping(DEFAULT_PATTERNS, enabled)

    @property
    def names(self):
        return tuple(name for name, _, _ in self.patterns)

    def finditer(self, text):
        for _, category, pattern in self.patterns:
            for match in pattern.finditer(text):
                if match.end() > match.start():
                    yield match.start(), match.end(), category


def load_patterns(source, enabled=None):
    """Pattern file: JSON object {name: {"category": ..., "regex": ...}}; merged over the defaults."""
    with open(source, 'rb') as handle:
        data = handle.read()
    try:
        raw = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise PiiError('InvalidPattern', f"pattern file is not valid UTF-8 JSON: {e}", path=str(source)) from e
    if not isinstance(raw, dict):
        raise PiiError('InvalidPattern', "pattern file must hold a JSON object", path=str(source))
    mapping = dict(DEFAULT_PATTERNS)
    for name, entry in raw.items():
        if not isinstance(entry, dict) or 'category' not in entry or 'regex' not in entry:
            raise PiiError('InvalidPattern', "pattern entries need category and regex", pattern=name)
        mapping[name] = (entry['category'], entry['regex'])
    return PatternSet.from_mapping(mapping, enabled)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def extract_pii(text, gazetteer, patterns, source_id=''):
    """
    Find PII mentions in text. Overlaps are resolved longest match first, ties
    by earlier start, then by category order. Result is sorted by start.
    """
    if not text:
        return []
    candidates = set(gazetteer.finditer(text)) | set(patterns.finditer(text))
    ranked = sorted(candidates, key=lambda c: (c[0] - c[1], c[0], CATEGORY_ORDER[c[2]]))
    accepted = []
    for start, end, category in ranked:
        if all(end <= other_start or start >= other_end for other_start, other_end, _ in accepted):
            accepted.append((start, end, category))
    accepted.sort()
    return [PiiMention(text[start:end], category, start, end, source_id) for start, end, category in accepted]


def import_external_annotations(source, texts=None):
    """
    Read JSONL annotations from an external NER tool. Spans are validated
    against their source text when `texts` maps source_id to text, otherwise
    by length and ordering.
    """
    mentions = []
    for line_number, line in iter_jsonl(source, error=PiiError):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise PiiError('MalformedAnnotation', f"invalid JSON: {e.msg}", line=line_number) from e
        missing = [key for key in ('source_id', 'start', 'end', 'surface', 'category') if key not in obj]
        if missing:
            raise PiiError('MalformedAnnotation', f"missing keys {missing}", line=line_number)
        try:
            category = PiiCategory.from_label(obj['category'])
        except PiiError as e:
            raise PiiError('UnknownCategory', f"unknown PII category {obj['category']!r}",
                           category=obj['category'], line=line_number) from e
        try:
            start, end = int(obj['start']), int(obj['end'])
        except (TypeError, ValueError) as e:
            raise PiiError('MalformedAnnotation', "start and end must be integers", line=line_number) from e
        mention = PiiMention(surface=str(obj['surface']), category=category, start=start,
                             end=end, source_id=str(obj['source_id']))
        consistent = 0 <= mention.start < mention.end and mention.end - mention.start == len(mention.surface)
        if consistent and texts is not None and mention.source_id in texts:
            consistent = mention.matches(texts[mention.source_id])
        if not consistent:
            raise PiiError('SpanMismatch', "span does not re-slice to the surface string",
                           line=line_number, span=mention.span, surface=mention.surface)
        mentions.append(mention)
    logger.info(f"Imported {len(mentions)} external annotations")
    return mentions


# ---------------------------------------------------------------------------
# Sets
# ---------------------------------------------------------------------------

Entry = Tuple[PiiCategory, str]


@dataclass(frozen=True)
class PiiSet:
    entries: FrozenSet[Entry] = frozenset()
    provenance: Provenance = Provenance.DERIVED

    def __post_init__(self):
        object.__setattr__(self, 'entries', frozenset((PiiCategory(c), v) for c, v in self.entries))
        object.__setattr__(self, 'provenance', Provenance(self.provenance))
        for category, value in self.entries:
            if canonicalize(value, category) != value:
                raise PiiError('NotCanonical', f"{value!r} is not in canonical form", category=category.value)

    @classmethod
    def from_mentions(cls, mentions, provenance):
        return cls(frozenset((m.category, m.canonical()) for m in mentions), provenance)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries, key=_entry_key))

    def __contains__(self, entry):
        return entry in self.entries

    def by_category(self):
        grouped = {}
        for category, value in self:
            grouped.setdefault(category, []).append(value)
        return grouped

    def union(self, other, provenance=Provenance.DERIVED):
        return PiiSet(self.entries | other.entries, provenance)

    def intersection(self, other, provenance=Provenance.DERIVED):
        return PiiSet(self.entries & other.entries, provenance)

    def with_provenance(self, provenance):
        return PiiSet(self.entries, provenance)

    def to_dict(self):
        return {'provenance': self.provenance.value,
                'entries': [{'category': category.value, 'value': value} for category, value in self]}

    @classmethod
    def from_dict(cls, data):
        return cls(frozenset((PiiCategory.from_label(row['category']), row['value']) for row in data['entries']),
                   Provenance(data['provenance']))


def _entry_key(entry):
    return (CATEGORY_ORDER[entry[0]], entry[1])


def set_difference(a, b):
    return PiiSet(a.entries - b.entries, Provenance.DERIVED)


def build_ground_truth(records, gazetteer, patterns):
    """Union of canonical mentions over every subject and body of the fine-tuning corpus."""
    entries = set()
    for record in records:
        for text in (record.subject, record.body):
            entries.update((m.category, m.canonical()) for m in extract_pii(text, gazetteer, patterns, record.id))
    truth = PiiSet(frozenset(entries), Provenance.GROUND_TRUTH)
    logger.info(f"Ground truth holds {len(truth)} unique PIIs from {len(records)} emails")
    return truth


def ground_truth_from_annotations(mentions):
    return PiiSet.from_mentions(mentions, Provenance.GROUND_TRUTH)


