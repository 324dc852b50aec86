"""
Run configuration: a TOML file parsed with tomlkit, merged over defaults,
overridable from the command line and validated before any stage runs.

Relative paths resolve against the config file's folder. Only `api_key`
values accept ${VAR} interpolation, and LEAKPROBE_API_KEY wins over the file.
"""
import os
import re
import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import tomlkit
from tomlkit.exceptions import TOMLKitError

from src import DEFAULT_CONFIG_FILE
from src.attack import AttackKind, AttackPlan, PromptSource, PromptSourceKind
from src.backend import API_KEY_ENV, BackendKind, BackendRole, GenerationConfig, http_backend, mock_memorizing_backend
from src.corpus import (CLASSIFICATION_SEPARATOR, DEFAULT_EXCLUSION_HEURISTICS, CorpusFormat, FilterPolicy, Task,
                        low_natural_language)
from src.errors import ConfigError
from src.pii import PatternSet, load_patterns

logger = logging.getLogger(__name__)

_INTERPOLATION = re.compile(r'^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$')

BACKEND_DEFAULTS = {
    'kind': 'mock', 'endpoint': None, 'model_id': None, 'api_key': None, 'leak_rate': None,
    'max_in_flight': 4, 'retry_budget': 5, 'timeout': 60.0, 'backoff_base': 1.0, 'backoff_max': 60.0,
}

DEFAULTS = {
    'seed': 0,
    'task': 'classification',
    'output_dir': 'runs/default',
    'corpus': {'source': 'synthetic', 'path': None, 'format': 'jsonl', 'train_count': None},
    'synthetic': {'n_emails': 50, 'n_pii': 120},
    'filter': {'min_sentences': 3, 'min_words': 25, 'max_words': 256,
               'heuristics': [heuristic.name for heuristic in DEFAULT_EXCLUSION_HEURISTICS],
               'low_natural_language': 0.30},
    'finetune': {'separator': CLASSIFICATION_SEPARATOR},
    'pii': {'gazetteer': None, 'patterns': None, 'enabled_patterns': None, 'annotations': None,
            'examples_per_category': 4},
    'attack': {'n_queries': 1800, 'blank_fraction': 0.5, 'snippet_length_chars': 100, 'queries_per_subject': 5,
               'prompt_source': 'reference_snippets', 'reference_text': None, 'max_tokens': 256,
               'temperature': None, 'temperature_min': 0.5, 'temperature_max': 1.0, 'stop': None,
               'failure_threshold': 0.10, 'checkpoint_every': 50, 'request_limit': None, 'retry_failed': False},
    'backends': {'fine_tuned': dict(BACKEND_DEFAULTS, leak_rate=1.0),
                 'base': dict(BACKEND_DEFAULTS, leak_rate=0.0)},
    'analysis': {'subtract_base': None, 'formats': ['text', 'csv', 'json']},
}

PATH_KEYS = (('corpus', 'path'), ('pii', 'gazetteer'), ('pii', 'patterns'), ('pii', 'annotations'),
             ('attack', 'reference_text'))
REPORT_FORMATS = ('text', 'csv', 'json')


def _merge(defaults, values, where):
    """Overlay values on defaults, rejecting keys the defaults do not declare."""
    merged = copy.deepcopy(defaults)
    for key, value in values.items():
        if key not in defaults:
            raise ConfigError('UnknownKey', f"unknown configuration key {where + key!r}", key=where + key)
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError('InvalidValue', f"{where + key!r} must be a table", key=where + key)
            merged[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            merged[key] = value
    return merged


def _interpolate_secret(value):
    if not isinstance(value, str):
        return value
    match = _INTERPOLATION.match(value.strip())
    if match:
        return os.getenv(match.group(1), '')
    return value


@dataclass
class RunConfig:
    values: dict
    base_dir: str
    source_path: Optional[str] = None
    overrides: dict = field(default_factory=dict)

    # -- simple accessors -------------------------------------------------

    @property
    def seed(self):
        return int(self.values['seed'])

    @property
    def task(self):
        return Task(self.values['task'])

    @property
    def output_dir(self):
        if 'output_dir' in self.overrides:
            return os.path.abspath(self.overrides['output_dir'])
        return self.resolve(self.values['output_dir'])

    def section(self, name):
        return self.values[name]

    def resolve(self, path):
        if path is None or path == '':
            return None
        return os.path.normpath(os.path.join(self.base_dir, os.path.expanduser(path)))

    def path(self, section, key):
        return self.resolve(self.values[section][key])

    @property
    def uses_synthetic_corpus(self):
        return self.values['corpus']['source'] == 'synthetic'

    @property
    def corpus_format(self):
        return CorpusFormat(self.values['corpus']['format'])

    @property
    def train_count(self):
        value = self.values['corpus']['train_count']
        return None if value is None else int(value)

    @property
    def separator(self):
        return self.values['finetune']['separator']

    @property
    def examples_per_category(self):
        return int(self.values['pii']['examples_per_category'])

    @property
    def report_formats(self):
        return list(self.values['analysis']['formats'])

    @property
    def subtract_base(self):
        value = self.values['analysis']['subtract_base']
        if value is None:
            return self.task is Task.CLASSIFICATION
        return bool(value)

    # -- domain objects ---------------------------------------------------

    def filter_policy(self):
        section = self.values['filter']
        by_name = {heuristic.name: heuristic for heuristic in DEFAULT_EXCLUSION_HEURISTICS}
        unknown = [name for name in section['heuristics'] if name not in by_name]
        if unknown:
            raise ConfigError('UnknownHeuristic', f"unknown exclusion heuristics {unknown}", heuristics=unknown)
        threshold = section['low_natural_language']
        return FilterPolicy(min_sentences=int(section['min_sentences']), min_words=int(section['min_words']),
                            max_words=int(section['max_words']),
                            exclusion_heuristics=tuple(by_name[name] for name in section['heuristics']),
                            low_natural_language_heuristic=None if threshold is False
                            else low_natural_language(float(threshold)))

    def generation_config(self):
        section = self.values['attack']
        temperature = section['temperature']
        stop = section['stop']
        return GenerationConfig(max_tokens=int(section['max_tokens']),
                                temperature=None if temperature is None else float(temperature),
                                temperature_range=(float(section['temperature_min']),
                                                   float(section['temperature_max'])),
                                stop=tuple(stop) if stop else None, seed=self.seed)

    def attack_plan(self, kind):
        section = self.values['attack']
        return AttackPlan(kind=AttackKind(kind), n_queries=int(section['n_queries']),
                          blank_fraction=float(section['blank_fraction']),
                          snippet_length_chars=int(section['snippet_length_chars']),
                          queries_per_subject=int(section['queries_per_subject']), config=self.generation_config(),
                          seed=self.seed, failure_threshold=float(section['failure_threshold']),
                          separator=self.separator)

    def prompt_source(self):
        kind = PromptSourceKind(self.values['attack']['prompt_source'])
        if kind is PromptSourceKind.BLANK:
            return PromptSource.blank()
        if kind is PromptSourceKind.SUBJECT_LIST:
            raise ConfigError('InvalidValue', "attack.prompt_source must be reference_snippets or blank")
        path = self.path('attack', 'reference_text')
        if path is None:
            raise ConfigError('MissingPath', "attack.reference_text is required for snippet prompts")
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                return PromptSource.snippets(handle.read())
        except UnicodeDecodeError as e:
            raise ConfigError('Encoding', f"attack.reference_text is not valid UTF-8: {e}", path=path) from e

    def pattern_set(self):
        enabled = self.values['pii']['enabled_patterns']
        path = self.path('pii', 'patterns')
        if path is not None:
            return load_patterns(path, enabled)
        return PatternSet.default(enabled)

    def api_key(self, role):
        file_value = _interpolate_secret(self.values['backends'][BackendRole(role).value]['api_key']) or None
        return os.getenv(API_KEY_ENV, file_value) or None

    def backend_kind(self, role):
        return BackendKind(self.values['backends'][BackendRole(role).value]['kind'])

    def backend_descriptor(self, role, corpus):
        """Descriptor for one backend role; mock backends memorize `corpus`."""
        role = BackendRole(role)
        section = self.values['backends'][role.value]
        if self.backend_kind(role) is BackendKind.MOCK_MEMORIZING:
            return mock_memorizing_backend(corpus, float(section['leak_rate']), self.seed, role)
        return http_backend(section['endpoint'], section['model_id'], role,
                            max_in_flight=int(section['max_in_flight']), retry_budget=int(section['retry_budget']),
                            timeout=float(section['timeout']), backoff_base=float(section['backoff_base']),
                            backoff_max=float(section['backoff_max']))

    def roles(self):
        """Backend roles the configured task queries."""
        if self.task is Task.CLASSIFICATION:
            return [BackendRole.FINE_TUNED, BackendRole.BASE]
        return [BackendRole.FINE_TUNED]

    # -- validation / manifest -------------------------------------------

    def validate(self, require_backends=True):
        """Check values and paths, and backend credentials when a stage will query them. Returns self."""
        try:
            Task(self.values['task'])
            CorpusFormat(self.values['corpus']['format'])
            if self.values['corpus']['source'] not in ('synthetic', 'file'):
                raise ConfigError('InvalidValue', "corpus.source must be synthetic or file")
            if not self.uses_synthetic_corpus and self.path('corpus', 'path') is None:
                raise ConfigError('MissingPath', "corpus.path is required when corpus.source = file")
            if self.seed < 0:
                raise ConfigError('InvalidValue', "seed must be non-negative", seed=self.seed)
            if self.train_count is not None and self.train_count < 0:
                raise ConfigError('InvalidValue', "corpus.train_count must be non-negative")
            unknown_formats = [fmt for fmt in self.report_formats if fmt not in REPORT_FORMATS]
            if unknown_formats:
                raise ConfigError('InvalidValue', f"unknown report formats {unknown_formats}")
            if not self.separator:
                raise ConfigError('InvalidValue', "finetune.separator must be non-empty")
            PromptSourceKind(self.values['attack']['prompt_source'])
        except ValueError as e:
            raise ConfigError('InvalidValue', str(e)) from e

        for section, key in PATH_KEYS:
            path = self.path(section, key)
            if path is not None and not os.path.exists(path):
                raise ConfigError('MissingPath', f"{section}.{key} does not exist", path=path)

        self.filter_policy()
        self.pattern_set()
        self.attack_plan(AttackKind.NAIVE_EXTRACTION if self.task is Task.CLASSIFICATION else AttackKind.AUTOCOMPLETE)
        if self.task is Task.CLASSIFICATION:
            self.prompt_source()

        for role in self.roles() if require_backends else ():
            section = self.values['backends'][role.value]
            try:
                kind = self.backend_kind(role)
            except ValueError as e:
                raise ConfigError('InvalidBackend', str(e), role=role.value) from e
            if kind is BackendKind.HTTP:
                if not section['endpoint'] or not section['model_id']:
                    raise ConfigError('InvalidBackend', "http backends need endpoint and model_id", role=role.value)
                if self.api_key(role) is None:
                    raise ConfigError('MissingApiKey', f"{API_KEY_ENV} is not set", role=role.value)
            elif not 0.0 <= float(section['leak_rate']) <= 1.0:
                raise ConfigError('InvalidLeakRate', "leak_rate must lie in [0, 1]", role=role.value)
        return self

    def to_manifest(self):
        """Resolved configuration without secrets."""
        values = copy.deepcopy(self.values)
        for section in values['backends'].values():
            section.pop('api_key', None)
        values['output_dir'] = self.overrides.get('output_dir', values['output_dir'])
        return values


def load_config(path=None, overrides=None):
    """Read, merge and override a run configuration (not yet validated)."""
    path = path or DEFAULT_CONFIG_FILE
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            document = tomlkit.parse(handle.read())
    except FileNotFoundError as e:
        raise ConfigError('MissingPath', "config file does not exist", path=str(path)) from e
    except TOMLKitError as e:
        raise ConfigError('InvalidToml', str(e), path=str(path)) from e

    values = _merge(DEFAULTS, document.unwrap(), '')
    overrides = {key: value for key, value in (overrides or {}).items() if value is not None}
    if 'seed' in overrides:
        values['seed'] = int(overrides['seed'])
    if 'task' in overrides:
        values['task'] = overrides['task']
    if 'backend' in overrides:
        for role in values['backends'].values():
            role['kind'] = overrides['backend']
    logger.info(f"Loaded run configuration from {path}")
    return RunConfig(values=values, base_dir=os.path.dirname(os.path.abspath(path)), source_path=str(path),
                     overrides=overrides)
