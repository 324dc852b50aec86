"""
Exception hierarchy shared by every stage.

Each error carries a ``kind`` string that callers and tests can match on,
plus structured context (line numbers, record ids, HTTP status, ...).
"""


class LeakprobeError(Exception):
    def __init__(self, kind, message=None, **context):
        self.kind = kind
        self.context = context
        details = ", ".join(f"{key}={value!r}" for key, value in sorted(context.items()))
        text = f"{kind}: {message}" if message else kind
        if details:
            text = f"{text} ({details})"
        super().__init__(text)

    def __getattr__(self, item):
        # Expose context fields as attributes, e.g. err.line
        context = self.__dict__.get('context', {})
        if item in context:
            return context[item]
        raise AttributeError(item)


class CorpusError(LeakprobeError):
    pass


class PiiError(LeakprobeError):
    pass


class ConfigError(LeakprobeError):
    pass


class BackendError(LeakprobeError):
    pass


class RateLimitedError(BackendError):
    def __init__(self, message=None, **context):
        super().__init__('RateLimited', message, **context)


class UpstreamError(BackendError):
    pass


class BackendTimeout(BackendError):
    def __init__(self, message=None, **context):
        super().__init__('Timeout', message, **context)


class AttackError(LeakprobeError):
    pass


class AnalysisError(LeakprobeError):
    pass


# Error kinds that are caller mistakes rather than runtime failures
VALIDATION_ATTACK_KINDS = frozenset({'PlanMismatch', 'InvalidPlan', 'InvalidPromptSource',
                                     'ReferenceTooShort', 'NoCleanSnippet', 'NoSubjects',
                                     'SeparatorInPrompt', 'NoCheckpoint', 'Encoding',
                                     'CorruptCheckpoint'})


def is_validation_error(err):
    """True when the error should be reported as a validation failure (exit code 1)."""
    if isinstance(err, (CorpusError, PiiError, ConfigError, AnalysisError)):
        return True
    if isinstance(err, AttackError):
        return err.kind in VALIDATION_ATTACK_KINDS
    return False
