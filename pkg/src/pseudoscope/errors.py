"""Exception hierarchy shared by every pseudoscope module."""


class PseudoscopeError(Exception):
    """Base class for all errors raised by pseudoscope."""


class InvalidValue(PseudoscopeError, ValueError):
    """A domain value is empty or out of range."""


# --- agent protocol ---


class ProtocolError(PseudoscopeError):
    """An agent reply could not be turned into the expected structure.

    `label` is a short, stable rendering of the error ("MissingField(action)") that the repair loop
    interpolates into its corrective prompt.
    """

    def __init__(self, label: str, detail: str = ""):
        self.label = label
        super().__init__(f"{label}: {detail}" if detail else label)


class NoJsonFound(ProtocolError):
    def __init__(self, detail: str = ""):
        super().__init__("NoJsonFound", detail)


class UnknownAction(ProtocolError):
    def __init__(self, action: str):
        self.action = action
        super().__init__(f"UnknownAction({action})")


class MissingField(ProtocolError):
    def __init__(self, field: str):
        self.field = field
        super().__init__(f"MissingField({field})")


class InvalidField(ProtocolError):
    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"InvalidField({field})", detail)


class ConfidenceInvalid(ProtocolError):
    def __init__(self, value: object):
        self.value = value
        super().__init__("ConfidenceInvalid", f"confidence must be an integer in [1, 5], got {value!r}")


class UnknownCategory(ProtocolError):
    def __init__(self, category: str):
        self.category = category
        super().__init__(f"UnknownCategory({category})")


class RepairExhausted(PseudoscopeError):
    """Every attempt of the repair loop produced an unusable reply."""

    def __init__(self, raw_outputs: list[str], last_error: ProtocolError | None = None):
        self.raw_outputs = raw_outputs
        self.last_error = last_error
        reason = last_error.label if last_error else "no output"
        super().__init__(f"RepairExhausted after {len(raw_outputs)} attempt(s), last error: {reason}")


# --- llm gateway ---


class GatewayError(PseudoscopeError):
    """The LLM backend could not produce a reply."""


class TransportError(GatewayError):
    """Transport failure that persisted after all retries."""

    def __init__(self, message: str, status_code: int | None = None):
        self.status_code = status_code
        super().__init__(message)


class AuthMissing(GatewayError):
    def __init__(self, env_var: str):
        self.env_var = env_var
        super().__init__(f"Credential environment variable {env_var} is not set")


class ScriptMiss(GatewayError):
    def __init__(self, agent: str, step: int):
        self.agent = agent
        self.step = step
        super().__init__(f"Scripted backend has no entry for agent={agent!r} step={step}")


# --- ingestion ---


class SourceError(PseudoscopeError):
    """An activity source or dataset could not be read."""


class MalformedRecord(SourceError):
    def __init__(self, line: int, detail: str):
        self.line = line
        super().__init__(f"Malformed record at line {line}: {detail}")


class EmptyArchive(SourceError):
    pass


class SchemaMismatch(SourceError):
    def __init__(self, path: str, detail: str):
        self.path = path
        super().__init__(f"{path}: {detail}")


class PoolTooSmall(SourceError):
    pass


class SpanOutOfBounds(SourceError):
    pass


class OverlappingSpans(SourceError):
    pass


# --- orchestrator ---


class RunError(PseudoscopeError):
    """A profiling run could not be started, continued, or completed."""


class BackendFailure(RunError):
    def __init__(self, run_id: str, cause: Exception):
        self.run_id = run_id
        self.cause = cause
        super().__init__(f"Run {run_id} stopped on a backend failure: {cause}")


class StateMissing(RunError):
    pass


class TemplateMismatch(RunError):
    def __init__(self, stored: str, current: str):
        self.stored = stored
        self.current = current
        super().__init__(f"Prompt templates changed since the run started ({stored[:12]} != {current[:12]})")


# --- evaluation ---


class EvaluationError(PseudoscopeError):
    pass


class KeyMismatch(EvaluationError):
    pass


class EmptyInput(EvaluationError):
    pass
