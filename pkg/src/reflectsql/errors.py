"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ReflectSQLError(Exception):
    """Base class for all package errors."""


class GatewayError(ReflectSQLError):
    pass


class TransportError(GatewayError):
    """The HTTP backend exhausted its retries."""


class CassetteMiss(GatewayError):
    def __init__(self, fingerprint: str, stage_tag: str = ""):
        self.fingerprint = fingerprint
        self.stage_tag = stage_tag
        super().__init__(f"no cassette entry for fingerprint {fingerprint} (stage {stage_tag or '?'})")


class CassetteConflict(GatewayError):
    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        super().__init__(
            f"fingerprint {fingerprint} already recorded with a different response; backend is not deterministic"
        )


class ScriptedExhausted(GatewayError):
    def __init__(self, key: tuple):
        self.key = key
        super().__init__(f"scripted backend has no response for {key!r}")


class ContractViolation(ReflectSQLError):
    """A model output did not satisfy its structured-output contract."""

    def __init__(self, stage: str, problems: list[str] | str):
        self.stage = stage
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__(f"{stage}: " + "; ".join(self.problems))


class StageError(ReflectSQLError):
    """A pipeline stage failed after its repair attempt; carries the partial state."""

    def __init__(self, stage: str, cause: Exception, state=None):
        self.stage = stage
        self.cause = cause
        self.state = state
        super().__init__(f"stage {stage} failed: {cause}")


class ProxyError(ReflectSQLError):
    pass


class UnreadableDatabase(ProxyError):
    pass


class IntrospectionFailure(ProxyError):
    pass


class CorruptFile(ProxyError):
    pass


class VersionMismatch(ProxyError):
    pass


class UnknownTable(ReflectSQLError):
    pass


class UnparseableSQL(ReflectSQLError):
    pass


class StaleVersion(ReflectSQLError):
    pass


class MeasurementError(ReflectSQLError):
    pass


class DatasetError(ReflectSQLError):
    pass


class MissingFile(DatasetError):
    pass


class MalformedRecord(DatasetError):
    pass
