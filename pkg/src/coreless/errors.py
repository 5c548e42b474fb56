"""Exception hierarchy shared by every simulator component."""


class CorelessError(Exception):
    """Base class for all simulator errors."""


# engine
class SchedulingInPast(CorelessError):
    pass


class NoRoute(CorelessError):
    pass


# EPC functions
class SubscriberUnknown(CorelessError):
    pass


class AlreadyAttached(CorelessError):
    pass


class AuthenticationFailed(CorelessError):
    pass


class WapAtCapacity(CorelessError):
    pass


class PoolExhausted(CorelessError):
    pass


# discovery / EAP
class AnqpUnsupported(CorelessError):
    pass


class InvalidQuery(CorelessError):
    pass


class MethodUnavailable(CorelessError):
    pass


class CertificateInvalid(CorelessError):
    pass


# mobility
class HandoverRejected(CorelessError):
    pass


class NotAttached(CorelessError):
    pass


class InterfaceNotAttached(CorelessError):
    pass


class AllPathsFailed(CorelessError):
    pass


# controller
class Infeasible(CorelessError):
    pass


class Timeout(CorelessError):
    pass


class StaleVersion(CorelessError):
    pass


class InvalidCoreSet(CorelessError):
    pass


class WapBusy(CorelessError):
    pass


# capacity model
class InvalidParams(CorelessError, ValueError):
    pass


# scenarios / reports
class ParseError(CorelessError):
    def __init__(self, line_no: int, token: str, reason: str = ""):
        self.line_no = line_no
        self.token = token
        msg = f"line {line_no}: unexpected {token!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class RuntimeScenarioError(CorelessError):
    pass


class UnknownFormat(CorelessError):
    pass


class NotCompleted(CorelessError):
    """A pending procedure was queried before the engine delivered its outcome."""
