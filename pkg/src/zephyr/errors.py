"""Exception hierarchy shared by every Zephyr component."""


class ZephyrError(Exception):
    pass


class InvalidIdentity(ZephyrError):
    pass


class PayloadTooLong(ZephyrError):
    pass


class DecodeError(ZephyrError):
    """A group element or key failed validation while decoding."""


class LengthError(ZephyrError):
    pass


class AuthFailure(ZephyrError):
    """Authenticated decryption rejected the ciphertext."""


class MalformedInput(ZephyrError):
    """Ciphertext is structurally invalid (e.g. shorter than the tag)."""


class MalformedSerialization(ZephyrError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class RouteTooShort(ZephyrError):
    pass


class OpenFailure(ZephyrError):
    """An onion layer could not be opened with the given mixer secret."""


class WrongRound(ZephyrError):
    def __init__(self, message: str, current_round: int):
        super().__init__(message)
        self.current_round = current_round


class UnknownRound(ZephyrError):
    pass


class IncompleteBundle(ZephyrError):
    def __init__(self, missing: list[int]):
        super().__init__("bundle incomplete, missing mixers: " + ", ".join(f"{m:040x}" for m in missing))
        self.missing = missing


class StaleRound(ZephyrError):
    pass


class InvalidEmail(ZephyrError):
    pass


class RateLimited(ZephyrError):
    pass


class AuthRejected(ZephyrError):
    pass


class RpcTimeout(ZephyrError):
    pass


class RemoteError(ZephyrError):
    """The peer answered with an error frame."""

    def __init__(self, kind: str, message: str, extra: int = 0):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.extra = extra


class LookupFailed(ZephyrError):
    pass


class NotJoined(ZephyrError):
    pass


class BarrierTimeout(ZephyrError):
    pass


class IllegalTransition(ZephyrError):
    pass


class SignatureInvalid(ZephyrError):
    pass


class NoLiveCandidates(ZephyrError):
    pass


class NoMixers(ZephyrError):
    pass


class ConfigInvalid(ZephyrError):
    pass


class InvariantViolation(ZephyrError):
    pass
