class BficaError(Exception):
    """Base error for the bfica package."""


class CryptoError(BficaError):
    """Bad key material or digest input."""


class DecodeError(CryptoError):
    """Malformed canonical bytes or ciphertext."""


class DecryptionError(CryptoError):
    """Authenticated decryption failed (wrong key or altered ciphertext)."""


class IdentityError(BficaError):
    """Identity issuance refused."""


class PermissionDenied(BficaError):
    pass


class NotFound(BficaError):
    pass


class TransactionError(BficaError):
    """Transaction construction refused."""


class ProtocolError(BficaError):
    """Protocol step invoked out of order."""


class ConfigError(BficaError):
    pass


class ScenarioError(BficaError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
