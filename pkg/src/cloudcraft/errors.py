"""Exception hierarchy shared by every service.

Each error carries an HTTP status so the service layer can map failures
without a per-endpoint translation table.
"""


class CloudCraftError(Exception):
    status = 400

    @property
    def code(self) -> str:
        return type(self).__name__

    def details(self) -> dict:
        """Extra fields for the error body of an HTTP response."""
        return {}


class NotFound(CloudCraftError):
    status = 404


class Conflict(CloudCraftError):
    status = 409


class Forbidden(CloudCraftError):
    status = 403


class Unavailable(CloudCraftError):
    status = 503


class BadConfig(CloudCraftError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)
