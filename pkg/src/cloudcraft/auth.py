"""User accounts, signed bearer tokens and the role/action access matrix."""
from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import secrets
from dataclasses import dataclass
from enum import Enum

from cloudcraft.domain import Clock, Namespace, Store, SystemClock, VersionConflict
from cloudcraft.errors import CloudCraftError, Conflict

log = logging.getLogger(__name__)


class Role(str, Enum):
    CUSTOMER = "Customer"
    WEBSHOP_OPERATOR = "WebshopOperator"
    PLATFORM_OPERATOR = "PlatformOperator"
    DESIGNER = "Designer"
    PRINTER_OPERATOR = "PrinterOperator"


class Action(str, Enum):
    UPLOAD_MODEL = "upload_model"
    CREATE_ORDER = "create_order"
    READ_ORDER = "read_order"
    REGISTER_PRINTER = "register_printer"
    MANAGE_CODES = "manage_codes"
    READ_LEDGER = "read_ledger"


# Roles allowed each action unconditionally.
ALLOW: dict[Action, frozenset[Role]] = {
    Action.UPLOAD_MODEL: frozenset({Role.DESIGNER}),
    Action.CREATE_ORDER: frozenset({Role.WEBSHOP_OPERATOR}),
    Action.READ_ORDER: frozenset({Role.WEBSHOP_OPERATOR, Role.PLATFORM_OPERATOR}),
    Action.REGISTER_PRINTER: frozenset({Role.PRINTER_OPERATOR}),
    Action.MANAGE_CODES: frozenset({Role.WEBSHOP_OPERATOR, Role.PLATFORM_OPERATOR}),
    Action.READ_LEDGER: frozenset({Role.PLATFORM_OPERATOR}),
}

# Roles allowed an action only on records they own.
ALLOW_OWN: dict[Action, frozenset[Role]] = {
    Action.READ_LEDGER: frozenset({Role.WEBSHOP_OPERATOR, Role.DESIGNER, Role.PRINTER_OPERATOR}),
}


def authorize(role: Role, action: Action, *, own: bool = False) -> bool:
    role, action = Role(role), Action(action)
    if role in ALLOW.get(action, ()):
        return True
    return own and role in ALLOW_OWN.get(action, ())


class DuplicateUser(Conflict):
    pass


class WeakCredential(CloudCraftError):
    pass


class BadCredentials(CloudCraftError):
    status = 401

    def __init__(self):
        super().__init__("bad credentials")


class InvalidToken(CloudCraftError):
    status = 401


class ExpiredToken(InvalidToken):
    pass


MIN_CREDENTIAL_LENGTH = 8


def hash_credential(credential: str, *, iterations: int, salt: bytes | None = None) -> str:
    salt = salt or secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", credential.encode(), salt, iterations)
    return f"pbkdf2_sha256${iterations}${salt.hex()}${digest.hex()}"


def verify_credential(credential: str, stored: str) -> bool:
    try:
        scheme, iterations, salt, digest = stored.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2_sha256":
        return False
    candidate = hashlib.pbkdf2_hmac("sha256", credential.encode(), bytes.fromhex(salt), int(iterations))
    return hmac.compare_digest(candidate.hex(), digest)


@dataclass(frozen=True)
class UserAccount:
    user_id: str
    display_name: str
    credential_hash: str
    role: Role

    def to_doc(self) -> dict:
        return {
            "user_id": self.user_id,
            "display_name": self.display_name,
            "credential_hash": self.credential_hash,
            "role": self.role.value,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> UserAccount:
        return cls(doc["user_id"], doc["display_name"], doc["credential_hash"], Role(doc["role"]))


@dataclass(frozen=True)
class AuthToken:
    subject: str
    role: Role
    issued_at: float
    expires_at: float
    signature: str
    encoded: str

    def __str__(self) -> str:
        return self.encoded


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


class TokenSigner:
    """HMAC-SHA256 over a compact JSON claim set: ``<payload>.<mac>``."""

    def __init__(self, key: str | bytes, clock: Clock | None = None):
        self._key = key.encode() if isinstance(key, str) else key
        self.clock = clock or SystemClock()

    def __repr__(self) -> str:
        return "TokenSigner(key=<hidden>)"

    def _mac(self, payload: str) -> str:
        return _b64(hmac.new(self._key, payload.encode("ascii"), hashlib.sha256).digest())

    def issue(self, subject: str, role: Role, lifetime_s: float) -> AuthToken:
        now = self.clock.now()
        claims = {"sub": subject, "role": Role(role).value, "iat": now, "exp": now + lifetime_s}
        payload = _b64(json.dumps(claims, sort_keys=True, separators=(",", ":")).encode())
        signature = self._mac(payload)
        return AuthToken(subject, Role(role), now, now + lifetime_s, signature, f"{payload}.{signature}")

    def validate(self, token: str) -> tuple[str, Role]:
        if not isinstance(token, str) or token.count(".") != 1:
            raise InvalidToken("malformed token")
        payload, signature = token.split(".")
        try:
            if not hmac.compare_digest(self._mac(payload), signature):
                raise InvalidToken("bad signature")
            claims = json.loads(_unb64(payload))
            subject, role, expires = claims["sub"], Role(claims["role"]), float(claims["exp"])
        except InvalidToken:
            raise
        except (ValueError, KeyError, TypeError, UnicodeError) as exc:
            raise InvalidToken("malformed token") from exc
        if self.clock.now() >= expires:
            raise ExpiredToken("token expired")
        return subject, role


class AuthService:
    def __init__(
        self,
        store: Store,
        signing_key: str | bytes,
        clock: Clock | None = None,
        token_lifetime_s: float = 3600,
        hash_iterations: int = 100_000,
    ):
        self.store = store
        self.clock = clock or SystemClock()
        self.signer = TokenSigner(signing_key, self.clock)
        self.token_lifetime_s = token_lifetime_s
        self.hash_iterations = hash_iterations
        # Burned on unknown users so both failure paths cost the same.
        self._decoy_hash = hash_credential(secrets.token_hex(8), iterations=hash_iterations)

    def register_user(self, name: str, credential: str, role: Role, display_name: str | None = None) -> UserAccount:
        if not name or not name.strip():
            raise CloudCraftError("name must not be empty")
        if len(credential or "") < MIN_CREDENTIAL_LENGTH:
            raise WeakCredential(f"credential must have at least {MIN_CREDENTIAL_LENGTH} characters")
        account = UserAccount(
            user_id=name,
            display_name=display_name or name,
            credential_hash=hash_credential(credential, iterations=self.hash_iterations),
            role=Role(role),
        )
        try:
            self.store.put(Namespace.USERS, name, account.to_doc(), expected_version=0)
        except VersionConflict:
            raise DuplicateUser(f"user {name!r} already exists") from None
        log.info("registered user %s as %s", name, account.role.value)
        return account

    def get_user(self, user_id: str) -> UserAccount | None:
        found = self.store.find(Namespace.USERS, user_id)
        return UserAccount.from_doc(found[0]) if found else None

    def login(self, name: str, credential: str) -> AuthToken:
        account = self.get_user(name)
        stored = account.credential_hash if account else self._decoy_hash
        if not verify_credential(credential or "", stored) or account is None:
            raise BadCredentials()
        return self.signer.issue(account.user_id, account.role, self.token_lifetime_s)

    def validate_token(self, token: str) -> tuple[str, Role]:
        return self.signer.validate(token)
