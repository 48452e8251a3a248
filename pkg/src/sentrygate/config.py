"""Deployment configuration: one JSON file, validated eagerly so a bad
path or unparsable referenced file dies at startup, not mid-traffic.
"""

from __future__ import annotations

import json
import os
import random
import secrets
from dataclasses import dataclass, field

from .alerts import (
    ATTACK_CLASSES, HIGH, LOW,
    SQLI, XSS, INJECTION_OTHER, TAMPERING, UNAUTHORIZED_ACCESS, BRUTE_FORCE,
    SESSION_HIJACK,
)
from .defender import ResponsePolicy
from .preprocessor import DEFAULT_STATIC_EXTENSIONS, DEFAULT_DECODE_CAP


class ConfigError(ValueError):
    pass


DEFAULT_SEVERITY: dict[str, str] = {cls: LOW for cls in ATTACK_CLASSES}
DEFAULT_SEVERITY.update({
    SQLI: HIGH, XSS: HIGH, INJECTION_OTHER: HIGH, TAMPERING: HIGH,
    UNAUTHORIZED_ACCESS: HIGH, BRUTE_FORCE: HIGH, SESSION_HIJACK: HIGH,
})

DEFAULT_URL_PARAM_NAMES = ("target", "fwd", "redirect", "url", "next",
                           "goto", "return_to")


@dataclass
class Limits:
    idle_timeout_s: float = 1800.0
    login_fail_limit: int = 5
    login_fail_window_s: float = 600.0
    second_factor_ttl_s: float = 300.0
    bot_window_s: float = 60.0
    min_training_samples: int = 50
    unlisted_min_support: int = 5
    suspend_ttl_s: float = 600.0
    decode_cap: int = DEFAULT_DECODE_CAP
    purge_every: int = 256

    @classmethod
    def from_dict(cls, data: dict) -> "Limits":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(data) - known
        if bad:
            raise ConfigError(f"unknown limit keys: {sorted(bad)}")
        return cls(**data)


@dataclass
class Config:
    base_dir: str = "."
    listen: str = "127.0.0.1:8080"
    upstream: str = "127.0.0.1:9000"
    session_cookie_name: str = "SESSIONID"
    static_extensions: list[str] = field(
        default_factory=lambda: list(DEFAULT_STATIC_EXTENSIONS))
    secret_file: str | None = None
    model_bundle: str | None = None
    policy_file: str | None = None
    signature_file: str | None = None
    leak_rules_file: str | None = None
    good_bots_file: str | None = None
    bad_bots_file: str | None = None
    blocklist_seed_file: str | None = None
    log_dir: str = "logs"
    gap_report_file: str | None = None
    sealed_cookies: list[str] = field(default_factory=list)
    url_param_names: list[str] = field(
        default_factory=lambda: list(DEFAULT_URL_PARAM_NAMES))
    enumerated_headers: list[str] = field(default_factory=list)
    auth_user_header: str = "x-auth-user"
    auth_role_header: str = "x-auth-role"
    auth_logout_header: str = "x-auth-logout"
    login_path: str = "/login"
    limits: Limits = field(default_factory=Limits)
    severity: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SEVERITY))
    response_policy: ResponsePolicy = field(default_factory=ResponsePolicy)
    replay_seed: int = 0

    def resolve(self, name: str | None) -> str | None:
        if name is None:
            return None
        return name if os.path.isabs(name) else os.path.join(self.base_dir, name)

    @classmethod
    def from_file(cls, path: str) -> "Config":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_dict(cls, data: dict, *, base_dir: str = ".") -> "Config":
        cfg = cls(base_dir=base_dir)
        simple = {
            "listen", "upstream", "session_cookie_name", "static_extensions",
            "secret_file", "model_bundle", "policy_file", "signature_file",
            "leak_rules_file", "good_bots_file", "bad_bots_file",
            "blocklist_seed_file", "log_dir", "gap_report_file",
            "sealed_cookies", "url_param_names", "enumerated_headers",
            "auth_user_header", "auth_role_header", "auth_logout_header",
            "login_path", "replay_seed",
        }
        for key, value in data.items():
            if key in simple:
                setattr(cfg, key, value)
            elif key == "limits":
                cfg.limits = Limits.from_dict(value)
            elif key == "severity":
                for cls_name, tier in value.items():
                    if cls_name not in ATTACK_CLASSES:
                        raise ConfigError(f"severity for unknown class {cls_name!r}")
                    if tier not in (LOW, HIGH):
                        raise ConfigError(f"severity tier must be low/high")
                    cfg.severity[cls_name] = tier
            elif key == "response_policy":
                cfg.response_policy = ResponsePolicy.from_dict(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.static_extensions:
            raise ConfigError("static_extensions must not be empty")
        for attr in ("secret_file", "model_bundle", "policy_file",
                     "signature_file", "leak_rules_file", "good_bots_file",
                     "bad_bots_file", "blocklist_seed_file"):
            path = self.resolve(getattr(self, attr))
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{attr} points at missing file: {path}")


class TokenSource:
    """Hands out session ids, csrf tokens and nonces.

    Serve mode draws from the OS csprng; replay mode uses a seeded stream
    so two replays of one trace are byte-identical.
    """

    def __init__(self, seed: int | None = None) -> None:
        self._rng = random.Random(seed) if seed is not None else None

    def token_hex(self) -> str:
        if self._rng is None:
            return secrets.token_hex(16)
        return self._rng.getrandbits(128).to_bytes(16, "big").hex()

    def randbytes(self, n: int) -> bytes:
        if self._rng is None:
            return secrets.token_bytes(n)
        return self._rng.randbytes(n)
