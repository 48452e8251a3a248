"""Trained-model bundle: everything the proxy learns offline, in one
JSON document so a deployment is a single artifact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .access_controller import RoleProfile
from .bot_detector import BotBaseline
from .data_validator import (
    CharDistModel, EnumModel, ParamSpec, UrlWhitelist,
)
from .preprocessor import StaticAssetModel
from .user_verifier import UserProfile

BUNDLE_VERSION = 1


class BundleError(ValueError):
    pass


@dataclass
class ModelBundle:
    request_filter: StaticAssetModel | None = None
    bot_baseline: BotBaseline | None = None
    specs: dict[str, ParamSpec] = field(default_factory=dict)
    enums: dict[str, EnumModel] = field(default_factory=dict)
    formats: dict[str, CharDistModel] = field(default_factory=dict)
    url_whitelist: UrlWhitelist = field(default_factory=UrlWhitelist)
    watched_params: list[str] = field(default_factory=list)
    user_profiles: dict[str, UserProfile] = field(default_factory=dict)
    role_profile: RoleProfile | None = None
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls) -> "ModelBundle":
        return cls()

    def to_dict(self) -> dict:
        return {
            "version": BUNDLE_VERSION,
            "request_filter": (self.request_filter.to_dict()
                               if self.request_filter else None),
            "bot_baseline": (self.bot_baseline.to_dict()
                             if self.bot_baseline else None),
            "specs": [
                {"template": s.path_template, "location": s.location,
                 "name": s.name, "category": s.category, "source": s.source}
                for s in sorted(self.specs.values(),
                                key=lambda s: s.scope_key)
            ],
            "enums": {k: v.to_dict() for k, v in sorted(self.enums.items())},
            "formats": {k: v.to_dict()
                        for k, v in sorted(self.formats.items())},
            "url_whitelist": self.url_whitelist.to_dict(),
            "watched_params": sorted(self.watched_params),
            "user_profiles": {u: p.to_dict()
                              for u, p in sorted(self.user_profiles.items())},
            "role_profile": (self.role_profile.to_dict()
                             if self.role_profile else None),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBundle":
        if data.get("version") != BUNDLE_VERSION:
            raise BundleError(f"unsupported bundle version {data.get('version')!r}")
        specs: dict[str, ParamSpec] = {}
        for row in data.get("specs", []):
            spec = ParamSpec(path_template=row["template"],
                             location=row["location"], name=row["name"],
                             category=row["category"],
                             source=row.get("source", "learned"))
            specs[spec.scope_key] = spec
        rf = data.get("request_filter")
        bb = data.get("bot_baseline")
        rp = data.get("role_profile")
        return cls(
            request_filter=StaticAssetModel.from_dict(rf) if rf else None,
            bot_baseline=BotBaseline.from_dict(bb) if bb else None,
            specs=specs,
            enums={k: EnumModel.from_dict(v)
                   for k, v in data.get("enums", {}).items()},
            formats={k: CharDistModel.from_dict(v)
                     for k, v in data.get("formats", {}).items()},
            url_whitelist=UrlWhitelist.from_dict(
                data.get("url_whitelist", {"trusted": [],
                                           "allow_relative_same_site": True})),
            watched_params=list(data.get("watched_params", [])),
            user_profiles={u: UserProfile.from_dict(p)
                           for u, p in data.get("user_profiles", {}).items()},
            role_profile=RoleProfile.from_dict(rp) if rp else None,
            warnings=list(data.get("warnings", [])),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_file(cls, path: str) -> "ModelBundle":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise BundleError(f"cannot load model bundle: {exc}") from exc
        return cls.from_dict(data)
