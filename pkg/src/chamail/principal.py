"""Session principals: the identity a proxy session runs as."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Owner:
    """Full, unfiltered passthrough access."""

    def __str__(self) -> str:
        return "owner"


@dataclass(frozen=True)
class SubUser:
    """Filtered, read-only access under the named sub-user's policy."""

    name: str

    def __str__(self) -> str:
        return f"subuser:{self.name}"


Principal = Owner | SubUser
