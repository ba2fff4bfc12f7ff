"""Harness version strings and the compatibility rule for comparing results."""

from __future__ import annotations

import re
from typing import NamedTuple

from . import HARNESS_VERSION

_SEMVER = re.compile(r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)$")


class VersionError(ValueError):
    pass


class IncompatibleVersionError(VersionError):
    pass


class Version(NamedTuple):
    major: int
    minor: int
    patch: int

    @property
    def series(self) -> str:
        return f"{self.major}.{self.minor}"

    def __str__(self) -> str:
        return f"{self.major}.{self.minor}.{self.patch}"


def parse_version(text: str) -> Version:
    m = _SEMVER.match(text) if isinstance(text, str) else None
    if m is None:
        raise VersionError(f"malformed version {text!r}; expected MAJOR.MINOR.PATCH")
    return Version(*map(int, m.groups()))


def compatible(a: str, b: str) -> bool:
    """Results are comparable iff MAJOR and MINOR agree; PATCH may differ."""
    va, vb = parse_version(a), parse_version(b)
    return va[:2] == vb[:2]


def require_compatible(found: str, expected: str = HARNESS_VERSION, what: str = "result") -> None:
    if not compatible(found, expected):
        raise IncompatibleVersionError(
            f"{what} was produced by harness {found}, which is not comparable with {expected} "
            f"(MAJOR.MINOR must match)")


CURRENT = parse_version(HARNESS_VERSION)
