"""addr-spec handling: validation and normalization of bare email addresses.

Addresses are compared case-insensitively throughout, so every stored or
matched address goes through :func:`normalize` exactly once.
"""

from __future__ import annotations

import re

from .errors import InvalidAddress

# Dot-atom local part, dot-separated domain labels. Single-label domains
# are accepted (list members like "boss@co" are legal addr-specs).
_ATEXT = r"[A-Za-z0-9!#$%&'*+/=?^_`{|}~-]"
_LABEL = r"[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?"
_ADDR_SPEC_RE = re.compile(
    rf"^{_ATEXT}+(?:\.{_ATEXT}+)*@{_LABEL}(?:\.{_LABEL})*$"
)

MAX_LENGTH = 254


def is_addr_spec(text: str) -> bool:
    """True iff *text* is a syntactically valid local@domain address."""
    return bool(text) and len(text) <= MAX_LENGTH and _ADDR_SPEC_RE.match(text) is not None


def normalize(text: str) -> str:
    """Lowercase *text* after validating it is an addr-spec.

    Raises InvalidAddress otherwise.
    """
    if not is_addr_spec(text):
        raise InvalidAddress(f"not a valid address: {text!r}")
    return text.lower()
