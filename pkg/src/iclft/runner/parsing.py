"""Answer extraction from raw model output."""
from __future__ import annotations

import re

# Tried in order; the first pattern that matches wins.
ANSWER_PATTERNS = (
    re.compile(r"Answer: (.+)"),
    re.compile(r"The answer is (.+)"),
    re.compile(r"\*\*(.+)\*\*"),
    re.compile(r"(.+)"),
)


def parse_response(raw: str) -> str:
    for pattern in ANSWER_PATTERNS:
        m = pattern.search(raw)
        if m:
            return m.group(1).strip()
    return raw.strip()


def answers_match(prediction: str, target: str) -> bool:
    return parse_response(prediction) == target.strip()
