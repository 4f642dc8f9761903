"""Shared collector for the acceptance verdict lines.

test_acceptance.py records one PASS/FAIL line per criterion here; the
conftest terminal-summary hook prints them after the run so the verdicts
are visible even when pytest captures test stdout.
"""

LINES: list[str] = []


def record(line: str) -> None:
    LINES.append(line)
    print(line)
