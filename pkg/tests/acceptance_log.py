"""Pass/fail lines collected by the acceptance tests, printed at the end of the run."""
from __future__ import annotations

LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str, seconds: float) -> str:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{seconds:.1f} s]"
    LINES.append(line)
    print(line)
    return line
