"""Display formatters for prompts, reports and summary tables."""

from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Optional, Sequence, Union

ELISION_MARKER = " [...]"

Number = Union[float, Fraction, Decimal, int]


def truncate_text(value: Optional[str], limit: int) -> str:
    """Cut text to at most `limit` characters, marking the cut.

    Newlines are flattened to spaces so one history entry stays on one line.
    `None` and empty input return an empty string.
    """
    if not value:
        return ""

    text = " ".join(str(value).split())
    if len(text) <= limit:
        return text
    keep = max(limit - len(ELISION_MARKER), 0)
    return text[:keep].rstrip() + ELISION_MARKER


def format_action_list(actions: Optional[Sequence[str]]) -> str:
    """Render admissible actions as a quoted, bracketed list.

    ``["go to cabinet 1", "look"]`` becomes ``['go to cabinet 1', 'look']``.
    `None` renders as ``(not provided)``.
    """
    if actions is None:
        return "(not provided)"
    return "[" + ", ".join(f"'{action}'" for action in actions) + "]"


def to_decimal(value: Number) -> Decimal:
    """Exact decimal for fractions; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return Decimal(value.numerator) / Decimal(value.denominator)
    if isinstance(value, float):
        return Decimal(repr(value))
    return Decimal(value)


def format_percent(value: Number, places: int = 1) -> str:
    """Format a fraction in [0, 1] as a percentage rounded half-up.

    ``0.4500`` → ``"45.0%"``; ``Fraction(94, 300)`` → ``"31.3%"``.
    """
    quantum = Decimal(1).scaleb(-places)
    percent = (to_decimal(value) * 100).quantize(quantum, rounding=ROUND_HALF_UP)
    return f"{percent}%"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned plain-text table with two-space column gaps."""
    widths = [len(cell) for cell in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def _line(cells: Sequence[str]) -> str:
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(cells)).rstrip()

    lines = [_line(header), _line(["-" * w for w in widths])]
    lines.extend(_line(row) for row in rows)
    return "\n".join(lines) + "\n"
