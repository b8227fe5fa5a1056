"""Extraction of JSON values embedded in model output"""

import json
import logging
import re
from typing import Any, Literal

from app.exceptions import NoJsonFound, ParseFailure, UnbalancedBraces

# Configure logging
logger = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"```[A-Za-z0-9_+-]*")
_SMART_QUOTES = str.maketrans({
    "“": '"',
    "”": '"',
    "„": '"',
    "‘": "'",
    "’": "'",
})

JsonShape = Literal["object", "array"]


def _first_balanced_block(text: str, shape: JsonShape) -> str:
    """Return the first balanced block of the requested shape, skipping string literals."""
    opener, closer = ("{", "}") if shape == "object" else ("[", "]")
    start = text.find(opener)
    if start < 0:
        raise NoJsonFound(f"No JSON {shape} found in model output")

    depth = 0
    in_string = False
    escaped = False
    for position in range(start, len(text)):
        char = text[position]
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == opener:
            depth += 1
        elif char == closer:
            depth -= 1
            if depth == 0:
                return text[start:position + 1]

    raise UnbalancedBraces(f"JSON {shape} opened at offset {start} is never closed")


def _strip_trailing_commas(block: str) -> str:
    """Drop commas that directly precede a closing brace or bracket outside strings."""
    result = []
    in_string = False
    escaped = False
    length = len(block)
    for position, char in enumerate(block):
        if in_string:
            result.append(char)
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == ",":
            lookahead = position + 1
            while lookahead < length and block[lookahead].isspace():
                lookahead += 1
            if lookahead < length and block[lookahead] in "}]":
                continue
        result.append(char)
    return "".join(result)


def extract_json(text: str, shape: JsonShape = "object") -> Any:
    """
    Parse the first JSON object (or array) embedded in free text.

    The first balanced block of the raw text is parsed as is. Only when that
    fails are code fences stripped, smart quotes normalized and trailing
    commas dropped before one more parse.

    Args:
        text: Raw model output
        shape: "object" for {...} blocks, "array" for [...] blocks

    Returns:
        The parsed JSON value

    Raises:
        NoJsonFound: If no opener of the requested shape appears
        UnbalancedBraces: If the first block never closes
        ParseFailure: If the block is still invalid after repair
    """
    try:
        return json.loads(_first_balanced_block(text, shape))
    except (NoJsonFound, UnbalancedBraces, ValueError, RecursionError):
        pass

    cleaned = _FENCE_RE.sub("", text).translate(_SMART_QUOTES)
    repaired = _strip_trailing_commas(_first_balanced_block(cleaned, shape))
    try:
        value = json.loads(repaired)
    except (ValueError, RecursionError) as e:
        raise ParseFailure(f"Invalid JSON after repair: {e}") from e

    logger.warning("Recovered JSON from model output after repair")
    return value
