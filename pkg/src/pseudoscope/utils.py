import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any

import tiktoken

logger = logging.getLogger(__name__)

TOKENS_PER_WORD = 1.3


def count_tokens(text: str, model_name: str = "gpt-4o") -> int:
    """Counts the number of tokens in a text string using tiktoken.

    Falls back to the word heuristic when no encoding can be loaded (offline machines).
    """
    if not text:
        return 0
    try:
        try:
            encoding = tiktoken.encoding_for_model(model_name)
        except KeyError:
            logger.warning(f"Warning: model {model_name} not found. Using cl100k_base encoding.")
            encoding = tiktoken.get_encoding("cl100k_base")
        return len(encoding.encode(text))
    except Exception as e:
        logger.warning(f"tiktoken unavailable ({e}); using approximate token count")
        return approximate_tokens(text)


def approximate_tokens(text: str) -> int:
    """Whitespace words x 1.3, rounded up. Reported as approximate."""
    return math.ceil(len(text.split()) * TOKENS_PER_WORD)


def canonical_json(obj: Any) -> str:
    """Sorted keys, no insignificant whitespace, UTF-8 characters kept as-is."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def atomic_write_text(path: Path, content: str) -> None:
    """Write to a temp file in the same directory, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
