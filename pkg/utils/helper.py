# utils/helper.py
import csv
import os
import re
from collections.abc import Iterable, Sequence
from pathlib import Path


def parse_int_list(value: str) -> list[int]:
    """Parse a comma separated list of positive integers such as "1,5,10"."""
    try:
        numbers = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"Invalid integer list: {value!r}") from None
    if not numbers or any(n <= 0 for n in numbers):
        raise ValueError(f"Expected positive integers, got {value!r}")
    return numbers


def sanitize_dirname(name: str) -> str:
    """Turn a free-form row label into a safe, single directory name.

    - Lowercases and replaces every run of characters outside [a-z0-9] by "-"
    - Strips leading/trailing separators so no hidden or traversal names appear
    - Rejects empty results

    Args:
        name: The label, e.g. "Images: Fullframe Only"

    Returns:
        A directory name such as "images-fullframe-only"
    """
    slug = re.sub(r"[^a-z0-9]+", "-", name.replace("\x00", "").lower()).strip("-")
    if not slug:
        raise ValueError(f"Invalid directory name: {name!r}")
    return slug


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return out
