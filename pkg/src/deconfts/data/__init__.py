"""Bundled sample data."""
from pathlib import Path

BUNDLED = {"tiny": Path(__file__).with_name("tiny.csv")}


def resolve_dataset(source) -> Path:
    """Map a bundled dataset name to its path; anything else is taken as a path."""
    return BUNDLED.get(str(source), Path(source))
