"""
Environment settings.

Διαβάζει το .env (αν υπάρχει) και τις μεταβλητές PATCHBENCH_*.
Τις διαβάζουμε κάθε φορά που ζητούνται ώστε τα tests να μπορούν
να τις αλλάξουν με monkeypatch.
"""

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DEFAULT_CACHE_DIR = Path.home() / ".cache" / "patchbench"
DEFAULT_DATABASE_URL = "sqlite:///./patchbench.db"


@dataclass(frozen=True)
class Settings:
    cache_dir: Path
    database_url: str


def get_settings() -> Settings:
    cache = os.getenv("PATCHBENCH_CACHE")
    return Settings(
        cache_dir=Path(cache).expanduser() if cache else DEFAULT_CACHE_DIR,
        database_url=os.getenv("PATCHBENCH_DB", DEFAULT_DATABASE_URL),
    )
