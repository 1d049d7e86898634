"""
Backends για πραγματικούς detectors.

Κάθε backend είναι μια υποκλάση του DetectorAdapter με classmethod
from_entry(entry, settings). Τα βάρη κατεβαίνουν on demand στο
PATCHBENCH_CACHE όταν το registry δίνει weights_url.
"""

import logging
from pathlib import Path
from typing import Union
from urllib.parse import urlparse

import requests

from ..errors import BackendUnavailableError
from ..schemas import AdapterEntry
from ..settings import Settings

logger = logging.getLogger(__name__)

DOWNLOAD_TIMEOUT = 60
CHUNK_SIZE = 1 << 20


def fetch_weights(entry: AdapterEntry, settings: Settings) -> Union[str, Path]:
    """
    Επιστρέφει το path των βαρών, κατεβάζοντάς τα αν χρειάζεται.

    Χωρίς weights_url επιστρέφεται το weights_id όπως είναι
    (π.χ. "yolov8n.pt", που το κατεβάζει το ίδιο το backend).
    """
    if not entry.weights_url:
        return entry.weights_id

    filename = Path(urlparse(entry.weights_url).path).name or f"{entry.weights_id}.pt"
    target = settings.cache_dir / entry.name / filename
    if target.exists():
        logger.info(f"✅ Weights for '{entry.name}' found in cache: {target}")
        return target

    target.parent.mkdir(parents=True, exist_ok=True)
    partial = target.with_name(target.name + ".part")
    logger.info(f"📥 Downloading weights for '{entry.name}' from {entry.weights_url}")

    try:
        with requests.get(entry.weights_url, stream=True, timeout=DOWNLOAD_TIMEOUT) as response:
            response.raise_for_status()
            with open(partial, "wb") as f:
                for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                    f.write(chunk)
    except requests.exceptions.RequestException as e:
        partial.unlink(missing_ok=True)
        raise BackendUnavailableError(f"Cannot download weights for '{entry.name}': {e}") from e

    partial.rename(target)
    logger.info(f"💾 Weights saved to {target}")
    return target
