"""
Έλεγχος αν όλα είναι έτοιμα για το patchbench.

Τρέξε το με: python -m patchbench check
"""

import importlib
import sys
from pathlib import Path
from typing import Optional, Union

import torch
from sqlalchemy import text

from .database import get_engine
from .detector_service import build_adapter, is_toy_entry, load_registry
from .errors import PatchBenchError
from .settings import get_settings

REQUIRED_PACKAGES = [
    "torch",
    "torchvision",
    "kornia",
    "numpy",
    "pydantic",
    "sqlalchemy",
    "sklearn",
    "pandas",
    "matplotlib",
    "PIL",
    "dotenv",
    "requests",
]

# Χρειάζονται μόνο για τους πραγματικούς detectors
OPTIONAL_PACKAGES = ["ultralytics"]


def check_python_version() -> bool:
    print("🐍 Checking Python version...")
    version = sys.version_info
    if version >= (3, 11):
        print(f"✅ Python {version.major}.{version.minor} - OK")
        return True
    print(f"❌ Python {version.major}.{version.minor} - Need 3.11+ (tomllib)")
    return False


def check_dependencies() -> bool:
    print("\n📦 Checking dependencies...")
    missing = []
    for package in REQUIRED_PACKAGES:
        try:
            importlib.import_module(package)
            print(f"✅ {package} - installed")
        except ImportError:
            print(f"❌ {package} - NOT installed")
            missing.append(package)
    for package in OPTIONAL_PACKAGES:
        try:
            importlib.import_module(package)
            print(f"✅ {package} - installed (optional)")
        except ImportError:
            print(f"⚠️  {package} - not installed (only needed for real detectors)")

    if missing:
        print(f"\n⚠️  Missing packages: {', '.join(missing)}")
        print("Run: pip install -r requirements.txt")
        return False
    return True


def check_cache_dir() -> bool:
    print("\n💾 Checking weights cache...")
    cache = get_settings().cache_dir
    try:
        cache.mkdir(parents=True, exist_ok=True)
        marker = cache / ".write-test"
        marker.write_text("ok", encoding="utf-8")
        marker.unlink()
    except OSError as e:
        print(f"❌ {cache} is not writable: {e}")
        print("   Set PATCHBENCH_CACHE to a writable directory")
        return False
    print(f"✅ {cache}")
    return True


def check_database() -> bool:
    print("\n🗄️  Checking run history database...")
    url = get_settings().database_url
    try:
        with get_engine(url).connect() as connection:
            connection.execute(text("SELECT 1"))
    except Exception as e:
        print(f"❌ {url}: {e}")
        return False
    print(f"✅ {url}")
    return True


def check_registry(registry: Optional[Union[str, Path]] = None) -> bool:
    """Φορτώνει το registry και τρέχει τους toy detectors σε μια κενή εικόνα."""
    print("\n🔍 Checking adapter registry...")
    try:
        loaded = load_registry(registry)
    except (PatchBenchError, FileNotFoundError) as e:
        print(f"❌ {e}")
        return False
    print(f"✅ {len(loaded)} adapters in {loaded.source}")

    ok = True
    for name, entry in sorted(loaded.entries.items()):
        if not is_toy_entry(entry):
            print(f"   {name}: {entry.backend} (not loaded here)")
            continue
        try:
            adapter = build_adapter(entry)
            blank = torch.zeros(3, *adapter.input_size)
            adapter.detect(blank)
            print(f"✅ {name} runs")
        except PatchBenchError as e:
            print(f"❌ {name}: {e}")
            ok = False
    return ok


def run_checks(registry: Optional[Union[str, Path]] = None) -> bool:
    print("🔍 patchbench Setup Checker")
    print("=" * 50)

    all_ok = True
    all_ok &= check_python_version()
    all_ok &= check_dependencies()
    all_ok &= check_cache_dir()
    all_ok &= check_database()
    all_ok &= check_registry(registry)

    print("\n" + "=" * 50)
    if all_ok:
        print("✅ Everything is ready! Try:")
        print("   python -m patchbench train --adapter toy-red --data configs/synth.json --count 2 --out runs/a")
    else:
        print("❌ Some issues need to be fixed first")
    return all_ok
