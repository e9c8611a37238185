import os
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

DMPC_THREADS = int(os.getenv("DMPC_THREADS", "1"))
DMPC_LOG_LEVEL = os.getenv("DMPC_LOG_LEVEL", "INFO").upper()
DMPC_PRESET_DIR = os.getenv("DMPC_PRESET_DIR")


def get_thread_count() -> int:
    """Worker count for the per-timestep solve fan-out (at least 1)."""
    return max(1, int(os.getenv("DMPC_THREADS", str(DMPC_THREADS))))


def get_log_level() -> str:
    return os.getenv("DMPC_LOG_LEVEL", DMPC_LOG_LEVEL).upper()


PRESET_DIR = Path(__file__).parent / "presets"


def preset_dirs() -> List[Path]:
    """Embedded presets first, then DMPC_PRESET_DIR if set."""
    dirs = [PRESET_DIR]
    extra = os.getenv("DMPC_PRESET_DIR", DMPC_PRESET_DIR or "")
    if extra:
        dirs.append(Path(extra))
    return dirs


def find_preset(name: str) -> Optional[Path]:
    for directory in preset_dirs():
        candidate = directory / f"{name}.json"
        if candidate.is_file():
            return candidate
    return None


def list_presets() -> List[str]:
    names = set()
    for directory in preset_dirs():
        if directory.is_dir():
            names.update(p.stem for p in directory.glob("*.json"))
    return sorted(names)
