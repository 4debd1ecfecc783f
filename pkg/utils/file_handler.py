import csv
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from config import settings
from utils.logger import setup_logger

logger = setup_logger(__name__)


def _json_default(value: Any) -> Any:
    """Convert numpy scalars and arrays for json.dump."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def read_text_file(file_path: Path) -> str:
    """Read text content from a file."""
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            content = f.read()
        logger.info(f"Successfully read text from {file_path}")
        return content
    except Exception as e:
        logger.error(f"Error reading text file {file_path}: {e}")
        return ""


def write_json_file(file_path: Path, data: Dict[str, Any]) -> bool:
    """Write JSON data to a file."""
    try:
        with open(file_path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, ensure_ascii=False, default=_json_default)
        logger.info(f"Successfully wrote JSON to {file_path}")
        return True
    except Exception as e:
        logger.error(f"Error writing JSON file {file_path}: {e}")
        return False


def read_json_file(file_path: Path) -> Dict[str, Any]:
    """Read JSON data from a file."""
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        logger.info(f"Successfully read JSON from {file_path}")
        return data
    except Exception as e:
        logger.error(f"Error reading JSON file {file_path}: {e}")
        return {}


def write_csv_file(file_path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]],
                   preamble: Optional[List[str]] = None) -> bool:
    """
    Write tabular data as CSV.

    Args:
        file_path: Destination path
        header: Column names
        rows: Row sequences, numbers are written with repr precision
        preamble: Optional comment lines written first, each prefixed with '#'

    Returns:
        True if successful, False otherwise
    """
    try:
        with open(file_path, 'w', encoding='utf-8', newline='') as f:
            for line in preamble or []:
                f.write(f"# {line}\n")
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        logger.info(f"Successfully wrote CSV to {file_path}")
        return True
    except Exception as e:
        logger.error(f"Error writing CSV file {file_path}: {e}")
        return False


def read_csv_file(file_path: Path) -> List[Dict[str, str]]:
    """Read a CSV file written by write_csv_file, skipping '#' comment lines."""
    try:
        with open(file_path, 'r', encoding='utf-8', newline='') as f:
            lines = [line for line in f if not line.startswith('#')]
        rows = list(csv.DictReader(lines))
        logger.info(f"Successfully read CSV from {file_path}")
        return rows
    except Exception as e:
        logger.error(f"Error reading CSV file {file_path}: {e}")
        return []


def file_exists(file_path: Path) -> bool:
    """Check if a file exists."""
    return file_path.exists() and file_path.is_file()


def get_output_file(filename: str) -> Path:
    """Get the path for an output file in the current run directory"""
    if settings.CURRENT_RUN_DIR is None:
        create_run_directory()
    return settings.CURRENT_RUN_DIR / filename


def set_run_directory(run_dir: Path) -> Path:
    """Use an explicit directory (e.g. from --out) as the current run directory"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    settings.CURRENT_RUN_DIR = run_dir
    return run_dir


def create_run_directory() -> Path:
    """Create a new timestamped run directory"""
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    settings.CURRENT_RUN_TIMESTAMP = timestamp
    run_dir = settings.BASE_OUTPUTS_DIR / f"run_{timestamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    settings.CURRENT_RUN_DIR = run_dir
    return run_dir
