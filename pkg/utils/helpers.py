import glob
import hashlib
import json
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from utils.log import log

# extension -> parser format
CASE_FORMATS = {".m": "mcase", ".json": "native-json"}

# files a run writes into its output directory
ARTIFACT_PATTERNS = ("*.json", "*.csv")

def clear_artifacts(directory: str, patterns: Sequence[str] = ARTIFACT_PATTERNS) -> List[str]:
    """
    Delete the run artifacts (solution, report, manifest and table files)
    left in an output directory by earlier runs. Other files stay.

    Args:
        directory: Output directory
        patterns: Glob patterns of the files to remove

    Returns:
        Paths that were removed
    """
    removed = []
    for pattern in patterns:
        for path in sorted(glob.glob(os.path.join(directory, pattern))):
            try:
                os.unlink(path)
                removed.append(path)
            except OSError as e:
                log(f"Could not remove artifact {path}: {e}", "warning")
    if removed:
        log(f"Cleared {len(removed)} artifacts from {directory}", "debug")
    return removed

def format_response(status: str, message: str, data: Optional[Dict] = None) -> Dict:
    """
    Console result object printed by every command. Keys of data holding
    None are left out.

    Args:
        status: SUCCESS, WARNING or ERROR
        message: Human-readable message
        data: Optional payload

    Returns:
        Response dictionary
    """
    response = {"status": status, "message": message}
    if data is not None:
        response["data"] = {k: v for k, v in data.items() if v is not None}
    return response

def case_format(path: str) -> Optional[str]:
    """Parser format implied by a case file's extension, None when unknown"""
    return CASE_FORMATS.get(os.path.splitext(path.lower())[1]) if path else None

def script_arg(args: Sequence[Optional[str]], position: int, target_type: type, default: Any = None):
    """
    Positional script argument converted to target_type; a missing or
    unparsable value gives default
    """
    value = args[position] if position < len(args) else None
    if value is None:
        return default
    try:
        return target_type(value)
    except (ValueError, TypeError):
        log(f"Argument {position + 1} ({value!r}) is not a valid {target_type.__name__}; using {default}",
            "warning")
        return default

def _to_builtin(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")

def stable_json_dumps(data: Any) -> str:
    """
    Dump data as JSON with sorted keys and fixed separators so equal data
    always gives identical bytes

    Args:
        data: JSON-compatible data (numpy arrays and scalars allowed)

    Returns:
        JSON text
    """
    return json.dumps(data, sort_keys=True, indent=2, default=_to_builtin)

def config_hash(data: Dict) -> str:
    """
    SHA-256 of the canonical JSON of a configuration dictionary

    Args:
        data: Configuration dictionary

    Returns:
        Hex digest
    """
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=_to_builtin)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

def write_json(path: str, data: Any):
    """Write data to path as stable JSON, creating parent directories"""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(stable_json_dumps(data))
        handle.write("\n")
