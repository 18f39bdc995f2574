# app/utils/traces.py
import json
import os
from datetime import datetime, timezone
from typing import Any, Dict

UTC = timezone.utc

TRACE_NAME = "biopt_traces.jsonl"


def trace_path() -> str:
    return os.path.join(os.getenv("LOG_DIR", "logs"), TRACE_NAME)


def log_trace(entry: Dict[str, Any]) -> None:
    """
    Append one run record (one JSON object per line) to $LOG_DIR/biopt_traces.jsonl.
    """
    try:
        path = trace_path()
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        record = {"ts": datetime.now(UTC).isoformat(timespec="seconds"), **entry}
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")
    except Exception:
        # tracing must not crash a command
        pass
