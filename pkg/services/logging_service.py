"""
Run Logging Service
Severity-gated console messages plus an append-only ndjson event log per
output directory
"""

import os
import sys
import json
from datetime import datetime
from pathlib import Path
from typing import Dict, Any, List, Optional, Union
import threading
import pytz


LOG_LEVELS = {'error': 0, 'info': 1, 'debug': 2}
SEVERITY_LEVELS = {'error': 0, 'warning': 1, 'info': 1, 'debug': 2}
EVENTS_FILE = 'events.ndjson'


class LoggingService:
    """Service for console messages and structured run events"""

    def __init__(self, level: Optional[str] = None):
        """Initialize logging from MILC_LOG unless a level is given"""
        requested = (level or os.getenv('MILC_LOG', 'info')).strip().lower()
        self.events_path: Optional[Path] = None
        self.lock = threading.Lock()  # seed workers share one service

        if requested in LOG_LEVELS:
            self.level = requested
        else:
            self.level = 'info'
            self.warning(f"Unknown MILC_LOG level '{requested}', using 'info'")

    def enabled_for(self, severity: str) -> bool:
        return SEVERITY_LEVELS.get(severity, 1) <= LOG_LEVELS[self.level]

    def _print(self, severity: str, message: str):
        if self.enabled_for(severity):
            print(f"{severity.upper()}: {message}", file=sys.stderr, flush=True)

    def error(self, message: str):
        self._print('error', message)

    def warning(self, message: str):
        self._print('warning', message)

    def info(self, message: str):
        self._print('info', message)

    def debug(self, message: str):
        self._print('debug', message)

    def set_events_path(self, path: Optional[Union[str, Path]]):
        """
        Point the event log at a file (or a directory holding events.ndjson)

        Args:
            path: Target file or directory; None disables event writes
        """
        with self.lock:
            if path is None:
                self.events_path = None
                return
            path = Path(path)
            if path.is_dir():
                path = path / EVENTS_FILE
            path.parent.mkdir(parents=True, exist_ok=True)
            self.events_path = path

    def log_event(
        self,
        run_id: str,
        event_type: str,
        data: Dict[str, Any],
        severity: str = 'info'
    ):
        """
        Append one event to the event log and echo it at debug level

        Args:
            run_id: Run identifier, e.g. "certainty/seed-3"
            event_type: run_started, validation, run_failed, run_finished, sweep_finished
            data: JSON-serializable event payload
            severity: info, warning or error
        """
        log_entry = {
            'timestamp': datetime.now(pytz.UTC).isoformat(),
            'run_id': run_id,
            'event_type': event_type,
            'severity': severity,
            'data': data
        }

        if severity in ('error', 'warning'):
            self._print(severity, f"[{run_id}] {event_type}: {data}")
        else:
            self.debug(f"[{run_id}] {event_type}: {data}")

        with self.lock:
            if self.events_path is None:
                return
            try:
                with open(self.events_path, 'a', encoding='utf-8') as f:
                    f.write(json.dumps(log_entry, sort_keys=True) + '\n')
            except OSError as e:
                print(f"WARNING: could not write event log {self.events_path}: {e}", file=sys.stderr)

    def get_logs(
        self,
        run_id: str = None,
        event_type: str = None,
        limit: int = 100
    ) -> Dict[str, Any]:
        """
        Read events back, most recent first

        Args:
            run_id: Optional run filter
            event_type: Optional event type filter
            limit: Maximum number of entries to return

        Returns:
            Dict with logs and metadata
        """
        if self.events_path is None or not self.events_path.exists():
            return {'success': True, 'logs': [], 'count': 0, 'message': 'No events logged'}

        try:
            with self.lock:
                lines = self.events_path.read_text(encoding='utf-8').splitlines()
        except OSError as e:
            return {'success': False, 'error': str(e), 'logs': []}

        logs: List[Dict[str, Any]] = []
        for line in reversed(lines):
            if not line.strip():
                continue
            try:
                log_entry = json.loads(line)
            except json.JSONDecodeError:
                continue

            if run_id and log_entry.get('run_id') != run_id:
                continue
            if event_type and log_entry.get('event_type') != event_type:
                continue

            logs.append(log_entry)
            if len(logs) >= limit:
                break

        return {'success': True, 'logs': logs, 'count': len(logs)}


# Singleton instance
_logging_service = None


def get_logging_service() -> LoggingService:
    """Get or create LoggingService singleton"""
    global _logging_service
    if _logging_service is None:
        _logging_service = LoggingService()
    return _logging_service


def reset_logging_service():
    """Drop the singleton so the next call re-reads MILC_LOG"""
    global _logging_service
    _logging_service = None
