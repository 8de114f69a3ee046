#!/usr/bin/env python3
"""
Tests for console levels and the ndjson event log
"""

import json
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from services.logging_service import EVENTS_FILE, LoggingService, get_logging_service, reset_logging_service


def test_levels_gate_console(capsys):
    logger = LoggingService('error')
    logger.info('hidden')
    logger.warning('hidden too')
    logger.error('shown')
    err = capsys.readouterr().err
    assert err == 'ERROR: shown\n'

    logger = LoggingService('info')
    logger.warning('careful')
    logger.debug('noise')
    assert capsys.readouterr().err == 'WARNING: careful\n'


def test_unknown_level_falls_back_to_info(capsys, monkeypatch):
    monkeypatch.setenv('MILC_LOG', 'chatty')
    logger = LoggingService()
    assert logger.level == 'info'
    assert "Unknown MILC_LOG level 'chatty'" in capsys.readouterr().err


def test_events_round_trip(tmp_path):
    logger = LoggingService('error')
    logger.set_events_path(tmp_path)
    logger.log_event('certainty/seed-0', 'run_started', {'epochs': 3})
    logger.log_event('certainty/seed-0', 'validation', {'epoch': 1, 'val_auc': 0.5})
    logger.log_event('max/seed-1', 'run_started', {'epochs': 3})

    lines = (tmp_path / EVENTS_FILE).read_text().splitlines()
    assert len(lines) == 3
    first = json.loads(lines[0])
    assert first['timestamp'].endswith('+00:00')
    assert first['severity'] == 'info'

    result = logger.get_logs(run_id='certainty/seed-0')
    assert result['success']
    assert [entry['event_type'] for entry in result['logs']] == ['validation', 'run_started']
    assert logger.get_logs(event_type='run_started', limit=1)['logs'][0]['run_id'] == 'max/seed-1'


def test_get_logs_skips_malformed_lines(tmp_path):
    logger = LoggingService('error')
    logger.set_events_path(tmp_path / 'run' / 'events.ndjson')
    logger.log_event('mean/seed-0', 'run_finished', {})
    with open(tmp_path / 'run' / 'events.ndjson', 'a') as f:
        f.write('{broken\n')
    assert logger.get_logs()['count'] == 1


def test_events_disabled_without_path(tmp_path):
    logger = LoggingService('error')
    logger.log_event('mean/seed-0', 'run_started', {})
    assert logger.get_logs() == {'success': True, 'logs': [], 'count': 0, 'message': 'No events logged'}


def test_failures_echo_to_console(capsys):
    logger = LoggingService('info')
    logger.log_event('attention/seed-2', 'run_failed', {'epoch': 4}, severity='error')
    assert 'ERROR: [attention/seed-2] run_failed' in capsys.readouterr().err


def test_singleton():
    reset_logging_service()
    assert get_logging_service() is get_logging_service()
    reset_logging_service()
