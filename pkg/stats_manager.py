#!/usr/bin/env python3
"""
Run Statistics Manager - إدارة إحصائيات التشغيل
Per-run timing and resource usage for the experiment manifest
"""

import json
import logging
import os
import time
from datetime import datetime
from typing import Any, Dict, List, Optional

import psutil


class RunStatsManager:
    """Collects wall time, epochs completed and a process snapshot per run"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.start_time = time.time()
        self.runs: List[Dict[str, Any]] = []
        self._current: Optional[Dict[str, Any]] = None
        self._process = psutil.Process(os.getpid())

    def start_run(self, run: int, seed: int):
        self._current = {
            'run': run,
            'seed': seed,
            'started': datetime.now().isoformat(timespec='seconds'),
            '_t0': time.perf_counter(),
        }

    def finish_run(self, epochs_completed: int, diverged: bool = False,
                   divergence_epoch: Optional[int] = None, reason: Optional[str] = None):
        if self._current is None:
            raise RuntimeError("finish_run() called without start_run()")
        record = self._current
        record['wall_seconds'] = round(time.perf_counter() - record.pop('_t0'), 3)
        record['epochs_completed'] = epochs_completed
        record['diverged'] = diverged
        if diverged:
            record['divergence_epoch'] = divergence_epoch
            record['divergence_reason'] = reason
        record.update(self.get_system_stats())
        self.runs.append(record)
        self._current = None
        status = f"diverged at epoch {divergence_epoch}" if diverged else f"{epochs_completed} epochs"
        self.logger.info(f"Run {record['run']} (seed {record['seed']}) finished: {status} "
                         f"in {record['wall_seconds']}s")

    def get_system_stats(self) -> Dict[str, Any]:
        """Process memory and CPU time; empty if psutil cannot read them"""
        try:
            memory = self._process.memory_info()
            cpu = self._process.cpu_times()
            return {
                'rss_mb': round(memory.rss / 1024 / 1024, 1),
                'cpu_user_seconds': round(cpu.user, 2),
                'cpu_system_seconds': round(cpu.system, 2),
            }
        except (psutil.Error, OSError) as e:
            self.logger.warning(f"Could not read process statistics: {e}")
            return {}

    @property
    def any_diverged(self) -> bool:
        return any(record['diverged'] for record in self.runs)

    def get_comprehensive_stats(self) -> Dict[str, Any]:
        return {
            'total_seconds': round(time.time() - self.start_time, 3),
            'cpu_count': psutil.cpu_count(logical=True),
            'runs': self.runs,
        }

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.get_comprehensive_stats(), f, ensure_ascii=False, indent=2)
