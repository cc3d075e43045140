import logging
import time
from typing import Dict, Optional

logger = logging.getLogger(__name__)


class ProgressTracker:
    """Step counter for long loops: throughput, ETA and the latest loss."""

    def __init__(self, log_every: int = 10):
        self.log_every = max(1, log_every)
        self.active_runs: Dict[str, Dict] = {}

    def start_run(self, run_id: str, total_steps: int, start_step: int = 0) -> None:
        """Start tracking a new run"""
        now = time.monotonic()
        self.active_runs[run_id] = {
            'total_steps': total_steps,
            'start_step': start_step,
            'completed_steps': start_step,
            'current_stage': 'initializing',
            'progress_percentage': 100.0 * start_step / max(1, total_steps),
            'start_time': now,
            'last_update': now,
            'status': 'running',
            'last_loss': None,
            'last_lr': None,
        }
        logger.info(f"Started {run_id}: {total_steps} steps (from step {start_step})")

    def update_progress(self, run_id: str, step: int, loss: Optional[float] = None,
                        lr: Optional[float] = None, stage: str = 'training') -> None:
        """Record that `step` finished; logs every `log_every` steps and on the last one"""
        if run_id not in self.active_runs:
            return
        progress = self.active_runs[run_id]
        progress['completed_steps'] = step + 1
        progress['current_stage'] = stage
        progress['progress_percentage'] = 100.0 * (step + 1) / max(1, progress['total_steps'])
        progress['last_update'] = time.monotonic()
        progress['last_loss'] = loss
        progress['last_lr'] = lr

        if (step + 1) % self.log_every == 0 or step + 1 == progress['total_steps']:
            rate = self.steps_per_second(run_id)
            remaining = progress['total_steps'] - progress['completed_steps']
            eta = remaining / rate if rate > 0 else float('nan')
            loss_text = f" loss={loss:.6f}" if loss is not None else ""
            lr_text = f" lr={lr:.3e}" if lr is not None else ""
            logger.info(
                f"{run_id} step {step + 1}/{progress['total_steps']}{loss_text}{lr_text} "
                f"({rate:.2f} steps/s, ETA {eta:.0f}s)"
            )

    def steps_per_second(self, run_id: str) -> float:
        progress = self.active_runs.get(run_id)
        if not progress:
            return 0.0
        elapsed = progress['last_update'] - progress['start_time']
        done = progress['completed_steps'] - progress['start_step']
        return done / elapsed if elapsed > 0 else 0.0

    def complete_run(self, run_id: str, success: bool = True) -> Optional[Dict]:
        """Log the outcome and stop tracking the run; returns its final record"""
        progress = self.active_runs.pop(run_id, None)
        if progress is None:
            return None
        progress['status'] = 'completed' if success else 'failed'
        progress['duration_seconds'] = time.monotonic() - progress['start_time']
        logger.info(f"{run_id} {'completed' if success else 'failed'} in {progress['duration_seconds']:.1f}s")
        return progress
