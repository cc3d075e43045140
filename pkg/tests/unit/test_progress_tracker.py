"""
Unit tests for the step progress tracker.
"""
import logging

from services.progress_tracker import ProgressTracker


class TestProgressTracker:
    """Test run bookkeeping and progress logging."""

    def test_update_records_latest_step(self):
        """Test counters and the latest loss of a running run."""
        tracker = ProgressTracker(log_every=5)
        tracker.start_run("pretrain", total_steps=10)
        tracker.update_progress("pretrain", 3, loss=0.5, lr=1e-3)
        progress = tracker.active_runs["pretrain"]
        assert progress['completed_steps'] == 4
        assert progress['progress_percentage'] == 40.0
        assert progress['last_loss'] == 0.5

    def test_complete_drops_finished_run(self):
        """Test that completed and failed runs leave the active table."""
        tracker = ProgressTracker()
        tracker.start_run("a", total_steps=2)
        tracker.start_run("b", total_steps=2)
        final = tracker.complete_run("a")
        assert final['status'] == 'completed' and final['duration_seconds'] >= 0.0
        assert tracker.complete_run("b", success=False)['status'] == 'failed'
        assert tracker.active_runs == {}

    def test_unknown_run_is_ignored(self):
        """Test updates and completion of a run that was never started."""
        tracker = ProgressTracker()
        tracker.update_progress("missing", 0, loss=1.0)
        assert tracker.complete_run("missing") is None
        assert tracker.steps_per_second("missing") == 0.0

    def test_logs_every_n_steps_and_last(self, caplog):
        """Test the progress log cadence."""
        tracker = ProgressTracker(log_every=4)
        tracker.start_run("finetune", total_steps=6)
        with caplog.at_level(logging.INFO, logger="services.progress_tracker"):
            for step in range(6):
                tracker.update_progress("finetune", step, loss=1.0)
        lines = [r.getMessage() for r in caplog.records if r.getMessage().startswith("finetune step")]
        assert [line.split()[2] for line in lines] == ["4/6", "6/6"]
