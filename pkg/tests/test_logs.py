"""
Tests for console lines, run log records and log rotation.
"""

import datetime

import pytest

from s2wmamba import config, logs
from s2wmamba.cli import main


@pytest.fixture
def log_file(tmp_path, monkeypatch):
    path = tmp_path / "logs" / "s2w.log"
    monkeypatch.setattr(config, "LOG_FILE", str(path))
    logs.set_command(None)
    yield path
    logs.set_command(None)


class TestRecords:
    """Tests for the console and file line layouts."""

    def test_format_record(self):
        """Test the timestamp, padded level and command tag."""
        when = datetime.datetime(2026, 1, 2, 3, 4, 5)
        logs.set_command("train")
        try:
            assert logs.format_record("INFO", "step 1", when) == "2026-01-02 03:04:05 INFO    [train] step 1"
        finally:
            logs.set_command(None)
        assert logs.format_record("WARNING", "x", when) == "2026-01-02 03:04:05 WARNING x"

    def test_console_only(self, capsys):
        """Test that an empty S2W_LOG_FILE keeps output on the console."""
        logs.set_command(None)
        logs.warning("sam: skipped 1 zero-norm pixels")
        assert capsys.readouterr().out == "WARNING: sam: skipped 1 zero-norm pixels\n"

    def test_file_record(self, log_file, capsys):
        logs.info("DATA: loaded 3 triplets")
        assert capsys.readouterr().out == "INFO: DATA: loaded 3 triplets\n"
        assert log_file.read_text().rstrip().endswith("INFO    DATA: loaded 3 triplets")

    def test_cli_command_tag(self, log_file):
        """Test that CLI errors land in the run log tagged with the subcommand."""
        assert main(["info", "--ratio", "3"]) == 1
        last = log_file.read_text().splitlines()[-1]
        assert " ERROR   [info] invalid configuration" in last


class TestRotation:
    """Tests for size based rotation."""

    def test_keeps_limited_backups(self, log_file, monkeypatch, capsys):
        """Test that a tiny size limit rotates often but keeps two backups."""
        monkeypatch.setattr(config, "LOG_MAX_MB", 100 / (1024 * 1024))
        monkeypatch.setattr(config, "LOG_MAX_FILES", 2)
        for step in range(30):
            logs.info(f"step {step} of a long enough message")
        assert "INFO: LOG ROTATED" in capsys.readouterr().out
        assert [p.name for p in logs.backups(log_file)] == ["s2w.log.1", "s2w.log.2"]
        assert "step 29" in log_file.read_text()
        assert log_file.stat().st_size < 200

    def test_below_limit(self, tmp_path):
        path = tmp_path / "a.log"
        path.write_text("x\n")
        assert not logs.rotate(path, keep=2, max_mb=1.0)
        assert not logs.rotate(tmp_path / "absent.log", keep=2, max_mb=0.0)

    def test_shift_order(self, tmp_path):
        """Test that each backup moves up one slot and the oldest is dropped."""
        path = tmp_path / "a.log"
        for name, text in [("a.log", "new"), ("a.log.1", "mid"), ("a.log.2", "old")]:
            (tmp_path / name).write_text(text)
        assert logs.rotate(path, keep=2, max_mb=0.0)
        assert not path.exists()
        assert (tmp_path / "a.log.1").read_text() == "new"
        assert (tmp_path / "a.log.2").read_text() == "mid"
        assert not (tmp_path / "a.log.3").exists()
