"""
Console and run log output

Every line goes to stdout as ``LEVEL: message``. When S2W_LOG_FILE is set the
same line is appended to the run log with a timestamp and the active command,
and the log is rotated into numbered backups once it passes S2W_LOG_MAX_MB.
"""

import datetime
from pathlib import Path
from typing import List, Optional

from . import config

_command: Optional[str] = None


def set_command(command: Optional[str]) -> None:
    """Tag the following run log lines with a CLI subcommand"""
    global _command
    _command = command


def backups(log_file: Path) -> List[Path]:
    """Numbered backups of a run log, newest first"""
    found = [p for p in log_file.parent.glob(f"{log_file.name}.*") if p.suffix[1:].isdigit()]
    return sorted(found, key=lambda p: int(p.suffix[1:]))


def rotate(log_file: Path, keep: int, max_mb: float) -> bool:
    """Shift log -> log.1 -> log.2 ... once the log reaches max_mb; at most keep backups survive"""
    if not log_file.exists() or log_file.stat().st_size < max_mb * 1024 * 1024:
        return False
    for backup in reversed(backups(log_file)):
        index = int(backup.suffix[1:])
        if index >= keep:
            backup.unlink()
        else:
            backup.rename(log_file.with_name(f"{log_file.name}.{index + 1}"))
    if keep > 0:
        log_file.rename(log_file.with_name(f"{log_file.name}.1"))
    else:
        log_file.unlink()
    return True


def format_record(level: str, message: str, when: Optional[datetime.datetime] = None) -> str:
    stamp = (when or datetime.datetime.now()).strftime("%Y-%m-%d %H:%M:%S")
    tag = f" [{_command}]" if _command else ""
    return f"{stamp} {level:<7}{tag} {message}"


def _emit(level: str, message: str):
    print(f"{level}: {message}")
    if not config.LOG_FILE:
        return
    log_file = Path(config.LOG_FILE)
    if rotate(log_file, config.LOG_MAX_FILES, config.LOG_MAX_MB):
        print(f"INFO: LOG ROTATED: {log_file}")
    log_file.parent.mkdir(parents=True, exist_ok=True)
    with open(log_file, mode="a", encoding="UTF-8") as f:
        print(format_record(level, message), file=f)


def info(message: str):
    _emit("INFO", message)


def warning(message: str):
    _emit("WARNING", message)


def error(message: str):
    _emit("ERROR", message)
