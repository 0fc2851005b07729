"""Error types, diagnostics and report persistence for kmtq."""
import csv
import sys
from collections.abc import Iterable, Sequence
from pathlib import Path


class ValidationError(Exception):
    """Raised when configuration validation fails."""
    pass


class KmtqError(Exception):
    """Raised by error() for user-facing errors."""
    pass


class ParameterError(KmtqError):
    """Invalid argument to an operation."""
    pass


class DomainError(ParameterError):
    """Query outside a path's time domain."""
    pass


class ResourceError(KmtqError):
    """Requested construction exceeds the memory budget."""
    pass


class UnsupportedFamilyError(KmtqError):
    """Distribution family not supported by the requested operation."""
    pass


class InvariantError(KmtqError):
    """An internal invariant was violated at runtime."""
    pass


def error(message: str, kind: type[KmtqError] = KmtqError) -> None:
    """Raise a KmtqError (or the given subclass) with the given message."""
    raise kind(message)


def warn(message: str) -> None:
    """Print warning message to stderr (does not exit)."""
    print(f"Warning: {message}", file=sys.stderr)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a CSV file atomically.

    Rows are written in the order given; callers sort them first so reruns
    produce identical files.
    """
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format_cell(v) for v in row])
        tmp.rename(path)  # Atomic on POSIX
    except OSError as e:
        error(f"Cannot write {path}: {e}")
    return path


def write_text(path: Path, text: str) -> Path:
    """Write a text file atomically (tmp + rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(text)
        tmp.rename(path)
    except OSError as e:
        error(f"Cannot write {path}: {e}")
    return path


def read_csv(path: Path) -> list[dict]:
    """Load CSV rows as dicts. Missing file is a user-facing error."""
    path = Path(path)
    if not path.exists():
        error(f"File not found: {path}")
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except (OSError, csv.Error) as e:
        error(f"Cannot read {path}: {e}")


def _format_cell(value) -> str:
    """Floats use repr so values round-trip exactly."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)
