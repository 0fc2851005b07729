"""Tests for error helpers and report persistence."""
import pytest

from kmtq.storage import (
    DomainError,
    KmtqError,
    ParameterError,
    _format_cell,
    error,
    read_csv,
    warn,
    write_csv,
    write_text,
)


class TestErrors:
    def test_default_kind(self):
        """error() raises KmtqError by default."""
        with pytest.raises(KmtqError, match="boom"):
            error("boom")

    def test_subclass_kind(self):
        with pytest.raises(ParameterError):
            error("bad n", ParameterError)

    def test_domain_error_is_parameter_error(self):
        """Callers catching ParameterError also see domain errors."""
        assert issubclass(DomainError, ParameterError)
        assert issubclass(ParameterError, KmtqError)

    def test_warn_goes_to_stderr(self, capsys):
        warn("depth limit reached")

        captured = capsys.readouterr()
        assert captured.out == ""
        assert captured.err == "Warning: depth limit reached\n"


class TestWriteCsv:
    def test_roundtrip(self, tmp_path):
        """Header and rows come back as dicts."""
        path = write_csv(tmp_path / "sub" / "r.csv", ["n", "error"], [[8, 0.5], [16, 0.25]])

        rows = read_csv(path)

        assert rows == [{"n": "8", "error": "0.5"}, {"n": "16", "error": "0.25"}]

    def test_no_tmp_left_behind(self, tmp_path):
        """Writes go through a temporary file that is renamed into place."""
        write_csv(tmp_path / "r.csv", ["a"], [[1]])

        assert [p.name for p in tmp_path.iterdir()] == ["r.csv"]

    def test_overwrite(self, tmp_path):
        path = tmp_path / "r.csv"
        write_csv(path, ["a"], [[1]])

        write_csv(path, ["a"], [[2]])

        assert read_csv(path) == [{"a": "2"}]

    def test_write_text(self, tmp_path):
        path = write_text(tmp_path / "summary.txt", "Overall: PASS\n")

        assert path.read_text() == "Overall: PASS\n"
        assert not (tmp_path / "summary.txt.tmp").exists()


class TestReadCsv:
    def test_missing_file(self, tmp_path):
        with pytest.raises(KmtqError, match="File not found"):
            read_csv(tmp_path / "absent.csv")

    def test_header_only(self, tmp_path):
        (tmp_path / "r.csv").write_text("n,error\n")

        assert read_csv(tmp_path / "r.csv") == []


class TestFormatCell:
    def test_float_repr_is_exact(self):
        """Floats round-trip through their text form."""
        x = 0.1 + 0.2

        assert float(_format_cell(x)) == x

    def test_numpy_float(self):
        import numpy as np

        assert _format_cell(np.float64(0.5)) == "0.5"

    def test_bools_as_digits(self):
        assert _format_cell(True) == "1"
        assert _format_cell(False) == "0"

    def test_other_values(self):
        assert _format_cell(16) == "16"
        assert _format_cell("arrival") == "arrival"
