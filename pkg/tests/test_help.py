"""Tests for kmtq help and version."""

from conftest import run_kmtq


class TestHelpBasic:
    """Test basic kmtq help behavior."""

    def test_help_no_args(self, tmp_path):
        """kmtq help shows main help."""
        result = run_kmtq("help", cwd=tmp_path)

        assert result.returncode == 0
        assert "usage:" in result.stdout.lower()
        assert "simulate" in result.stdout
        assert "ladder" in result.stdout
        assert "validate-bounds" in result.stdout

    def test_no_command(self, tmp_path):
        """Bare kmtq prints help and succeeds."""
        result = run_kmtq(cwd=tmp_path)

        assert result.returncode == 0
        assert "usage:" in result.stdout.lower()

    def test_help_specific_command(self, tmp_path):
        """kmtq help <command> shows command help."""
        result = run_kmtq("help", "ladder", cwd=tmp_path)

        assert result.returncode == 0
        assert "--kind" in result.stdout
        assert "--reps" in result.stdout

    def test_help_unknown_command(self, tmp_path):
        """kmtq help <unknown> shows error."""
        result = run_kmtq("help", "nonexistent", cwd=tmp_path)

        assert result.returncode == 1
        assert "Unknown command: nonexistent" in result.stderr


class TestVersion:
    def test_version(self, tmp_path):
        result = run_kmtq("--version", cwd=tmp_path)

        assert result.returncode == 0
        assert result.stdout.startswith("kmtq ")
