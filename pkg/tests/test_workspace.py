"""Tests for output directory resolution."""

from pathlib import Path

import pytest

from panoattn import workspace


@pytest.fixture(autouse=True)
def reset_workspace():
    yield
    workspace._workspace_root = None


class TestWorkspace:
    def test_cli_flag(self, tmp_path):
        root = workspace.init({}, cli_out=str(tmp_path / "run"))
        assert root == (tmp_path / "run").resolve()
        assert root.is_dir()
        assert workspace.path("manifest.json") == root / "manifest.json"

    def test_env_beats_flag(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PANOATTN_OUT", str(tmp_path / "env"))
        root = workspace.init({}, cli_out=str(tmp_path / "flag"))
        assert root.name == "env"

    def test_config_dir(self, tmp_path):
        root = workspace.init({"output": {"dir": str(tmp_path / "cfg")}})
        assert root.name == "cfg"

    def test_defaults_to_cwd(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert workspace.init({"output": {"dir": None}}) == tmp_path.resolve()

    def test_uninitialised_root(self):
        workspace._workspace_root = None
        assert workspace.root() == Path.cwd()
