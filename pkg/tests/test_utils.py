import pytest

from fibo.hardware import detect_hardware, resolve_workers
from fibo.utils import atomic_write_text, find_files_recursive, resolve_path, sha256_bytes, sha256_file


def test_atomic_write_replaces_content(tmp_path):
    path = tmp_path / "nested" / "file.txt"
    atomic_write_text(path, "first")
    atomic_write_text(path, "second")
    assert path.read_text() == "second"
    assert [p.name for p in path.parent.iterdir()] == ["file.txt"]


def test_digests_agree(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"fibo" * 1000)
    assert sha256_file(path) == sha256_bytes(b"fibo" * 1000)


def test_find_files_recursive(tmp_path):
    for name in ("a/one.fibm", "a/b/two.fibm", "c/three.fibc"):
        target = tmp_path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(b"")
    found = find_files_recursive(tmp_path, "*.fibm")
    assert [p.name for p in found] == ["two.fibm", "one.fibm"]
    assert len(find_files_recursive(tmp_path, "*.fibm", max_results=1)) == 1


def test_resolve_path_uses_data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FIBO_DATA_DIR", str(tmp_path))
    assert resolve_path("runs/a.fibm") == tmp_path / "runs" / "a.fibm"
    assert resolve_path("/abs/x.fibm").is_absolute()


def test_worker_resolution(monkeypatch):
    assert resolve_workers(3) == 3
    with pytest.raises(ValueError):
        resolve_workers(0)
    monkeypatch.setenv("FIBO_WORKERS", "2")
    assert resolve_workers() == 2
    monkeypatch.delenv("FIBO_WORKERS")
    info = detect_hardware()
    assert resolve_workers() == info.workers_default
    assert 1 <= info.workers_default <= info.cpu_count_logical
    assert info.ram_total_gb > 0
