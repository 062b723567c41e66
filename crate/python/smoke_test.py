"""Smoke test for the stagespace_py extension.

Build the extension first:

    cargo build -p stagespace-py --features extension-module

then run `python3 python/smoke_test.py` (or `pytest python/`). The shared
library is looked up in target/debug and target/release, or taken from
STAGESPACE_PY_LIB.
"""

import importlib
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def _load():
    candidates = []
    if os.environ.get("STAGESPACE_PY_LIB"):
        candidates.append(Path(os.environ["STAGESPACE_PY_LIB"]))
    for profile in ("debug", "release"):
        candidates.append(ROOT / "target" / profile / "libstagespace_py.so")
    lib = next((p for p in candidates if p.is_file()), None)
    if lib is None:
        raise RuntimeError(f"extension not built; looked in {[str(c) for c in candidates]}")
    mod_dir = Path(tempfile.mkdtemp(prefix="stagespace_py_"))
    shutil.copy(lib, mod_dir / "stagespace_py.so")
    sys.path.insert(0, str(mod_dir))
    return importlib.import_module("stagespace_py")


sp = _load()


def test_geometry():
    a = sp.NDBox([0, 0], [4, 4])
    b = sp.NDBox([2, 2], [6, 6])
    assert a.volume() == 16
    assert a.intersect(b) == sp.NDBox([2, 2], [4, 4])
    assert a.intersect(sp.NDBox([5, 5], [6, 6])) is None
    parts = sp.decompose_grid(sp.NDBox.from_extents([8, 8]), [2, 4])
    assert len(parts) == 8
    assert sp.covers(sp.NDBox.from_extents([8, 8]), parts)
    assert not sp.covers(sp.NDBox.from_extents([8, 8]), parts[1:])
    assert sum(p.volume() for p in a.subtract(b)) == 12
    try:
        sp.NDBox([3], [3])
    except ValueError:
        pass
    else:
        raise AssertionError("empty box accepted")


def test_put_get_roundtrip():
    with sp.Cluster([64, 32], [16, 16], 2) as cluster:
        g = cluster.global_box
        s = cluster.session()
        rows = sp.decompose_grid(g, [4, 1])
        for r in rows:
            s.put("temp", 3, r, sp.seeded_pattern("temp", 3, g, r))
        cols = sp.decompose_grid(g, [1, 2])
        for c in cols:
            got = s.get("temp", 3, c, timeout_ms=1000)
            assert got == sp.seeded_pattern("temp", 3, g, c)
        try:
            s.get("temp", 4, g, timeout_ms=50)
        except TimeoutError:
            pass
        else:
            raise AssertionError("missing version did not time out")
        assert cluster.quiesce()
        stats = cluster.stat()
        assert [st["server_id"] for st in stats] == [0, 1]
        assert sum(st["write_bytes"] for st in stats) == g.volume() * 8


def test_devbench():
    row = sp.run_devbench("delayed:1000:0:heap", pattern="rand", runtime_s=0.3, size=1 << 20)
    assert 0 < row["iops"] <= 1000
    assert row["bytes_moved"] == row["ops"] * row["bs"]


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name} ok")
