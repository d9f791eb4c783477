"""Smoke test for the robometa_py extension module.

Build the module first:

    cargo build --release -p robometa-python --features extension-module

The script looks for the compiled library under target/release (or the path in
ROBOMETA_PY_LIB), exposes it as robometa_py in a temporary directory and
exercises datasets, training, evaluation, simulation and metrics.
"""

import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library():
    env = os.environ.get("ROBOMETA_PY_LIB")
    if env:
        return Path(env)
    for profile in ("release", "debug"):
        for name in ("librobometa_py.so", "librobometa_py.dylib", "robometa_py.dll"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("robometa_py library not found; build it with cargo first")


def main():
    tmp = Path(tempfile.mkdtemp(prefix="robometa_py_"))
    try:
        suffix = ".pyd" if sys.platform == "win32" else ".so"
        shutil.copy(find_library(), tmp / f"robometa_py{suffix}")
        sys.path.insert(0, str(tmp))
        import robometa_py as rm

        m = rm.metrics([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
        assert m["r2"] == 0.5
        assert abs(m["rmse"] - math.sqrt(1 / 3)) < 1e-15
        assert abs(m["nrmse"] - math.sqrt(0.5)) < 1e-15
        assert abs(m["fi"] - 29.29) < 5e-3 and m["band"] == "<30"
        assert rm.metrics([2.0, 2.0, 2.0], [2.0, 2.1, 1.9])["r2"] is None

        ds = rm.generate(robots=16, steps=60, family="multisin", seed=1)
        assert len(ds) > 0 and ds.n_steps == 60 and ds.n_u == 3 and ds.n_y == 7
        again = rm.generate(robots=16, steps=60, family="multisin", seed=1)
        assert ds.fingerprint() == again.fingerprint()
        path = tmp / "ds.rmds"
        ds.save(str(path))
        loaded = rm.Dataset.load(str(path))
        assert loaded.robot_indices == ds.robot_indices
        u, y = loaded.trajectory(0)
        assert len(u) == 60 and len(u[0]) == 3 and len(y[0]) == 7

        ckpt, losses = rm.train_model(ds, steps=5, batch=4, layers=1, d_model=16, heads=2, d_ff=32, warmup=1)
        assert len(losses) == 5 and all(math.isfinite(v) for v in losses)
        assert ckpt.step == 5 and ckpt.train_context == 12
        assert ckpt.config()["d_model"] == 16
        ck_path = tmp / "model.rmck"
        ckpt.save(str(ck_path))
        assert rm.Checkpoint.load(str(ck_path)).fingerprint() == ckpt.fingerprint()

        pred = ckpt.simulate(u[:12], y[:12], u[12:])
        assert len(pred) == 48 and len(pred[0]) == 7
        try:
            ckpt.simulate(u[:20], y[:20], u[20:])
        except ValueError as e:
            assert "training context" in str(e)
        else:
            raise AssertionError("longer-than-training context must be rejected")

        for approach in ("A", "B"):
            report = rm.evaluate(ckpt, ds, approach=approach)
            assert report["approach"] == approach
            assert [c["coordinate"] for c in report["coordinates"]] == ["x", "y", "cos", "sin", "q0", "q1", "q2"]
            assert report["mean_r2"] is not None

        checks = rm.gradcheck()
        failed = [c[0] for c in checks if not c[3]]
        assert not failed, failed

        try:
            rm.Dataset.load(str(tmp / "missing.rmds"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file must raise")
        print(f"robometa_py smoke test passed ({len(checks)} gradient checks)")
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


if __name__ == "__main__":
    main()
