"""Smoke test for the Python extension module.

Build and install first, e.g. ``maturin develop -m crates/python/Cargo.toml``,
then run ``python python/smoke_test.py``.
"""

import math
import tempfile
from pathlib import Path

import resurface


def main() -> None:
    k = resurface.Intrinsics.default_vga().downscaled(10)
    assert (k.width, k.height) == (64, 48)

    a = resurface.Pose(translation=[0.1, 0.0, 0.0])
    b = resurface.Pose.from_euler([0.0, 0.0, 0.3], [0.1, 0.0, 0.0])
    assert math.isclose(resurface.pose_distance(a, b), 0.6, rel_tol=1e-9)
    ident = a.compose(a.inverse())
    assert all(abs(x) < 1e-12 for x in ident.translation)

    d = [0.05] * 15
    for i, v in [(3, 0.5), (4, 0.45), (5, 0.55), (6, 0.40), (7, 0.42), (8, 0.70), (12, 0.90), (13, 0.60)]:
        d[i - 1] = v
    assert resurface.select_window(d, 5) == 3
    assert [i + 1 for i in resurface.select_topk(d, 5)] == [12, 8, 13, 5, 3]
    assert resurface.select_window([0.0] * 4, 2) is None

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        n = resurface.synth(
            str(root / "ds"),
            frames=16,
            waypoints=4,
            downscale=10,
            drift=[1e-3, 0, 0, 0, 0, 1e-3],
            corrections=[(17, 1.0)],
            anchor_every=4,
        )
        assert n == 16
        data = resurface.Dataset.read(str(root / "ds"))
        assert len(data) == 16 and data.has_ground_truth() and data.event_count == 1

        cfg = resurface.RunConfig(kappa=4, m=2, voxel_size=0.04, truncation=0.12)
        assert cfg.kappa == 4 and cfg.mode == "consecutive_window"
        mesh, stats = resurface.run(cfg, data)
        assert stats["keyframes"] == 4
        assert len(mesh) > 0 and len(mesh.vertices) == len(mesh.colors)

        mesh.write_ply(str(root / "mesh.ply"))
        again = resurface.Mesh.read_ply(str(root / "mesh.ply"))
        assert len(again) == len(mesh)

        reference = resurface.reference_mesh(cfg, data)
        metrics = resurface.evaluate_mesh(mesh, reference, samples=20000, cell=0.16)
        assert metrics["corr_mad_mm"] >= 0.0 and metrics["compl_mad_mm"] >= 0.0

        try:
            resurface.Dataset.read(str(root / "missing"))
        except resurface.ResurfaceError:
            pass
        else:
            raise AssertionError("reading a missing dataset must fail")

    print("python smoke test passed:", mesh, stats["keyframes"], "keyframes", metrics)


if __name__ == "__main__":
    main()
