import math

import numpy as np
import pytest

from rvfusion.geometry import CameraIntrinsics, RigidTransform, SensorRig, rotation_from_ypr


def random_rotation(rng) -> np.ndarray:
    yaw, pitch, roll = rng.uniform(-math.pi, math.pi), rng.uniform(-1.5, 1.5), rng.uniform(-math.pi, math.pi)
    return rotation_from_ypr(yaw, pitch, roll)


def random_rig(rng, width=1080, height=1080) -> SensorRig:
    k = CameraIntrinsics(
        f=rng.uniform(0.002, 0.01),
        dx=rng.uniform(2e-6, 8e-6),
        dy=rng.uniform(2e-6, 8e-6),
        x_p0=rng.uniform(0, width - 1),
        y_p0=rng.uniform(0, height - 1),
        width=width,
        height=height,
    )
    return SensorRig(
        RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3)),
        RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3)),
        k,
    )


def identity_rig(width=1080, height=1080, fx=1000.0) -> SensorRig:
    f = 0.004
    k = CameraIntrinsics(f, f / fx, f / fx, width / 2, height / 2, width, height)
    return SensorRig(RigidTransform(), RigidTransform(), k)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Seeded 10-frame 128 px dataset shared by the IO and training tests."""
    from rvfusion.scene_sim import SimConfig, emit_dataset
    root = tmp_path_factory.mktemp("desk10")
    manifest = emit_dataset(SimConfig(image_size=128), 10, root, seed=0)
    return root, manifest


# -- acceptance summary ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("detail", "")
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _CRITERIA[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        status, detail = _CRITERIA[name]
        number = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"{status}  criterion {number} ({label}): {detail}")
