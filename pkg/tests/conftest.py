import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []

from egosplat.geometry import CameraModel, Pose, Trajectory, quat_from_axis_angle
from egosplat.scene import GaussianScene


def random_scene(n: int, seed: int = 0, depth: float = 3.0, spread: float = 0.5) -> GaussianScene:
    rng = np.random.default_rng(seed)
    return GaussianScene(
        rng.uniform(-spread, spread, (n, 3)) + [0.0, 0.0, depth],
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(0.08, 0.3, (n, 3))),
        rng.normal(0.5, 1.0, n),
        rng.uniform(0.1, 1.0, (n, 3)),
    )


def yaw_trajectory(rate: float, t_end: float = 0.1, n: int = 101, base: Pose | None = None) -> Trajectory:
    """Constant-rate rotation about the camera's y axis, 1 kHz-style knots."""
    base = base or Pose()
    times = np.linspace(0.0, t_end, n)
    poses = [base.compose(Pose(quat_from_axis_angle([0, 1, 0], rate * t))) for t in times]
    return Trajectory.from_poses(times, poses)


@pytest.fixture
def small_cam():
    return CameraModel.pinhole(32, 24, 28.0)


@pytest.fixture
def scene10():
    return random_scene(10)


PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "colors")


def fd_check(loss, scene, analytic, h=1e-5, names=PARAM_NAMES, floor=1e-6):
    """Worst relative error between ``analytic`` (a GradientBuffer) and central differences.

    Only entries with ``|grad| > floor`` count. Returns ``(worst, checked)``.
    """
    worst, checked = 0.0, 0
    for name in names:
        arr = getattr(scene, name)
        ga = getattr(analytic, name)
        for idx in np.ndindex(arr.shape):
            plus, minus = scene.copy(), scene.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            a = ga[idx]
            if max(abs(a), abs(fd)) > floor:
                worst = max(worst, abs(fd - a) / max(abs(fd), abs(a)))
                checked += 1
    return worst, checked


def tiny_capture(frames: int = 16, size: int = 32, kind: str = "head_scan", peak_deg_s: float = 60.0,
                 count: int = 25, seed: int = 0, **sensor_kw):
    """Small in-memory simulated capture of a grid scene."""
    from egosplat.simulator import MotionProfile, PoseDegradation, SensorProfile, capture, generate_scene

    scene = generate_scene("grid", count, seed=seed)
    motion = MotionProfile(kind=kind, duration=0.1 * frames + 0.2, peak_deg_s=peak_deg_s,
                           base_pose=Pose(translation=[0.0, 0.0, -1.5]))
    sensor = SensorProfile(width=size, height=size, **sensor_kw)
    ds = capture(scene, motion, sensor, PoseDegradation(), seed=seed, n_frames=frames)
    return scene, ds


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    """Register one acceptance verdict line; all lines are echoed in the terminal summary."""
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
