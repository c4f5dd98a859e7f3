import cv2
import numpy as np
import pytest


def write_pair(root, stem, height, width, rng):
    """Write one JPEG image + elliptical PNG mask in the expected layout."""
    (root / "images").mkdir(exist_ok=True, parents=True)
    (root / "masks").mkdir(exist_ok=True, parents=True)
    image = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    mask = np.zeros((height, width), dtype=np.uint8)
    center = (int(rng.integers(width // 4, 3 * width // 4)),
              int(rng.integers(height // 4, 3 * height // 4)))
    axes = (max(2, width // 5), max(2, height // 5))
    cv2.ellipse(mask, center, axes, 0, 0, 360, 255, -1)
    cv2.imwrite(str(root / "images" / f"{stem}.jpg"), image)
    cv2.imwrite(str(root / "masks" / f"{stem}_Segmentation.png"), mask)


@pytest.fixture(scope="session")
def isic_root(tmp_path_factory):
    """Tiny dataset tree following the ISIC 2016 naming convention."""
    root = tmp_path_factory.mktemp("isic")
    rng = np.random.default_rng(0)
    for i in range(8):
        write_pair(root, f"ISIC_{i:07d}", 96 + 8 * (i % 3), 128, rng)
    return root


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Recorder that emits one pass/fail line per acceptance criterion."""
    lines = request.config._acceptance_lines

    class Recorder:
        def check(self, name, passed, detail=""):
            status = "PASS" if passed else "FAIL"
            lines.append(f"[{status}] {name}: {detail}")
            assert passed, f"{name}: {detail}"

        def skip(self, name, reason):
            lines.append(f"[SKIP] {name}: {reason}")
            pytest.skip(reason)

    return Recorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
