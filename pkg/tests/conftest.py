import numpy as np
import pytest

from drtanet.core import precision
from drtanet.data import synth_generate

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` logs one summary line, then fails the test when ``ok`` is false."""

    def record(number: int, ok: bool, detail: str):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d}: {status}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode."""
    with precision(np.float64):
        yield


@pytest.fixture(scope="session")
def small_pairs():
    return synth_generate(seed=7, n_pairs=8, size=64)


def _write_pair(directory, name, t0, t1, mask):
    from drtanet.data import save_image, save_mask

    for sub in ("t0", "t1", "mask"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    save_image(directory / "t0" / f"{name}.png", t0)
    save_image(directory / "t1" / f"{name}.png", t1)
    save_mask(directory / "mask" / f"{name}.png", mask)


@pytest.fixture(scope="session")
def pcd_root(tmp_path_factory):
    """Stand-in PCD tree: 100 224x1024 pairs in each of tsunami/ and gsv/."""
    root = tmp_path_factory.mktemp("pcd")
    gen = np.random.default_rng(0)
    for subset in ("tsunami", "gsv"):
        for i in range(100):
            # tiled content keeps the PNGs small and quick to write
            img = np.tile(gen.integers(0, 256, size=(28, 32, 3), dtype=np.uint8), (8, 32, 1))
            mask = np.tile((gen.random((28, 32)) < 0.1).astype(np.uint8), (8, 32))
            _write_pair(root / subset, f"{i:08d}", img, img[:, ::-1], mask)
    return root


@pytest.fixture(scope="session")
def vl_cmu_cd_root(tmp_path_factory):
    """Stand-in VL-CMU-CD tree with tiny images and the real per-split pair totals."""
    from drtanet.data import default_vl_cmu_cd_split

    split = default_vl_cmu_cd_split()
    root = tmp_path_factory.mktemp("vlcmucd")
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    mask = np.zeros((4, 4), dtype=np.uint8)
    for ids, total in ((split["train"], 933), (split["test"], 429)):
        base, extra = divmod(total, len(ids))
        for j, seq in enumerate(ids):
            for i in range(base + (j < extra)):
                _write_pair(root / seq, f"{i:03d}", img, img, mask)
    return root
