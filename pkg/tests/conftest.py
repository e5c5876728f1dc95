import numpy as np
import pytest

from ccaug.data import write_cifar, write_idx

CIFAR10_NAMES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]


def _digits(rng, n):
    labels = np.arange(n) % 10
    imgs = np.zeros((n, 28, 28), np.uint8)
    for i, c in enumerate(labels):
        imgs[i, 4 + 2 * c:8 + 2 * c, 6:22] = 200 + rng.integers(0, 55)
        imgs[i, 6:22, 4 + c] = 255
    return imgs, labels


def make_data_root(root, n_train=60, n_test=30, seed=0):
    """Small synthetic MNIST, CIFAR-10 and CIFAR-100 trees in the on-disk formats."""
    rng = np.random.default_rng(seed)
    m = root / "mnist"
    m.mkdir(parents=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        imgs, labels = _digits(rng, n)
        write_idx(m / f"{prefix}-images-idx3-ubyte.gz", m / f"{prefix}-labels-idx1-ubyte.gz", imgs, labels)

    c10 = root / "cifar-10-batches-bin"
    c10.mkdir()
    (c10 / "batches.meta.txt").write_text("\n".join(CIFAR10_NAMES) + "\n")
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        k = 10
        write_cifar(c10 / name, rng.integers(0, 256, size=(k, 3, 32, 32)), np.arange(k) % 10)

    c100 = root / "cifar-100-binary"
    c100.mkdir()
    fine = [f"class{i:02d}" for i in range(100)]
    for j, nm in zip((7, 22, 26, 32, 82, 37, 60, 68, 71, 76),
                     ("beetle", "clock", "crab", "flatfish", "sunflower", "house", "plain", "road", "sea",
                      "skyscraper")):
        fine[j] = nm
    (c100 / "fine_label_names.txt").write_text("\n".join(fine) + "\n")
    for name, n in (("train.bin", 200), ("test.bin", 100)):
        labels = rng.integers(0, 100, size=n)
        labels[:20] = np.repeat([7, 22, 26, 32, 82, 37, 60, 68, 71, 76], 2)
        write_cifar(c100 / name, rng.integers(0, 256, size=(n, 3, 32, 32)), labels, "cifar100",
                    coarse=labels // 5)
    return root


@pytest.fixture
def data_root(tmp_path):
    return make_data_root(tmp_path / "data")


# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """``record(number, title, ok, detail)``: log the outcome, then assert it."""
    def record(number, title, ok, detail=""):
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        assert ok, f"criterion {number} ({title}) failed: {detail}"
    return record


def pytest_runtest_setup(item):
    number = getattr(item.function, "criterion_number", None)
    if number is not None:
        _ACCEPTANCE[number] = (item.function.criterion_title, False, "did not complete")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:>2}. {title}: {detail}")
