import numpy as np
import pytest

from pixpatch import DomainSpec, generate_dataset, generate_domain

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] {name}" + (f" - {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_source():
    return generate_domain(DomainSpec(class_count=5, image_size=32,
                                      sample_count=16, seed=11))


@pytest.fixture(scope="session")
def small_target():
    return generate_domain(DomainSpec(class_count=5, image_size=32,
                                      sample_count=16, seed=12, hue_rotation=80.0,
                                      contrast=0.8, noise_sigma=0.05,
                                      illumination=0.25))


@pytest.fixture(scope="session")
def bench64(tmp_path_factory):
    """A 64 px on-disk benchmark, sized for CLI and trainer tests."""
    root = tmp_path_factory.mktemp("bench64")
    source = DomainSpec(class_count=5, image_size=64, sample_count=20, seed=21)
    target = DomainSpec(class_count=5, image_size=64, sample_count=20, seed=22,
                        hue_rotation=80.0, contrast=0.8, noise_sigma=0.05,
                        illumination=0.25)
    generate_dataset(source, target, root)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
