import pytest

from ropchain.elf import PF_R, PF_X, SegmentSpec, build_elf, load_elf
from ropchain.fixtures import minimal_elf, rich_elf


def image_of(code: bytes, vaddr: int = 0x400000):
    """Single RX segment image around ``code``."""
    return load_elf(build_elf([SegmentSpec(vaddr, code, PF_R | PF_X)], entry=vaddr))


@pytest.fixture(scope="session")
def minimal_image():
    return load_elf(minimal_elf())


@pytest.fixture(scope="session")
def rich_image():
    return load_elf(rich_elf())


# acceptance lines are collected here and echoed in the terminal summary so
# they show up without -s
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
