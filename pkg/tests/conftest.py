import pytest

from thinlayer.cell_stokes import cell_permeability
from thinlayer.geometry import InclusionSpec, build_unit_cell

DISK = InclusionSpec("ball", size=0.25)


@pytest.fixture(scope="session")
def disk64():
    return build_unit_cell(DISK, 2, 64)


@pytest.fixture(scope="session")
def disk16():
    return build_unit_cell(DISK, 2, 16)


@pytest.fixture(scope="session")
def disk64_stokes(disk64):
    return cell_permeability(disk64)


@pytest.fixture(scope="session")
def disk16_stokes(disk16):
    return cell_permeability(disk16)


_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, ok, detail)."""
    lines = request.config.stash.setdefault(_RESULTS, [])

    def record(number, ok, detail):
        lines.append((number, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
