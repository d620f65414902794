import pytest

from feedmix.store import StreamStore

from support import ACCEPTANCE_LINES, ManualClock


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def store(tmp_path, clock):
    s = StreamStore(tmp_path / "store", clock=clock)
    yield s
    s.close()


@pytest.fixture
def sim_factory():
    """Start simulators that are always torn down at test end."""
    from feedmix.feedsim import SimServer

    servers = []

    def start(scenario, **kwargs):
        srv = SimServer(scenario, **kwargs)
        srv.start()
        servers.append(srv)
        return srv

    yield start
    for srv in servers:
        srv.stop()
