import pytest

from fedbatman import dataset, nn

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def fig3_trace():
    return dataset.make_fig3_dataset()


@pytest.fixture(scope="session")
def fig3_samples(fig3_trace):
    return dataset.make_windows(fig3_trace, 4)


@pytest.fixture
def default_config():
    return nn.LstmConfig()


@pytest.fixture
def small_config():
    return nn.LstmConfig(input_size=2, hidden_size=3, num_layers=2, seq_len=4)


@pytest.fixture
def record_criterion():
    def record(name, passed, detail=""):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
