import numpy as np
import pytest

from lvlab.dynamics import LVParams
from lvlab.reference import integrate_ode


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run long training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running, enabled with --slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def unit_params():
    return LVParams()


@pytest.fixture(scope="session")
def lv_reference(unit_params):
    """Tight-tolerance trajectory from (2, 1) on [0, 20], 2001 samples."""
    return integrate_ode(unit_params, (2.0, 1.0), (0.0, 20.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------- long training runs

# Full-size 1D run used by the acceptance suite and the CLI eval test: default
# 3x64 network and 20k epochs, 1000 interior collocation points per epoch.
ACCEPTANCE_TRAIN = ["train", "--seed", "0", "--threads", "1", "--quiet",
                    "--set", "collocation.interior=1000"]
# Same run without the physics terms and with two measurements only.
ABLATION_TRAIN = ACCEPTANCE_TRAIN + ["--set", "n_data=2", "--set", "weights.pde=0",
                                     "--set", "weights.cons=0"]


def _cli_train(tmp_path_factory, name, argv):
    import time

    from lvlab.cli import run_command

    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    code = run_command(argv + ["--out", str(out)])
    assert code == 0, f"{name} training exited with {code}"
    return {"dir": out, "checkpoint": out / "checkpoint.json", "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def trained_1d(tmp_path_factory):
    return _cli_train(tmp_path_factory, "full", ACCEPTANCE_TRAIN)


@pytest.fixture(scope="session")
def ablation_1d(tmp_path_factory):
    return _cli_train(tmp_path_factory, "ablation", ABLATION_TRAIN)


# ------------------------------------------------------------ acceptance report


@pytest.fixture(scope="session")
def acceptance_log(request):
    log = []
    request.config._acceptance_lines = log
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
