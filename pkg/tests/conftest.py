import os

import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return __import__("numpy").random.default_rng(1234)


def pytest_configure(config):
    os.environ.setdefault("PYTHONHASHSEED", "0")


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` logs one acceptance line; the summary lists them all."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def _record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        store[n] = line
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
