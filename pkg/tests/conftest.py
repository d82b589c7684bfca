import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """record(criterion, ok, detail): collect one verdict per criterion for the summary."""
    store = request.config._acceptance

    def record(criterion, ok, detail):
        prev_ok, prev_detail = store.get(criterion, (True, ""))
        detail = f"{prev_detail}; {detail}" if prev_detail else detail
        store[criterion] = (prev_ok and bool(ok), detail)
        print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        ok, detail = results[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
