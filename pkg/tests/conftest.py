import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: use as ``criterion(n, text)`` at the start of a test."""
    state = {}

    def start(n, text):
        state["label"] = f"ACC-{n:02d} {text}"

    yield start
    if "label" in state:
        rep = getattr(request.node, "rep_call", None)
        ACCEPTANCE.append((state["label"], bool(rep and rep.passed), request.node.name))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, _ in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
