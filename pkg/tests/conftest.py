import pytest

ACCEPTANCE = "test_acceptance.py"


@pytest.fixture
def criterion(request):
    """Returns ``record(name, ok, detail)``, which stores the verdict line and asserts ``ok``."""

    def record(name, ok, detail):
        request.node.user_properties.append(("criterion", (name, bool(ok), detail)))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            if ACCEPTANCE not in getattr(rep, "nodeid", ""):
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                name, ok, detail = props["criterion"]
                lines.append((rep.nodeid, f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"))
            elif outcome == "skipped":
                reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else ""
                lines.append((rep.nodeid, f"SKIP  {rep.nodeid.split('::')[-1]}: {reason.removeprefix('Skipped: ')}"))
            elif rep.when == "call" or outcome == "failed":
                lines.append((rep.nodeid, f"{'PASS' if outcome == 'passed' else 'FAIL'}  {rep.nodeid.split('::')[-1]}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(set(lines), key=lambda x: x[0]):
            terminalreporter.write_line(line)
