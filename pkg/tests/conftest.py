import pytest

_CRITERIA: list[tuple[int, str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = item.callspec.id if hasattr(item, "callspec") else ""
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA.append((mark.args[0], item.originalname, detail, status))
    # also visible in the -v stream with -s
    print(f"\n[criterion {mark.args[0]}] {item.name}: {status}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, detail, status in sorted(_CRITERIA, key=lambda r: r[0]):
        suffix = f"[{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {n:>2}  {status}  {name}{suffix}")
