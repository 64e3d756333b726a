import pytest

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = getattr(item.function, "criterion", None)
    if crit is None or rep.when != "call":
        return
    detail = getattr(item.function, "detail", "")
    ACCEPTANCE[crit] = ("PASS" if rep.passed else "FAIL", item.function.title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[crit]
        terminalreporter.write_line(f"criterion {crit:>2} {status}  {title}  {detail}".rstrip())
