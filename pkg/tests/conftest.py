"""Collects per-criterion outcomes from the acceptance suite and prints them at the end."""

_outcomes = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        key = props["criterion"]
        _outcomes[key] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes, key=lambda k: (int(k.split(".")[0]), k)):
        outcome, detail = _outcomes[key]
        flag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {key}: {flag}  {detail}")
