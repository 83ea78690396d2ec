"""Prints one PASS/FAIL line per acceptance criterion after the run."""


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(report, "user_properties", []))
            if "criterion" not in props:
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((props["criterion"], f"{status} criterion {props['criterion']:>2}: {props.get('title', '')} | {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
