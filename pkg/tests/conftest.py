ACCEPTANCE_LINES = []


def record_acceptance(name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] {name}" + (f" -- {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
