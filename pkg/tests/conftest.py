def pytest_configure(config):
    config.acceptance_results = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(results):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})")
