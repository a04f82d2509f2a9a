ACCEPTANCE = []


def record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
