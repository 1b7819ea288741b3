"""Shared test plumbing: the acceptance-criteria summary block.

Acceptance tests register one verdict per criterion; after the run pytest
prints a single PASS/FAIL line for each so the whole gate is readable at a
glance even inside a large suite.
"""

ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail=""):
    ACCEPTANCE[number] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
