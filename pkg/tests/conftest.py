from __future__ import annotations

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
