import sys


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title, ok, detail in sorted(results, key=lambda r: r[0]):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        tr.write_line(f"[criterion {n:2d}] {status}  {title}: {detail}")
