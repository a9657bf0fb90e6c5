import os

# single-threaded BLAS keeps runtimes comparable and reductions reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

# (criterion number, passed, title, detail), filled by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, title, detail in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title} -- {detail}")
