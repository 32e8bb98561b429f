RESULTS = {}

N_CRITERIA = 9


def record(number: int, ok: bool, detail: str):
    RESULTS[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: not run or errored before a verdict")
