"""Pass/fail lines collected by the acceptance tests, printed at session end."""

RESULTS: dict = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[number] = line
    print(line)
    return ok
