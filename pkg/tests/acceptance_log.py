"""Collects one pass/fail line per acceptance criterion for the end-of-run summary."""

RESULTS: list[str] = []


def report(number, title: str, passed: bool | None, detail: str) -> bool | None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"[{status}] criterion {number}: {title} -- {detail}"
    RESULTS.append(line)
    print(line)
    return passed
