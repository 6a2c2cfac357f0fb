"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES = {}


def record(n, title, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    LINES[n] = line
    print(line)
    return ok
