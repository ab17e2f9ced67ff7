"""Collects one verdict per acceptance criterion for the terminal summary."""
RESULTS = {}


def record(number, title, ok, detail=""):
    RESULTS[number] = (title, bool(ok), detail)
    line = f"criterion {number:>2} {title}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    print(line)
    return ok


def summary_lines():
    return [f"criterion {n:>2} {t}: {'PASS' if ok else 'FAIL'} {d}".rstrip()
            for n, (t, ok, d) in sorted(RESULTS.items())]
