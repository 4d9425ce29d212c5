"""Collects one verdict per acceptance criterion for the terminal summary."""
VERDICTS = {}


def record(number, title, ok, detail):
    VERDICTS[number] = (title, bool(ok), detail)
    line = format_line(number)
    print(line)
    return ok


def format_line(number):
    title, ok, detail = VERDICTS[number]
    return f"C{number:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
