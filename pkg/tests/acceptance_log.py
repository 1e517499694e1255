"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
import re

LINES = []


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return ok


def order(line):
    return int(re.match(r"criterion\s+(\d+)", line).group(1))
