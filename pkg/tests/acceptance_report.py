"""Collects acceptance outcomes so the terminal summary can print one line per criterion."""
from collections import OrderedDict

RESULTS = OrderedDict()


def record(criterion, part, ok, detail):
    """Store the outcome of ``criterion`` (sub-part ``part``, or None)."""
    RESULTS.setdefault(criterion, []).append((part, bool(ok), detail))
    status = "PASS" if ok else "FAIL"
    label = f"{criterion}{part or ''}"
    print(f"criterion {label}: {status} ({detail})")


def summary_lines():
    lines = []
    for criterion, parts in RESULTS.items():
        ok = all(p[1] for p in parts)
        if len(parts) == 1 and parts[0][0] is None:
            detail = parts[0][2]
        else:
            detail = "; ".join(f"{p[0]}: {'PASS' if p[1] else 'FAIL'} {p[2]}" for p in parts)
        lines.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}")
    return lines
