"""Shared pytest config: prints one pass/fail line per acceptance criterion."""

import re


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    stats = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            m = re.search(r"test_criterion(\d+)", nodeid)
            if m:
                n = int(m.group(1))
                ok, total = stats.get(n, (0, 0))
                stats[n] = (ok + (status == "passed"), total + 1)
    if stats:
        terminalreporter.write_sep("-", "acceptance criteria")
        for n in sorted(stats):
            ok, total = stats[n]
            word = "PASS" if ok == total else "FAIL"
            terminalreporter.write_line(f"criterion {n}: {word} ({ok}/{total} checks)")
