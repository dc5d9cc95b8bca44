from collections import defaultdict

# criterion number -> list of (check, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        ok = all(passed for _, passed, _ in checks)
        failed = [name for name, passed, _ in checks if not passed]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if failed:
            line += f" (failed: {'; '.join(failed)})"
        terminalreporter.write_line(line)
        for name, passed, detail in checks:
            terminalreporter.write_line(f"    [{'ok' if passed else 'FAIL'}] {name}: {detail}")
