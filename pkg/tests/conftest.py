import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion id -> [(check, ok, detail)], filled by test_acceptance.py
ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


def record(criterion: str, check: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((check, bool(ok), detail))
    print(f"{criterion} {check}: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        checks = ACCEPTANCE[cid]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        parts = [f"{name}{'' if ok else ' FAILED'} ({detail})" if detail else f"{name}{'' if ok else ' FAILED'}"
                 for name, ok, detail in checks]
        terminalreporter.write_line(f"{cid} {verdict}: " + "; ".join(parts))
