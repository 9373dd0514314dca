"""Shared pass/fail record for the acceptance suite, printed at the end of the session."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(num: int, title: str, checks: dict[str, bool], detail: str) -> None:
    failed = [name for name, ok in checks.items() if not ok]
    RESULTS[num] = (not failed, title, detail + (f" | failed: {', '.join(failed)}" if failed else ""))
    assert not failed, f"criterion {num} ({title}): {detail}; failed checks {failed}"
