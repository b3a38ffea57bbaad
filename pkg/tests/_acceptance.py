"""Registry for acceptance-criterion outcomes, printed by the conftest terminal summary."""

import functools
import time

RESULTS: dict[int, tuple[str, str, str]] = {}


def criterion(number: int, title: str, budget_s: float):
    """Record PASS/FAIL for an acceptance test; the wall time is checked against ``budget_s``."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                RESULTS[number] = ("FAIL", title, f"{msg} ({time.perf_counter() - t0:.1f}s)")
                raise
            elapsed = time.perf_counter() - t0
            if elapsed > budget_s:
                RESULTS[number] = ("FAIL", title, f"{detail}; runtime {elapsed:.1f}s over {budget_s:g}s budget")
                raise AssertionError(f"criterion {number} took {elapsed:.1f}s, budget {budget_s:g}s")
            RESULTS[number] = ("PASS", title, f"{detail} ({elapsed:.1f}s)".strip())

        return run

    return wrap
