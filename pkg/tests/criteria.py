"""Records one pass/fail line per acceptance criterion."""

import contextlib
import time

RESULTS: list[tuple[int, str, bool, str]] = []


class Check:
    def __init__(self):
        self.detail = ""
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


def line(number: int, title: str, ok: bool, detail: str) -> str:
    return f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")


@contextlib.contextmanager
def criterion(number: int, title: str):
    check = Check()
    try:
        yield check
    except BaseException as exc:
        RESULTS.append((number, title, False, f"{type(exc).__name__}: {exc}".splitlines()[0]))
        print(line(*RESULTS[-1]))
        raise
    RESULTS.append((number, title, True, check.detail))
    print(line(*RESULTS[-1]))
