"""Global floating-point-operation counter.

Used by the complexity property checks: attention modules are measured
with an instrumented counter rather than asymptotic claims. Counting is
off by default so the hot path pays a single boolean test.
"""

from contextlib import contextmanager

_active = False
_total = 0


def count(n):
    global _total
    if _active:
        _total += int(n)


@contextmanager
def counting():
    """Enable counting inside the block; yields a getter for the total.

    The getter stays valid after the block exits (it freezes the final
    count on exit).
    """
    global _active, _total
    prev_active, prev_total = _active, _total
    _active, _total = True, 0
    frozen = [None]

    def get():
        return _total if frozen[0] is None else frozen[0]

    try:
        yield get
    finally:
        frozen[0] = _total
        _active, _total = prev_active, prev_total


def measure(fn, *args, **kwargs):
    """Run fn under the counter, returning (result, flops)."""
    with counting() as get:
        out = fn(*args, **kwargs)
        n = get()
    return out, n
