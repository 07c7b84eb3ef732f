"""Logical memory accounting for the enclave worker.

Tracks bytes of model parameters and per-batch working set against the
configured budget.  There is no paging fallback: exceeding the budget is an
error and the offending operation produces no partial result.
"""

from __future__ import annotations

from ..errors import BudgetExceededError

MIN_WORKING_SET = 1 * 2**20  # interpreter-side floor for any useful worker


class MemoryMeter:
    def __init__(self, budget_bytes: int):
        if budget_bytes < MIN_WORKING_SET:
            raise BudgetExceededError(
                f"budget too small: {budget_bytes} bytes < minimum working set {MIN_WORKING_SET}"
            )
        self.budget = int(budget_bytes)
        self.persistent = 0
        self.transient = 0
        self.peak = 0

    def _check(self) -> None:
        total = self.persistent + self.transient
        if total > self.peak:
            self.peak = total
        if total > self.budget:
            raise BudgetExceededError(
                f"working set {total} bytes exceeds budget {self.budget}"
            )

    def charge_persistent(self, nbytes: int) -> None:
        self.persistent += int(nbytes)
        self._check()

    def release_persistent(self, nbytes: int) -> None:
        self.persistent = max(0, self.persistent - int(nbytes))

    def require_transient(self, nbytes: int) -> None:
        """Admission check for a batch working set, before any work happens."""
        self.transient = int(nbytes)
        try:
            self._check()
        except BudgetExceededError:
            self.transient = 0
            raise

    def release_transient(self) -> None:
        self.transient = 0
