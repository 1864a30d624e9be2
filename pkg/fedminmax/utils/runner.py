from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

T = TypeVar("T")
R = TypeVar("R")


class ClientExecutor(ABC):
    """Unified interface for running per-client work within a round.

    ``map`` always returns results in input order, so reductions over the
    reports do not depend on how the work was scheduled.
    """

    @abstractmethod
    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply *fn* to every item and return the results in order."""

    @abstractmethod
    def close(self) -> None:
        """Release worker threads and other resources."""

    @property
    @abstractmethod
    def workers(self) -> int:
        """Number of client computations that may run at once."""

    def __enter__(self):
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class SerialExecutor(ClientExecutor):
    """Run clients one after another on the calling thread."""

    def map(self, fn, items):
        return [fn(item) for item in items]

    def close(self) -> None:
        pass

    @property
    def workers(self) -> int:
        return 1


class ThreadExecutor(ClientExecutor):
    """Run clients on a thread pool; numpy releases the GIL in the heavy kernels."""

    def __init__(self, workers: int):
        self._workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="client")

    def map(self, fn, items):
        # Executor.map already yields in submission order.
        return list(self._pool.map(fn, items))

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    @property
    def workers(self) -> int:
        return self._workers


def create_executor(workers: int = 1) -> ClientExecutor:
    """Factory: a serial executor for one worker, a thread pool otherwise."""
    if workers < 1:
        raise ValueError(f"workers must be at least 1, got {workers}")
    if workers == 1:
        return SerialExecutor()
    return ThreadExecutor(workers)
