from __future__ import annotations

from functools import partial
from typing import Iterable, Iterator, NoReturn, Protocol, TypeVar, overload

from tqdm import tqdm


T = TypeVar("T", covariant=True)
T_in = TypeVar("T_in")


class Tracker(Protocol[T]):
    def update(self, n: float | None = 1) -> bool | None:
        pass

    def set_postfix_str(self, s: str = "", refresh: bool = True) -> None:
        pass

    def __iter__(self) -> Iterator[T]:
        pass

    def __enter__(self) -> Tracker[T]:
        pass

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        pass


class TrackerFactory(Protocol):
    @overload
    def __call__(
        self,
        iterable: Iterable[T_in],
        *,
        desc: str | None = None,
        total: float | None = None,
        unit: str = "it",
        leave: bool | None = True,
        position: int | None = None,
        **kwargs,
    ) -> Tracker[T_in]: ...

    @overload
    def __call__(
        self,
        iterable: None = None,
        *,
        desc: str | None = None,
        total: float | None = None,
        unit: str = "it",
        leave: bool | None = True,
        position: int | None = None,
        **kwargs,
    ) -> Tracker[NoReturn]: ...

    def __call__(
        self,
        iterable: Iterable[T_in] | None = None,
        *,
        desc: str | None = None,
        total: float | None = None,
        unit: str = "it",
        leave: bool | None = True,
        position: int | None = None,
        **kwargs,
    ) -> Tracker[T_in]: ...


default_tracker: TrackerFactory = partial(tqdm, disable=True)
