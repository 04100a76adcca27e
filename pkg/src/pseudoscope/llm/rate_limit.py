import asyncio
import logging
import time
from collections.abc import Awaitable, Callable

from ..errors import InvalidValue

logger = logging.getLogger(__name__)


class RateLimiter:
    """Spaces requests so that at most `requests` start per `interval` seconds.

    Waiters are served in arrival order (asyncio.Lock is FIFO). `requests=None` disables limiting.
    The clock and sleep functions are injectable so tests can run on a virtual clock.
    """

    def __init__(
        self,
        requests: int | None,
        interval: float = 1.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    ):
        if interval <= 0:
            raise InvalidValue(f"interval must be positive, got {interval}")
        if requests is not None and requests <= 0:
            raise InvalidValue(f"requests must be positive, got {requests}")
        self.requests = requests
        self.interval = interval
        self._clock = clock
        self._sleep = sleep
        self._lock = asyncio.Lock()
        self._next_slot: float | None = None

    @property
    def unlimited(self) -> bool:
        return self.requests is None

    @property
    def spacing(self) -> float:
        return 0.0 if self.requests is None else self.interval / self.requests

    async def acquire(self) -> None:
        if self.unlimited:
            return
        async with self._lock:
            now = self._clock()
            if self._next_slot is not None and self._next_slot > now:
                delay = self._next_slot - now
                logger.debug(f"Rate limit: waiting {delay:.3f}s")
                await self._sleep(delay)
                now = self._clock()
            start = now if self._next_slot is None else max(now, self._next_slot)
            self._next_slot = start + self.spacing
