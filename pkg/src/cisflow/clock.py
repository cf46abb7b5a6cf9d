class VirtualClock:
    """Monotonic millisecond clock advanced explicitly by the simulation."""

    def __init__(self, start_ms: int = 0):
        self.now_ms = start_ms

    def __call__(self) -> int:
        return self.now_ms

    def advance_to(self, t_ms: int) -> None:
        if t_ms < self.now_ms:
            raise ValueError(f"clock cannot go back from {self.now_ms} to {t_ms}")
        self.now_ms = t_ms

    def advance(self, delta_ms: int) -> None:
        self.advance_to(self.now_ms + delta_ms)
