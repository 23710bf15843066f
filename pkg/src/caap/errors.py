class CaapError(Exception):
    pass


class ConfigError(CaapError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TraceFormatError(CaapError):
    """Malformed CSV trace. ``errors`` holds (line number, message) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "; ".join(f"line {n}: {m}" for n, m in self.errors[:10])
        super().__init__(f"{len(self.errors)} malformed row(s): {lines}")


class LinkDownError(CaapError):
    """Packet error rate of 1: nothing gets through."""


class CpuSaturatedError(CaapError):
    """CPU load of 1: cryptographic work never completes."""


class ProtocolError(CaapError):
    pass
