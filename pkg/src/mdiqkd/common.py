"""Small shared enums and exceptions."""

import enum


class Verdict(str, enum.Enum):
    KEEP = "Keep"
    DISCARD_BASIS = "DiscardBasis"
    DISCARD_PNP = "DiscardPNP"
    DECOY = "DecoyRound"
    ERROR_SAMPLE = "ErrorSample"
    # no detection anywhere along the chain; dropped before sifting
    LOST = "Lost"


class ConfigError(ValueError):
    """Inconsistent or invalid simulation configuration."""
