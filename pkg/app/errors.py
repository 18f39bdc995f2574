# app/errors.py
"""
Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3, NumericalError -> 4.
"""


class BiOptError(Exception):
    """Base class for all errors raised on purpose by this package."""


class ConfigError(BiOptError, ValueError):
    """Invalid run configuration (unknown key, bad value, missing required key)."""


class FormatError(BiOptError, ValueError):
    """Malformed or incompatible file: checkpoint, episode directory, netpbm image."""


class NumericalError(BiOptError, RuntimeError):
    """Non-finite loss or a prototype collapsing to zero norm."""


class DegenerateEpisodeError(BiOptError, ValueError):
    """Support foreground vanished at feature resolution; the episode cannot be used."""
