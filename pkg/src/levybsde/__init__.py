"""Monte Carlo toolkit for Lévy-driven BSDEs and their Malliavin derivatives."""

from . import bsde, chaos, levy
from .errors import *  # noqa: F401,F403

__version__ = "0.1.0"
