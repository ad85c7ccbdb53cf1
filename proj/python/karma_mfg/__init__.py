"""Karma mean field game: equilibrium solver, DQN newcomer, fictitious play."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401
