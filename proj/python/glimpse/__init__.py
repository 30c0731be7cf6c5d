"""Sequential-glimpse image classifier with early-exit cascade inference."""

from ._core import *  # noqa: F401,F403
