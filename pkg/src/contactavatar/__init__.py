"""Head avatars under hand-face contact: alignment, implicit avatar, metrics."""

__version__ = "0.1.0"
