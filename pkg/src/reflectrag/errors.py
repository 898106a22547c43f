"""Exception hierarchy.

The CLI maps the three top-level families onto distinct exit codes, so every
error raised by the engine should derive from one of them.
"""


class ReflectRagError(Exception):
    pass


class ConfigError(ReflectRagError):
    """Bad configuration or CLI usage (exit code 1)."""


class DataError(ReflectRagError):
    """Malformed or inconsistent input data (exit code 2)."""


class BackendError(ReflectRagError):
    """A generator, judge or scoring backend failed (exit code 3)."""


class BackendTimeout(BackendError):
    pass


class SchemaError(BackendError):
    """A backend answered with a payload that violates the response contract."""
