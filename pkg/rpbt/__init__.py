from ._rpbt_version import version as __version__  # noqa: F401
from .cli import cli  # noqa: F401
