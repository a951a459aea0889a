"""
Console entry point.

``clipsim <subcommand> ...`` behaves like ``python manage.py clipsim
<subcommand> ...``. When no Django settings are configured a minimal
settings object holding only this app is installed first.
"""

import sys
from typing import Optional, Sequence

import django
from django.conf import settings
from django.core.management import execute_from_command_line


def configure() -> None:
    if not settings.configured:
        settings.configure(
            INSTALLED_APPS=["ennam_clipsim"],
            USE_TZ=True,
            LOGGING={
                "version": 1,
                "disable_existing_loggers": False,
                "handlers": {"console": {"class": "logging.StreamHandler"}},
                "loggers": {"ennam_clipsim": {"handlers": ["console"], "level": "INFO"}},
            },
        )
    django.setup()


def main(argv: Optional[Sequence[str]] = None) -> None:
    configure()
    args = sys.argv[1:] if argv is None else list(argv)
    execute_from_command_line(["clipsim", "clipsim", *args])


if __name__ == "__main__":
    main()
