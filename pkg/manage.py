#!/usr/bin/env python
"""Command-line entry point of the NVCiM-PT simulator (gen, tune, store, query, sweep, report)."""
import os
import sys


def main():
    """Run simulator commands."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nvcim_pt.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed?"
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
