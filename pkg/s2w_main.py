"""
Pansharpening toolkit
Command line entry point
"""

import sys

from dotenv import load_dotenv

load_dotenv()

from s2wmamba.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
