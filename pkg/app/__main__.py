# filepath: app/__main__.py
import sys

from app import main


def _run() -> int:
    return main(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(_run())
