"""
Volatility Smile Calibration

Fits a three-parameter FX volatility smile, derives the implied return density,
its exponential tail decay and value-at-risk, and ties the smile to historical
return statistics.
"""

__version__ = "1.0.0"


def main(argv=None):
    """Run the command-line interface; see ``app.cli``."""
    from app.cli import main as cli_main

    return cli_main(argv)
