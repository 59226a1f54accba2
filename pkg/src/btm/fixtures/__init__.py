"""Small synthetic datasets shipped with the package.

``mcpr_synthetic_6.csv``: six countries in two subregions of one region,
simulated from the mCPR model with fixed reference hyperparameters
(truth in ``mcpr_synthetic_6_truth.csv``). ``tfr_synthetic_4.csv``: four
Phase II TFR series from the TFR model.
"""

from importlib.resources import files

NAMES = ("mcpr_synthetic_6.csv", "mcpr_synthetic_6_truth.csv", "tfr_synthetic_4.csv")


def path(name: str):
    """Filesystem path of a bundled dataset."""
    if name not in NAMES:
        raise KeyError(f"unknown fixture {name!r}; available: {NAMES}")
    return files(__name__) / name
