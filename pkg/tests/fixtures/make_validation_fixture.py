"""Write the 8-observation predictive-draw toy used by the validation tests.

Draws for observation i are m_i + w_i * linspace(-1, 1, 101), so the
level-p quantile (linear interpolation) is m_i + w_i * (2p - 1) and every
summary can be worked out by hand.
"""

import json
from pathlib import Path

import numpy as np

M = [0.30, 0.40, 0.20, 0.50, 0.60, 0.25, 0.70, 0.35]
W = [0.10, 0.10, 0.05, 0.20, 0.10, 0.10, 0.10, 0.05]
Y = [0.30, 0.52, 0.14, 0.45, 0.67, 0.165, 0.74, 0.33]


def main():
    grid = np.linspace(-1.0, 1.0, 101)
    pred = [(m + w * grid).tolist() for m, w in zip(M, W)]
    out = {"y": Y, "pred": pred}
    Path(__file__).with_name("validation_toy.json").write_text(json.dumps(out))


if __name__ == "__main__":
    main()
