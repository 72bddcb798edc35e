"""A few Monte Carlo replicates of setting s1, small enough to run in minutes.

The printed table has the same columns as ``metrics.csv`` from
``triphase simulate``.  Twenty replicates cannot separate the estimators
reliably; the full comparison uses 200.
"""

import pandas as pd

import triphase as tp

config = tp.SimConfig(n_sims=20, B=10, estimators=("ipw", "gr2", "gr3", "mi3"))
table = tp.run_monte_carlo(config)
s = table.summary
with pd.option_context("display.float_format", "{:.5f}".format, "display.width", 120):
    print(s[s.coefficient == "beta1"].to_string(index=False))
