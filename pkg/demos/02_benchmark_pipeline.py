"""The whole benchmark: mock data, latent inference for both observers,
the misspecification check, then compressed rejection ABC.

Run with ``python demos/02_benchmark_pipeline.py [out_dir]``; takes seconds.
The same stages are available from the shell as ``selfisbi <stage>``.
"""

import sys
from dataclasses import replace

import numpy as np

from selfisbi import PipelineConfig
from selfisbi.pipeline import cmd_report, run_all
from selfisbi.storage import Stage

out = sys.argv[1] if len(sys.argv) > 1 else "demo-run"
cfg = replace(PipelineConfig.load("configs/benchmark.yaml"), out=out, threads=4)

run_all(cfg)
print(cmd_report(cfg))

# Everything lives in checksummed stage directories and can be reloaded.
sbi = Stage(f"{out}/sbi-A")
corr = np.asarray(sbi["posterior_correlation"])
print("posterior correlation matrix (alpha, beta, gamma, delta):")
print(np.round(corr, 2))
print("band table for plotting:", f"{out}/selfi-A/band.csv")
print("corner-plot grids:      ", f"{out}/sbi-A/histograms.json")
