"""
How much data does the fine stage need?
=======================================

Sweep the fraction of correspondences kept per frame and watch the
translation error and run time.  Each value runs on three seeded scenarios;
the aggregate table reports mean and standard deviation.
"""

from camlidar.pipeline import RunConfig, run_ablation

##############################################################################
# Run the sweep
# -------------
cfg = RunConfig(benchmark="robustness")
res = run_ablation(cfg, "corr_fraction", [0.01, 0.02, 0.05, 0.1], seeds=[0, 1, 2])
print(res.rows_csv())

##############################################################################
# Aggregate
# ---------
# More correspondences help until the frames, not the points, become the
# limiting factor.
print(res.aggregate_csv())

##############################################################################
# The same sweep from the shell::
#
#     camlidar ablate --benchmark robustness --sweep corr_fraction \
#         --values 0.01,0.02,0.05,0.1 --seed 0 --runs 3 --out fraction.csv
