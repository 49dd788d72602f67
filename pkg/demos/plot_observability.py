"""
Observability of the motion-only problem
========================================

Hand-eye calibration needs rotation about at least two axes.  A car that only
turns in the plane leaves the translation along the yaw axis undetermined.
The solver reports this from the spectrum of the 6x6 information matrix of
the calibration, after the scales have been marginalized.
"""

from camlidar.calib import coarse_calibrate
from camlidar.synthcorr import ScenarioSpec, generate_scenario
from camlidar.sync import pair_trajectories, relative_motions

##############################################################################
# Two drives, same rig
# --------------------
for profile in ("figure_eight_3d", "planar_loop"):
    sc = generate_scenario(ScenarioSpec(profile=profile, duration=30.0))
    pairs = relative_motions(pair_trajectories(sc.cam, sc.lidar).frames)
    est, rep = coarse_calibrate(pairs)
    obs = rep.hessian_spectrum
    print(f"\n{profile}: {len(obs.flagged)} weak direction(s)")
    for rec in obs.as_records():
        mark = "*" if rec["flagged"] else " "
        print(f"  {mark} eigenvalue {rec['eigenvalue']:10.3e}  {rec['description']}")

##############################################################################
# The planar drive flags a direction dominated by translation; adding
# correspondences in the fine stage, or driving over uneven ground, fixes it.
