"""Occupancy-field bone reconstruction from biplanar projections.

Synthetic 4-bone phantoms stand in for clinical data: a CT-trained
occupancy network distills into a biplanar X-ray network, reconstructed
surfaces come out of marching cubes, and ASSD/HD/DSC score them against
the analytic ground truth.
"""

__version__ = "0.1.0"
