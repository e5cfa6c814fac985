"""cplab: simulation and verification lab for occupied-cluster percolation
in the two-dimensional contact process.

Submodules: spacetime (geometry, rates, diagrams), reachability (truncated
occupancy), percolation (clusters, crossings, finite-size), discretization
(interval indicators, certified occupancy), influence (pivotality, sharp
thresholds), coupling (two-density stability coupling), experiments + cli
(batch harness).
"""

__version__ = "0.1.0"
