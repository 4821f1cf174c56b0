"""
Checking the backward rules against finite differences
=======================================================

Every derivative on the projection path is hand written. Here each one is
compared with central differences (h = 1e-5) at a few random points.
"""
from dwcca.gradcheck import CHECKS, run_checks

print(f"{'op':22s} {'worst rel. err':>15s}  tol")
for op in CHECKS:
    reports = list(run_checks(seeds=5, ops=[op]))
    worst = max(r.max_rel_err for r in reports)
    tol = reports[0].tol
    print(f"{op:22s} {worst:15.2e}  {tol:g}  {'ok' if all(r.passed for r in reports) else 'FAIL'}")

# the same table, as CSV, comes from the command line:
#   dwcca gradcheck --seeds 20
