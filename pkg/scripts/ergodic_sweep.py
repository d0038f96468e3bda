"""Ergodic-constant estimates for every 1D catalog problem (discounted extrapolation vs long time)."""
import sys

from obstaclehj import build_grid, catalog_keys, get_problem
from obstaclehj.ergodic import ergodic_constant_longtime, estimate_ergodic_constant

N = int(sys.argv[1]) if len(sys.argv) > 1 else 256
T = float(sys.argv[2]) if len(sys.argv) > 2 else 10.0

print(f"{'problem':28s} {'discounted':>12s} {'long-time':>12s} {'diff':>10s}")
for key in catalog_keys(dim=1):
    p = get_problem(key)
    g = build_grid(1, N)
    cd = estimate_ergodic_constant(p, g)
    cl = ergodic_constant_longtime(p, T, g)
    print(f"{key:28s} {cd:12.6f} {cl:12.6f} {abs(cd - cl):10.2e}")
