"""Walk the vertices w_l toward w_inf and watch the entropy jump at the limit point."""
import math

from horsespec import construction, spectrum
from horsespec.construction import DEFAULTS

N, L = 8, 3
fam = construction.make_vertices(DEFAULTS, L)
print(f"w0    = {fam.w0}")
print(f"w_inf = {fam.w_inf}")

report = spectrum.discontinuity_probe(L, N, DEFAULTS)
for row in report["levels"]:
    print(f"l={row['l']}  w_l={row['w']}  |w_l - w_inf|={row['distance_to_w_inf']:.4f}  H_N(w_l) <= {row['H_upper']:.4f}")
print(f"H_N(w_inf) = {report['H_w_inf']:.12f}   log 2 = {math.log(2):.12f}")
print(f"gap = {report['gap']:.4f}")
