"""Entropy spectrum along the segment from the measure of maximal entropy to w_inf."""
import numpy as np

from horsespec import construction, spectrum, thermo
from horsespec.construction import DEFAULTS
from horsespec.spectrum import SpectrumQuery

N = 6
start = thermo.equilibrium(0, 0, DEFAULTS, N).rv
end = construction.make_vertices(DEFAULTS, 1).w_inf
for s in np.linspace(0, 1, 11):
    w = (1 - s) * start + s * end
    r = spectrum.entropy_spectrum_dual(SpectrumQuery(tuple(w), N))
    print(f"s={s:.1f}  w=({w[0]:.4f}, {w[1]:.4f})  H={r.value:.6f}  [{r.status}]")
