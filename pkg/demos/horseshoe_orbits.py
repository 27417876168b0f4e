"""Build the stage-2 horseshoe and compare orbit exponents with the symbolic potential."""
from horsespec import horseshoe
from horsespec.construction import DEFAULTS

stage = horseshoe.build_stage(DEFAULTS, 2)
for r in stage.retries:
    print(f"shrank x_scale {r['x_scale']:.3g} -> {r['new_x_scale']:.3g}")
for lvl in stage.summary()["levels"]:
    print(f"level {lvl['level']}: {lvl['surgeries']} surgeries, gamma={lvl['gamma']:.3e}, C2={lvl['C2']:.2e} < {lvl['budget']:.2e}")

for word in ("2", "01", "112", "1112", "0112"):
    fix = horseshoe.locate_periodic(stage, word)
    e = horseshoe.cocycle_exponents(stage, fix)
    print(f"O({word}): exponents {e}, clearance {fix.core_clearance:.2e}")

rep = horseshoe.verify_phi_L(stage, 5)
print(f"{rep['itineraries']} itineraries checked, passed={rep['passed']}, worst deviation {rep['max_point_deviation']:.1e}")
