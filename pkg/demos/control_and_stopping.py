"""Optimal control with stopping: the value bounds every strategy and the
feedback built from the estimated gradient attains it.

The state is a driftless geometric process whose drift we steer with
a in [-1, 1] at running cost 10 a^2; stopping pays (100 - x)^+.
"""
from rbsde.analysis import SolverConfig
from rbsde.control import verify_fundamental_relation
from rbsde.presets import control_stop

pre = control_stop()
cfg = SolverConfig(n_steps=pre.n_steps, n_paths=20_000, basis=pre.basis)
rep = verify_fundamental_relation(pre.model, pre.control, pre.problem, 0.0, pre.x0, 10, 0, cfg)

print(f"value u(0, 100) = {rep['u']:.4f} +- {rep['u_se']:.4f}\n")
print("trial  stopping  J         u - J     passes")
for t in rep["trials"]:
    print(f"{t['trial']:5d}  {t['stopping']:8s}  {t['J']:8.4f}  {t['slack']:8.4f}  {t['pass']}")

cl = rep["closed_loop"]
print(f"\nclosed loop J = {cl['J']:.4f} +- {cl['se']:.4f} "
      f"(relative gap {cl['relative_gap']:.2%}, passes: {cl['pass']})")
