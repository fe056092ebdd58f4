# The comparison machinery only owes you anything when the data behaves:
# bounded growth in the Hamiltonian, costs that stay coercive and
# strictly subadditive. The audits sample these margins so a bad setup
# fails loudly before any solve.

from qvilab import expr as ex
from qvilab.assumptions import SamplerSpec, audit_H1, audit_H2
from qvilab.core import AssumptionConstants, Cone, ImpulseProblem


def tidy(value):
    if isinstance(value, list):
        return [round(float(v), 3) for v in value]
    if isinstance(value, float):
        return round(value, 3)
    return value


def show(report, title):
    print(title)
    for check in report.checks:
        tag = "pass" if check.passed else "FAIL"
        where = {k: tidy(v) for k, v in check.worst_point.items()}
        print(f"  {tag}  {check.name:<24} worst margin "
              f"{check.worst_margin:+.3e}  at {where}")
    print()


problem = ImpulseProblem(
    n=1, T=1.0,
    H=ex.parse("-p1", ("t", "x1", "p1")),
    h=ex.parse("x1*exp(-x1)", ("x1",)),
    ell=ex.parse("0.05*(1 + xi1)", ("t", "x1", "xi1")),
    cone=Cone.orthant(1),
)
constants = AssumptionConstants(L=1.0, mu=0.0, h0=3.0, ell0=0.04,
                                alpha=0.01, beta=0.5, delta0=0.05,
                                C=16.0, gamma=0.0, kappa=0.25)
spec = SamplerSpec(x_min=(-1.0,), x_max=(3.0,))

show(audit_H1(problem, constants, spec), "well-posed data:")
show(audit_H2(problem, constants, spec), "cost structure:")

# proportional costs sit exactly on the declared subadditivity margin:
# splitting one jump into two pays the base cost twice, saving l0
print("splitting saves exactly the base cost, so with delta0 = l0 the")
print("subadditivity margin is zero to rounding, and any delta0 above")
print("l0 is unachievable:")
tight = AssumptionConstants(L=1.0, mu=0.0, h0=3.0, ell0=0.04, alpha=0.01,
                            beta=0.5, delta0=0.06, C=16.0, gamma=0.0,
                            kappa=0.25)
report = audit_H2(problem, tight, spec)
show(report, "  with delta0 = 0.06 > l0:")

# a Hamiltonian with superlinear growth in p cannot be compared at all
wild = ImpulseProblem(
    n=1, T=1.0,
    H=ex.parse("3*p1*x1", ("t", "x1", "p1")),
    h=ex.parse("x1*exp(-x1)", ("x1",)),
    ell=ex.parse("0.05*(1 + xi1)", ("t", "x1", "xi1")),
    cone=Cone.orthant(1),
)
show(audit_H1(wild, constants, spec), "growth violation is flagged:")
