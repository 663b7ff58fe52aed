"""Variable templates, piecewise-LQR partitions and the resulting control law.

A template places the entries of a variable vector ``v`` into structured
continuous-time dynamics ``x' = A_v x + B_v u``. Every template here is
affine in ``v`` once the partition (and hence the linearization point) is
fixed, so each one is described by a constant part plus one unit
perturbation per variable. The same decomposition feeds the gain
sensitivities used by the learner.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
import math

import numpy as np

from .errors import DimensionError, InputError
from .linalg import as_matrix

__all__ = [
    "Task",
    "Template",
    "VariableVector",
    "LqrSpec",
    "PartitionDecision",
    "CostConfig",
    "get_template",
    "two_group_template",
    "build_dynamics",
    "select_partition",
    "region_decisions",
    "state_error",
    "lqr_action",
    "map_action",
    "wrap_angle",
]

PENDULUM_D0_MIN = 1e-2


class Task(str, Enum):
    CARTPOLE = "cartpole"
    MOUNTAINCAR = "mountaincar"
    PENDULUM = "pendulum"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InputError(f"unknown task {value!r}") from None


def wrap_angle(theta):
    """Wrap an angle to the half-open interval (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class Template:
    """Structural description of a family of LQR dynamics.

    ``periodic`` lists state coordinates that are angles; their errors are
    wrapped to (-pi, pi]. ``lower_bounds`` holds ``(index, floor)`` pairs for
    variables that only make sense above a floor; learning projects onto
    them.
    """

    name: str
    n: int
    m: int
    variable_names: tuple
    partitions: int = 1
    periodic: tuple = ()
    chains: tuple = ()
    lower_bounds: tuple = ()

    @property
    def d(self):
        return len(self.variable_names)


@lru_cache(maxsize=None)
def two_group_template(k1, k2):
    """Template with two integrator chains of orders ``k1`` and ``k2``.

    Rows that express "this state is the derivative of the previous one" are
    unit rows; the last row of each chain is free (``n`` unknowns each) and
    each chain's last row receives one input gain. Variable order is the
    first free row, the second free row, then the two input gains.
    """
    if k1 < 1 or k2 < 1:
        raise InputError("chain orders must be positive")
    n = k1 + k2
    names = tuple(f"a{i}" for i in range(2 * n)) + ("b0", "b1")
    name = "cartpole" if (k1, k2) == (2, 2) else f"two_group_{k1}_{k2}"
    return Template(name=name, n=n, m=1, variable_names=names, chains=(k1, k2))


_TEMPLATES = {
    Task.CARTPOLE: two_group_template(2, 2),
    Task.MOUNTAINCAR: Template(
        name="mountaincar", n=2, m=1,
        variable_names=("a0", "a1", "b0", "c0"), partitions=2,
    ),
    Task.PENDULUM: Template(
        name="pendulum", n=2, m=1,
        variable_names=("a0", "a1", "b0", "c0", "d0"), partitions=4, periodic=(0,),
        # d0 scales the swing-up speed sqrt(d0 (1 - cos theta)); at d0 <= 0 both
        # the speed and its gradient vanish, so learning could never leave
        lower_bounds=((4, PENDULUM_D0_MIN),),
    ),
}


def get_template(template_id):
    """Look up a template by task name, ``Task`` or ``Template`` instance.

    Generic two-group templates are addressed as ``"two_group_<k1>_<k2>"``.
    """
    if isinstance(template_id, Template):
        return template_id
    if isinstance(template_id, str) and template_id.startswith("two_group_"):
        try:
            k1, k2 = (int(s) for s in template_id[len("two_group_"):].split("_"))
        except ValueError:
            raise InputError(f"bad template id {template_id!r}") from None
        return two_group_template(k1, k2)
    return _TEMPLATES[Task.parse(template_id)]


@dataclass(frozen=True)
class VariableVector:
    """The unknown variables of one template."""

    template_id: str
    values: np.ndarray

    def __post_init__(self):
        tmpl = get_template(self.template_id)
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size != tmpl.d:
            raise DimensionError(
                f"{tmpl.name} expects {tmpl.d} variables, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise InputError("variable vector has non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "template_id", tmpl.name)
        object.__setattr__(self, "values", vals)

    @property
    def template(self):
        return get_template(self.template_id)

    def replace(self, values):
        return VariableVector(self.template_id, values)

    def as_dict(self):
        return dict(zip(self.template.variable_names, self.values.tolist()))


@dataclass(frozen=True)
class PartitionDecision:
    """Which local LQR is active, and about which point.

    Attributes
    ----------
    template_id : str
    partition_id : int
        1-based region index.
    target : ndarray
        Target state ``x*`` in task coordinates.
    anchor : float
        Linearization point that enters the template (``p*`` for the car,
        ``theta*`` for the pendulum, 0 otherwise).
    target_jacobian : ndarray, shape (n, d)
        Derivative of ``target`` with respect to the variables.
    """

    template_id: str
    partition_id: int
    target: np.ndarray
    anchor: float = 0.0
    target_jacobian: np.ndarray = None

    @property
    def key(self):
        return (self.partition_id, self.anchor)


@dataclass(frozen=True)
class CostConfig:
    """Quadratic costs: ``Qbar = diag(q_diag)`` and ``R = rho * I``."""

    q_diag: tuple
    rho: float = 0.1

    def __post_init__(self):
        if any(q < 0 for q in self.q_diag):
            raise InputError("state cost diagonal must be nonnegative")
        if not self.rho > 0:
            raise InputError("rho must be positive")

    def matrices(self, m):
        return np.diag(np.asarray(self.q_diag, dtype=float)), self.rho * np.eye(m)

    def scaled(self, alpha):
        return CostConfig(tuple(alpha * q for q in self.q_diag), alpha * self.rho)


def default_cost(template):
    return CostConfig(q_diag=(1.0,) * template.n, rho=0.1)


@dataclass(frozen=True)
class LqrSpec:
    """One LQR instance in error coordinates ``e = x - target``.

    The plant input is ``u``; the LQR designs ``w = -K e`` and the applied
    control is ``u = w + feedforward``.
    """

    A: np.ndarray
    B: np.ndarray
    Qbar: np.ndarray
    R: np.ndarray
    target: np.ndarray
    feedforward: np.ndarray
    periodic: tuple = field(default=())


# -- template structure -----------------------------------------------------------

def affine_structure(template, decision):
    """Constant and per-variable parts of ``A``, ``B`` and the feedforward.

    Returns ``(A0, dA, B0, dB, f0, df)`` with shapes (n, n), (d, n, n), (n, m),
    (d, n, m), (m,), (d, m) such that ``A = A0 + sum_j v_j dA[j]`` and so on.
    """
    template = get_template(template)
    n, m, d = template.n, template.m, template.d
    A0 = np.zeros((n, n))
    dA = np.zeros((d, n, n))
    B0 = np.zeros((n, m))
    dB = np.zeros((d, n, m))
    f0 = np.zeros(m)
    df = np.zeros((d, m))
    if template.chains:
        k1, k2 = template.chains
        free_rows = (k1 - 1, n - 1)
        for i in range(n):
            if i not in free_rows:
                A0[i, i + 1] = 1.0
        for g, row in enumerate(free_rows):
            for col in range(n):
                dA[g * n + col, row, col] = 1.0
            dB[2 * n + g, row, 0] = 1.0
    elif template.name == "mountaincar":
        p_star = decision.anchor
        A0[0, 1] = 1.0
        dA[0, 1, 0] = math.sin(3.0 * p_star)
        dA[1, 1, 1] = 1.0
        dB[2, 1, 0] = 1.0
        df[3, 0] = math.cos(3.0 * p_star)
    elif template.name == "pendulum":
        th_star = decision.anchor
        A0[0, 1] = 1.0
        dA[0, 1, 0] = math.cos(th_star)
        dA[1, 1, 1] = 1.0
        dB[2, 1, 0] = 1.0
        df[3, 0] = -math.sin(th_star)
    else:  # pragma: no cover - every registered template is handled above
        raise InputError(f"no structure for template {template.name}")
    return A0, dA, B0, dB, f0, df


def build_dynamics(v, decision, cost=None):
    """Place ``v`` into its template and return the local :class:`LqrSpec`.

    Parameters
    ----------
    v : VariableVector
    decision : PartitionDecision
        Active region; must belong to the same template.
    cost : CostConfig, optional
        Defaults to ``Qbar = I`` and ``R = 0.1 I``.
    """
    template = v.template
    if decision.template_id != template.name:
        raise InputError(
            f"decision for {decision.template_id!r} used with template {template.name!r}")
    if not 1 <= decision.partition_id <= template.partitions:
        raise InputError(f"partition {decision.partition_id} out of range for {template.name}")
    cost = cost or default_cost(template)
    if len(cost.q_diag) != template.n:
        raise DimensionError(f"cost diagonal must have length {template.n}")
    A0, dA, B0, dB, f0, df = affine_structure(template, decision)
    vals = v.values
    A = A0 + np.tensordot(vals, dA, axes=1)
    B = B0 + np.tensordot(vals, dB, axes=1)
    ff = f0 + vals @ df
    Qbar, R = cost.matrices(template.m)
    return LqrSpec(A=A, B=B, Qbar=Qbar, R=R,
                   target=np.array(decision.target, dtype=float),
                   feedforward=ff, periodic=template.periodic)


# -- partitions -------------------------------------------------------------------

MOUNTAINCAR_LEFT = -1.2
MOUNTAINCAR_RIGHT = 0.6

PENDULUM_UPRIGHT = 1
PENDULUM_RIGHT = 2
PENDULUM_LEFT = 3
PENDULUM_BOTTOM = 4


def _pendulum_decision(x, d0, d):
    theta = wrap_angle(float(x[0]))
    omega = float(x[1])
    quarter = math.pi / 4.0
    if abs(theta) <= quarter:
        pid, th_star, direction = PENDULUM_UPRIGHT, 0.0, 0.0
    elif quarter < theta <= 3.0 * quarter:
        pid, th_star, direction = PENDULUM_RIGHT, quarter, -1.0
    elif -3.0 * quarter <= theta < -quarter:
        pid, th_star, direction = PENDULUM_LEFT, -quarter, 1.0
    elif omega >= 0.0:
        # Counter-clockwise from the bottom wraps through pi to -3pi/4.
        pid, th_star, direction = PENDULUM_BOTTOM, -3.0 * quarter, 1.0
    else:
        pid, th_star, direction = PENDULUM_BOTTOM, 3.0 * quarter, -1.0
    jac = np.zeros((2, d))
    height = 1.0 - math.cos(theta)
    if direction and d0 > 0.0:
        speed = math.sqrt(d0 * height)
        jac[1, 4] = direction * 0.5 * math.sqrt(height / d0)
    else:
        speed = 0.0
    target = np.array([th_star, direction * speed])
    return PartitionDecision("pendulum", pid, target, th_star, jac)


def select_partition(task, x, v):
    """Route a state to its local LQR.

    * cartpole: one region, target at the origin.
    * mountaincar: region 1 (target ``[-1.2, 0]``) when the velocity is
      negative, region 2 (target ``[0.6, 0]``) otherwise.
    * pendulum: four angular regions split at +-pi/4 and +-3pi/4. The
      upright region targets ``[0, 0]``; the side regions target the
      adjacent +-pi/4 boundary while moving towards upright; the bottom
      region targets the +-3pi/4 boundary ahead in the direction of
      rotation (zero velocity counts as counter-clockwise). The target
      speed is ``sqrt(d0 (1 - cos theta))`` taken from ``v``.
    """
    task = Task.parse(task)
    x = np.asarray(x, dtype=float)
    d = get_template(task).d
    if task is Task.CARTPOLE:
        return PartitionDecision("cartpole", 1, np.zeros(4), 0.0, np.zeros((4, d)))
    if task is Task.MOUNTAINCAR:
        if x[1] < 0.0:
            return PartitionDecision("mountaincar", 1, np.array([MOUNTAINCAR_LEFT, 0.0]),
                                     MOUNTAINCAR_LEFT, np.zeros((2, d)))
        return PartitionDecision("mountaincar", 2, np.array([MOUNTAINCAR_RIGHT, 0.0]),
                                 MOUNTAINCAR_RIGHT, np.zeros((2, d)))
    return _pendulum_decision(x, float(v.values[4]), d)


def region_decisions(template):
    """One representative decision per distinct local model of a template.

    ``A`` and ``B`` depend on the region only through its anchor, so these
    cover every model the controller can build (targets are left at zero).
    """
    template = get_template(template)
    if template.name == "mountaincar":
        anchors = [(1, MOUNTAINCAR_LEFT), (2, MOUNTAINCAR_RIGHT)]
    elif template.name == "pendulum":
        q = math.pi / 4.0
        anchors = [(PENDULUM_UPRIGHT, 0.0), (PENDULUM_RIGHT, q), (PENDULUM_LEFT, -q),
                   (PENDULUM_BOTTOM, 3.0 * q)]
    else:
        anchors = [(1, 0.0)]
    return [PartitionDecision(template.name, pid, np.zeros(template.n), anchor)
            for pid, anchor in anchors]


# -- control law ------------------------------------------------------------------

def state_error(x, target, periodic=()):
    e = np.asarray(x, dtype=float) - target
    for i in periodic:
        e[i] = wrap_angle(e[i])
    return e


def lqr_action(spec, sol, x):
    """Control ``u = -K (x - x*) + feedforward`` for one local LQR."""
    x = np.asarray(x, dtype=float)
    if x.shape != spec.target.shape:
        raise DimensionError(f"state has shape {x.shape}, expected {spec.target.shape}")
    if sol.K.shape != (spec.B.shape[1], spec.A.shape[0]):
        raise DimensionError("gain does not match the LQR dimensions")
    return -sol.K @ state_error(x, spec.target, spec.periodic) + spec.feedforward


def map_action(u, task):
    """Convert a raw control vector into an environment action.

    cartpole pushes right (1) when ``u >= 0`` and left (0) otherwise; the
    continuous tasks clip to their torque/force limits.
    """
    task = Task.parse(task)
    u = np.asarray(u, dtype=float).reshape(-1)
    if task is Task.CARTPOLE:
        return 1 if u[0] >= 0.0 else 0
    limit = 1.0 if task is Task.MOUNTAINCAR else 2.0
    return np.clip(u, -limit, limit)
