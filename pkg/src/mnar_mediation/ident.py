"""Model-free identification for discrete mediator/outcome tables.

Works on observable-cell probability tables: the complete-case block
P(M=m, Y=y, both observed | stratum) plus the three aggregate blocks in which
the mediator and/or outcome is marginalized out.  Solving the per-mechanism
linear systems yields the conditional missingness odds of the mediator (and,
under A3, of the outcome), from which the full joint P(M, Y | stratum) is
reconstructed.  Everything runs in exact rational arithmetic when the table
is exact, and in floating point with SVD rank diagnostics otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from .core import Dataset, MnarMechanism

_RANK_RTOL = 1e-8  # singular values below rtol * largest count as zero


class IdentificationError(ValueError):
    pass


class NotIdentifiedError(IdentificationError):
    def __init__(self, message: str, rank: int | None = None,
                 required_rank: int | None = None):
        super().__init__(message)
        self.rank = rank
        self.required_rank = required_rank


class PositivityError(IdentificationError):
    pass


@dataclass(frozen=True)
class ObservableTable:
    """Observable-cell probabilities for one (treatment, covariate) stratum.

    ``p_complete[m][y]``  P(M=m, Y=y, mediator observed, outcome observed)
    ``p_m_missing[y]``    P(Y=y, mediator missing, outcome observed)
    ``p_y_missing[m]``    P(M=m, mediator observed, outcome missing)
    ``p_both_missing``    P(mediator missing, outcome missing)

    Tables from data with a fully observed outcome put all mass in the first
    two blocks.  Entries are ``Fraction`` when ``exact`` else ``float``.
    """

    J: int
    K: int
    p_complete: tuple
    p_m_missing: tuple
    p_y_missing: tuple
    p_both_missing: object
    exact: bool = True
    stratum: tuple = ()

    def __post_init__(self):
        zero = Fraction(0) if self.exact else 0.0
        total = self.p_both_missing
        for m in range(self.J):
            total += self.p_y_missing[m]
            for y in range(self.K):
                total += self.p_complete[m][y]
                if self.p_complete[m][y] < zero:
                    raise IdentificationError("negative cell probability")
        for y in range(self.K):
            total += self.p_m_missing[y]
        if self.exact:
            if total != 1:
                raise IdentificationError(f"cells sum to {total}, expected 1")
        elif abs(total - 1.0) > 1e-9:
            raise IdentificationError(f"cells sum to {total}, expected 1")

    def complete_matrix(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.p_complete])


@dataclass
class OddsSolution:
    """Solved missingness odds P(missing | value)/P(observed | value).

    ``zeta[m]`` are the mediator-missingness odds; ``eta[y]`` the outcome
    odds (present under A3 only).  Negative solved odds signal mechanism
    misspecification or sampling noise; they are reported via ``warnings``
    rather than clipped.
    """

    mechanism: str
    zeta: list
    eta: list | None = None
    residual: float = 0.0
    condition: float = float("inf")
    rank: int = 0
    warnings: list = field(default_factory=list)

    @property
    def rm_observed_prob(self) -> list:
        return [_one(z) / (_one(z) + z) for z in self.zeta]

    @property
    def ry_observed_prob(self) -> list | None:
        if self.eta is None:
            return None
        return [_one(e) / (_one(e) + e) for e in self.eta]

    @property
    def admissible(self) -> bool:
        vals = list(self.zeta) + (list(self.eta) if self.eta else [])
        return all(v >= 0 for v in vals)


@dataclass
class JointRecovery:
    """Recovered joint P(M, Y | stratum) with its identification check.

    ``total_mass`` should be exactly 1 for exact admissible input; deviation
    (or a total of recovered mediator-marginal mass different from 1) flags
    that the observables did not arise from the assumed mechanism.
    """

    joint: list
    y_given_m: list
    m_marginal: list
    rm_observed_prob: list
    ry_observed_prob: list | None
    total_mass: object
    proper: bool


@dataclass
class RankDiagnostic:
    mechanism: str
    shape: tuple[int, int]
    required_rank: int
    rank: int
    smallest_singular_value: float
    passed: bool
    reason: str = ""


def _one(v):
    return Fraction(1) if isinstance(v, Fraction) else 1.0


# ---------------------------------------------------------------------------
# Empirical tables


def tabulate(ds: Dataset, stratum: tuple, exact: bool = True) -> ObservableTable:
    """Empirical observable-cell frequencies for one (t, x-values) stratum.

    ``stratum`` is ``(t,)`` for covariate-free data or ``(t, x_tuple)``.
    """
    if not ds.mediator_kind.is_discrete or not ds.outcome_kind.is_discrete:
        raise IdentificationError(
            "observable tables require categorical mediator and outcome")
    t = stratum[0]
    xkey = tuple(stratum[1]) if len(stratum) > 1 else None
    J = ds.mediator_kind.n_levels
    K = ds.outcome_kind.n_levels
    comp = [[0] * K for _ in range(J)]
    m_miss = [0] * K
    y_miss = [0] * J
    both = 0
    n = 0
    for rec in ds.records:
        if rec.t != t or (xkey is not None and tuple(rec.x) != xkey):
            continue
        n += 1
        if rec.r_m and rec.r_y:
            comp[rec.m][rec.y] += 1
        elif rec.r_y:
            m_miss[rec.y] += 1
        elif rec.r_m:
            y_miss[rec.m] += 1
        else:
            both += 1
    if n == 0:
        raise IdentificationError(f"empty stratum {stratum!r}")
    conv = (lambda c: Fraction(c, n)) if exact else (lambda c: c / n)
    return ObservableTable(
        J=J, K=K,
        p_complete=tuple(tuple(conv(c) for c in row) for row in comp),
        p_m_missing=tuple(conv(c) for c in m_miss),
        p_y_missing=tuple(conv(c) for c in y_miss),
        p_both_missing=conv(both), exact=exact, stratum=stratum)


# ---------------------------------------------------------------------------
# Exact linear algebra over Fractions


def _frac_rank(A: list[list[Fraction]]) -> int:
    M = [row[:] for row in A]
    rows, cols = len(M), len(M[0]) if M else 0
    rank = 0
    r = 0
    for c in range(cols):
        pivot = next((i for i in range(r, rows) if M[i][c] != 0), None)
        if pivot is None:
            continue
        M[r], M[pivot] = M[pivot], M[r]
        inv = M[r][c]
        M[r] = [v / inv for v in M[r]]
        for i in range(rows):
            if i != r and M[i][c] != 0:
                f = M[i][c]
                M[i] = [vi - f * vr for vi, vr in zip(M[i], M[r])]
        r += 1
        rank += 1
        if r == rows:
            break
    return rank


def _frac_solve(A: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    """Solve a square exact system by Gauss-Jordan; raises on singularity."""
    n = len(A)
    M = [row[:] + [bi] for row, bi in zip(A, b)]
    for c in range(n):
        pivot = next((i for i in range(c, n) if M[i][c] != 0), None)
        if pivot is None:
            raise NotIdentifiedError("exact system is singular")
        M[c], M[pivot] = M[pivot], M[c]
        inv = M[c][c]
        M[c] = [v / inv for v in M[c]]
        for i in range(n):
            if i != c and M[i][c] != 0:
                f = M[i][c]
                M[i] = [vi - f * vc for vi, vc in zip(M[i], M[c])]
    return [M[i][n] for i in range(n)]


def _lstsq_exact(A: list[list[Fraction]], b: list[Fraction]) -> tuple[list[Fraction], Fraction]:
    """Least squares via exact normal equations; returns (solution, residual SS)."""
    cols = len(A[0])
    AtA = [[sum(A[i][a] * A[i][c] for i in range(len(A))) for c in range(cols)]
           for a in range(cols)]
    Atb = [sum(A[i][a] * b[i] for i in range(len(A))) for a in range(cols)]
    sol = _frac_solve(AtA, Atb)
    resid = Fraction(0)
    for i in range(len(A)):
        r = sum(A[i][c] * sol[c] for c in range(cols)) - b[i]
        resid += r * r
    return sol, resid


def _solve_system(A, b, exact: bool):
    """Solve/least-squares the stated system; returns (sol, residual, rank, cond)."""
    nrow, ncol = len(A), len(A[0])
    if exact:
        rank = _frac_rank(A)
        if rank < ncol:
            raise NotIdentifiedError(
                f"system matrix has rank {rank} < {ncol} unknowns",
                rank=rank, required_rank=ncol)
        sol, rss = _lstsq_exact(A, b)
        Af = np.array([[float(v) for v in row] for row in A])
        sv = np.linalg.svd(Af, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        return sol, rss, rank, cond
    Af = np.asarray(A, dtype=float)
    bf = np.asarray(b, dtype=float)
    sv = np.linalg.svd(Af, compute_uv=False)
    rank = int(np.sum(sv > _RANK_RTOL * sv[0])) if sv[0] > 0 else 0
    if rank < ncol:
        raise NotIdentifiedError(
            f"system matrix has numeric rank {rank} < {ncol} unknowns",
            rank=rank, required_rank=ncol)
    sol, rss, *_ = np.linalg.lstsq(Af, bf, rcond=None)
    resid = float(np.sum((Af @ sol - bf) ** 2))
    cond = float(sv[0] / sv[rank - 1]) if sv[rank - 1] > 0 else float("inf")
    return list(sol), resid, rank, cond


# ---------------------------------------------------------------------------
# Identification systems


def _a2_prefactor(table: ObservableTable):
    """P(outcome observed | mediator missing) / P(outcome observed | mediator observed)."""
    m_miss_total = sum(table.p_m_missing)
    comp_total = sum(sum(row) for row in table.p_complete)
    y_miss_total = sum(table.p_y_missing)
    den0 = m_miss_total + table.p_both_missing
    den1 = comp_total + y_miss_total
    if den0 == 0:
        # no mediator missingness at all: the system is trivially zero
        return _one(comp_total)
    if den1 == 0 or comp_total == 0:
        raise PositivityError("a mediator-missingness arm has no mass")
    return (m_miss_total / den0) / (comp_total / den1)


def solve_identification(table: ObservableTable, mech: MnarMechanism) -> OddsSolution:
    """Solve the mechanism's linear system(s) for the missingness odds.

    The unknowns are the per-level mediator odds; each observed outcome level
    contributes one equation with the complete-case cells as coefficients.
    A2 rescales the right-hand side by the observed-outcome odds ratio across
    mediator-missingness arms; A4 appends one extra equation from the
    both-missing cell; A3 additionally solves the transposed system for the
    outcome-missingness odds.  Overdetermined systems are solved by least
    squares with the residual reported.
    """
    J, K = table.J, table.K
    if mech.tag in ("MCAR", "MAR"):
        raise IdentificationError("ignorable mechanisms need no odds solving")
    if mech.tag == "A3" and J != K:
        raise NotIdentifiedError(
            f"mechanism A3 requires equal level counts, got J={J}, K={K}",
            rank=min(J, K), required_rank=J)
    A = [[table.p_complete[m][y] for m in range(J)] for y in range(K)]
    b = list(table.p_m_missing)
    if mech.tag == "A2":
        c = _a2_prefactor(table)
        b = [v / c for v in b]
    if mech.tag == "A4":
        A.append([table.p_y_missing[m] for m in range(J)])
        b.append(table.p_both_missing)
    zeta, resid, rank, cond = _solve_system(A, b, table.exact)
    sol = OddsSolution(mechanism=mech.tag, zeta=zeta, residual=resid,
                       rank=rank, condition=cond)
    if mech.tag == "A3":
        At = [[table.p_complete[m][y] for y in range(K)] for m in range(J)]
        bt = list(table.p_y_missing)
        eta, resid2, _, _ = _solve_system(At, bt, table.exact)
        sol.eta = eta
        sol.residual = sol.residual + resid2
    for name, vals in (("zeta", sol.zeta), ("eta", sol.eta or [])):
        for i, v in enumerate(vals):
            if v < 0:
                sol.warnings.append(
                    f"{name}[{i}] = {float(v):.6g} < 0: inadmissible odds, "
                    "mechanism misspecification or sampling noise")
    return sol


def recover_joint(table: ObservableTable, sol: OddsSolution,
                  mech: MnarMechanism) -> JointRecovery:
    """Reconstruct P(M, Y | stratum) from the solved missingness odds.

    Under A1/A2/A4 the outcome model comes from complete cases and only the
    mediator marginal needs the odds; under A3 each complete-case cell is
    deflated by both observation probabilities.  The result records whether
    the reconstruction is a proper distribution (mass 1, nonnegative).
    """
    J, K = table.J, table.K
    if not sol.admissible:
        raise PositivityError("solution has negative odds; joint not recoverable")
    one = Fraction(1) if table.exact else 1.0
    rm_prob = [one / (one + z) for z in sol.zeta]
    if any(p == 0 for p in rm_prob):
        raise PositivityError("a mediator level is never observed")
    if mech.tag == "A3":
        if sol.eta is None:
            raise IdentificationError("A3 recovery needs the outcome odds")
        ry_prob = [one / (one + e) for e in sol.eta]
        if any(p == 0 for p in ry_prob):
            raise PositivityError("an outcome level is never observed")
        joint = [[table.p_complete[m][y] / (rm_prob[m] * ry_prob[y])
                  for y in range(K)] for m in range(J)]
        m_marg = [sum(joint[m]) for m in range(J)]
        y_given_m = [[joint[m][y] / m_marg[m] if m_marg[m] != 0 else one * 0
                      for y in range(K)] for m in range(J)]
    else:
        ry_prob = None
        y_given_m = []
        m_marg = []
        for m in range(J):
            row_total = sum(table.p_complete[m]) + table.p_y_missing[m]
            if row_total == 0:
                raise PositivityError(f"mediator level {m} has no observed mass")
            obs_y = sum(table.p_complete[m])
            if obs_y == 0:
                raise PositivityError(
                    f"mediator level {m} has no complete cases")
            y_given_m.append([table.p_complete[m][y] / obs_y for y in range(K)])
            m_marg.append(row_total / rm_prob[m])
        joint = [[m_marg[m] * y_given_m[m][y] for y in range(K)]
                 for m in range(J)]
    total = sum(m_marg)
    if table.exact:
        proper = total == 1 and all(v >= 0 for row in joint for v in row)
    else:
        proper = abs(float(total) - 1.0) <= 1e-10 and all(
            v >= -1e-12 for row in joint for v in row)
    return JointRecovery(joint=joint, y_given_m=y_given_m, m_marginal=m_marg,
                         rm_observed_prob=rm_prob, ry_observed_prob=ry_prob,
                         total_mass=total, proper=proper)


def rank_diagnostic(table: ObservableTable, mech: MnarMechanism) -> RankDiagnostic:
    """Numeric completeness check of the identification system matrix.

    The matrix has one row per mediator level; A4 appends the outcome-missing
    aggregate column, which is what lets a mediator effect on outcome
    missingness substitute for a missing outcome level.
    """
    J, K = table.J, table.K
    theta = table.complete_matrix()
    if mech.tag == "A4":
        theta = np.column_stack([theta, [float(v) for v in table.p_y_missing]])
    sv = np.linalg.svd(theta, compute_uv=False)
    smallest = float(sv[min(J, theta.shape[1]) - 1]) if theta.size else 0.0
    rank = int(np.sum(sv > _RANK_RTOL * sv[0])) if sv[0] > 0 else 0
    reason = ""
    if mech.tag == "A3" and J != K:
        passed = False
        reason = f"equal level counts required, got J={J}, K={K}"
    else:
        if theta.shape[1] < J:
            passed = False
            reason = (f"more mediator levels ({J}) than identifying columns "
                      f"({theta.shape[1]})")
        elif rank < J:
            passed = False
            reason = f"rank {rank} < {J} (mediator and outcome too weakly associated)"
        else:
            passed = True
    return RankDiagnostic(mechanism=mech.tag, shape=tuple(theta.shape),
                          required_rank=J, rank=rank,
                          smallest_singular_value=smallest, passed=passed,
                          reason=reason)


# ---------------------------------------------------------------------------
# Structural parameter sets, forward computation, counterexample verification


@dataclass(frozen=True)
class StructuralParams:
    """Exact structural probabilities for a discrete missingness graph.

    ``ry_dependence`` names what drives outcome missingness: "rm", "y", "m",
    "y_rm", "m_rm", "m_y", or None when the outcome is always observed.
    ``p_ry`` maps dependence argument tuples to P(outcome observed | args).
    """

    p_m: tuple
    p_y_given_m: tuple
    p_rm_given_m: tuple
    ry_dependence: str | None = None
    p_ry: dict = field(default_factory=dict)

    def __post_init__(self):
        if abs(sum(self.p_m) - 1) != 0 and float(sum(self.p_m)) != 1.0:
            raise IdentificationError("mediator marginal must sum to 1")
        for row in self.p_y_given_m:
            if sum(row) != 1:
                raise IdentificationError("outcome conditionals must sum to 1")
        for v in list(self.p_rm_given_m) + list(self.p_ry.values()):
            if not (0 <= v <= 1):
                raise IdentificationError("probabilities must lie in [0, 1]")

    @property
    def J(self) -> int:
        return len(self.p_m)

    @property
    def K(self) -> int:
        return len(self.p_y_given_m[0])

    def ry_prob(self, m: int, y: int, rm: int):
        dep = self.ry_dependence
        if dep is None:
            return Fraction(1)
        if dep == "rm":
            return self.p_ry[(rm,)]
        if dep == "y":
            return self.p_ry[(y,)]
        if dep == "m":
            return self.p_ry[(m,)]
        if dep == "y_rm":
            return self.p_ry[(y, rm)]
        if dep == "m_rm":
            return self.p_ry[(m, rm)]
        if dep == "m_y":
            return self.p_ry[(m, y)]
        raise IdentificationError(f"unknown ry dependence {dep!r}")

    def joint(self) -> list:
        return [[self.p_m[m] * self.p_y_given_m[m][y] for y in range(self.K)]
                for m in range(self.J)]


def forward_observables(params: StructuralParams,
                        stratum: tuple = ()) -> ObservableTable:
    """Exact observable table induced by a structural parameter set."""
    J, K = params.J, params.K
    comp = [[Fraction(0)] * K for _ in range(J)]
    m_miss = [Fraction(0)] * K
    y_miss = [Fraction(0)] * J
    both = Fraction(0)
    for m in range(J):
        for y in range(K):
            base = params.p_m[m] * params.p_y_given_m[m][y]
            for rm in (0, 1):
                p_rm = params.p_rm_given_m[m] if rm else 1 - params.p_rm_given_m[m]
                p_ry1 = params.ry_prob(m, y, rm)
                cell_obs = base * p_rm * p_ry1
                cell_mis = base * p_rm * (1 - p_ry1)
                if rm:
                    comp[m][y] += cell_obs
                    y_miss[m] += cell_mis
                else:
                    m_miss[y] += cell_obs
                    both += cell_mis
    return ObservableTable(J=J, K=K,
                           p_complete=tuple(tuple(r) for r in comp),
                           p_m_missing=tuple(m_miss),
                           p_y_missing=tuple(y_miss),
                           p_both_missing=both, exact=True, stratum=stratum)


# Outcome-missingness dependence of each shipped unidentifiable-case graph.
COUNTEREXAMPLE_GRAPHS = {
    "i": "y_rm",
    "ii": "m_rm",
    "iii": "m_y",
    "v": None,
    "vi": "y",
}


@dataclass(frozen=True)
class CounterexampleSpec:
    case: str
    description: str
    target: ObservableTable
    param_sets: tuple[StructuralParams, StructuralParams]


@dataclass
class CounterexampleReport:
    case: str
    observables_match: tuple[bool, bool]
    joints: tuple[list, list]
    joints_differ: bool

    @property
    def is_counterexample(self) -> bool:
        return all(self.observables_match) and self.joints_differ


def verify_counterexample(spec: CounterexampleSpec) -> CounterexampleReport:
    """Check that both parameter sets reproduce the target observables exactly
    while implying different joints.  A mismatch with the target raises (it
    means the spec was transcribed wrongly); equal joints are reported as
    "not a counterexample" rather than raised.
    """
    matches = []
    joints = []
    for idx, ps in enumerate(spec.param_sets):
        table = forward_observables(ps)
        same = (table.p_complete == spec.target.p_complete
                and table.p_m_missing == spec.target.p_m_missing
                and table.p_y_missing == spec.target.p_y_missing
                and table.p_both_missing == spec.target.p_both_missing)
        if not same:
            raise IdentificationError(
                f"case {spec.case}: parameter set {idx + 1} does not reproduce "
                "the target observables")
        matches.append(same)
        joints.append(ps.joint())
    differ = joints[0] != joints[1]
    return CounterexampleReport(case=spec.case,
                                observables_match=tuple(matches),
                                joints=tuple(joints), joints_differ=differ)


# ---------------------------------------------------------------------------
# Shipped counterexample data files


def _frac(s) -> Fraction:
    return Fraction(s) if isinstance(s, str) else Fraction(int(s))


def _params_from_json(obj: dict, dep: str | None) -> StructuralParams:
    p_ry = {}
    for key, val in obj.get("p_ry", {}).items():
        args = tuple(int(tok) for tok in key.split(","))
        p_ry[args] = _frac(val)
    return StructuralParams(
        p_m=tuple(_frac(v) for v in obj["p_m"]),
        p_y_given_m=tuple(tuple(_frac(v) for v in row)
                          for row in obj["p_y_given_m"]),
        p_rm_given_m=tuple(_frac(v) for v in obj["p_rm_given_m"]),
        ry_dependence=dep, p_ry=p_ry)


def load_counterexample(case: str) -> CounterexampleSpec:
    name = f"case_{case}.json"
    path = resources.files("mnar_mediation.data.counterexamples").joinpath(name)
    obj = json.loads(path.read_text())
    dep = COUNTEREXAMPLE_GRAPHS[obj["case"]]
    tgt = obj["target_observables"]
    target = ObservableTable(
        J=obj["mediator_levels"], K=obj["outcome_levels"],
        p_complete=tuple(tuple(_frac(v) for v in row) for row in tgt["complete"]),
        p_m_missing=tuple(_frac(v) for v in tgt["mediator_missing"]),
        p_y_missing=tuple(_frac(v) for v in tgt["outcome_missing"]),
        p_both_missing=_frac(tgt["both_missing"]), exact=True)
    sets = tuple(_params_from_json(ps, dep) for ps in obj["parameter_sets"])
    return CounterexampleSpec(case=obj["case"], description=obj["description"],
                              target=target, param_sets=sets)


def available_counterexamples() -> list[str]:
    return sorted(COUNTEREXAMPLE_GRAPHS)
