"""Monte Carlo size and power experiments for the two simulation designs.

Every replication draws from its own generator keyed by ``(seed, index)``
through ``SeedSequence`` spawn keys, so results do not depend on how
replications are split across worker processes. Within a replication the
draws are made in a fixed order before the instrument-strength scaling, so
designs that differ only in ``r`` share their random numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import IVDataset, LinearRestriction
from .errors import JiveInferError, NumericalError, SpecError
from .estimators import ObjectiveMoments, estimate_restricted, estimate_unrestricted
from .inference import Family, Reference, ar_statistic, linear_restriction_tests
from .distributions import normal_sf
from .kernels import Method, build_kernels
from .variance import VarianceMode

FAILURE_WARN_RATE = 0.01
ALL_METHODS = (Method.SJIVE, Method.HLIM, Method.JIVE1, Method.JIVE2)
SIZE_FAMILIES = (Family.D, Family.W1, Family.W2, Family.LM,
                 Family.DSTAR1, Family.DSTAR2, Family.W1STAR, Family.W2STAR, Family.LMSTAR)
AR_MODES = ("naive", "crossfit")


def replication_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for replication ``index`` of experiment ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def _integral(x: float, what: str) -> int:
    r = round(x)
    if abs(x - r) > 1e-9 or r < 1:
        raise SpecError(f"{what} = {x!r} must be a positive integer")
    return int(r)


@dataclass(frozen=True)
class DGP1Spec:
    """One endogenous regressor, five exogenous regressors that are also instruments,
    skedastic errors driven by the first instrument.
    """

    n: int = 200
    alpha: float = 0.05
    r: float = 32.0
    rho1: float = 0.3
    rho2: float = 0.2
    beta: float = 1.0
    g2: int = 5

    name = "dgp1"

    def __post_init__(self):
        k1 = _integral(self.alpha * self.n, "alpha * n")
        if k1 < 3:
            raise SpecError("DGP1 needs at least three excluded instruments")
        if self.g2 < 1:
            raise SpecError("g2 must be at least 1")
        if not -1.0 < self.rho1 < 1.0:
            raise SpecError("rho1 must lie in (-1, 1)")
        if self.r <= 0:
            raise SpecError("r must be positive")

    @property
    def k1(self) -> int:
        return _integral(self.alpha * self.n, "alpha * n")

    @property
    def k(self) -> int:
        return self.k1 + self.g2

    @property
    def g(self) -> int:
        return 1 + self.g2

    @property
    def pi(self) -> float:
        return math.sqrt((1.0 + 3.0 * self.rho1**2 * self.rho2**2) * self.r / self.k)

    @property
    def true_beta(self) -> np.ndarray:
        return np.concatenate(([self.beta], np.ones(self.g2)))

    def restriction(self, value: float | None = None) -> LinearRestriction:
        """``A = (1, 0, ..., 0)``, ``a = value`` (the true coefficient by default)."""
        return LinearRestriction.single(self.g, 0, self.beta if value is None else value)

    def ar_point(self, value: float | None = None) -> np.ndarray:
        """Full coefficient vector for AR under the null ``beta = value``."""
        b = self.true_beta.copy()
        b[0] = self.beta if value is None else value
        return b

    def null_value(self) -> float:
        return self.beta

    def draw(self, rng: np.random.Generator):
        n, k1, g2 = self.n, self.k1, self.g2
        z1 = rng.standard_normal(n)
        Zrest = rng.standard_normal((n, k1 - 3))
        X2rest = rng.standard_normal((n, g2 - 1))
        u1 = rng.standard_normal(n)
        u2 = rng.standard_normal(n)
        Z1 = np.column_stack([z1, z1**2, z1**3, Zrest])
        X2 = np.column_stack([np.ones(n), X2rest])
        Z = np.column_stack([Z1, X2])
        eps = (1.0 + self.rho2 * z1**2) * u2
        v = self.rho1 * eps + math.sqrt(1.0 - self.rho1**2) * u1
        x1 = self.pi * Z.sum(axis=1) + v
        X = np.column_stack([x1, X2])
        y = X @ self.true_beta + eps
        return y, X, Z

    def labels(self):
        x = ["x1"] + [f"x2_{j}" for j in range(1, self.g2 + 1)]
        z = [f"z1_{j}" for j in range(1, self.k1 + 1)] + x[1:]
        return x, z


@dataclass(frozen=True)
class DGP2Spec:
    """Two endogenous regressors with separate instrument blocks and two
    exogenous regressors (an intercept and a normal column) that enter the
    instrument set.
    """

    n: int = 200
    alpha: float = 0.05
    r: float = 0.1
    delta1: float = 0.5
    delta2: float = 0.4
    sigma_v: float = 0.3
    sigma_e: float = 0.3
    beta1: float = 0.3
    beta2: float = 0.7

    name = "dgp2"

    def __post_init__(self):
        _integral(self.alpha * self.n, "alpha * n")
        if not 0.0 < self.r < 1.0:
            raise SpecError("DGP2 needs 0 < r < 1")

    @property
    def kj(self) -> int:
        return _integral(self.alpha * self.n, "alpha * n")

    @property
    def k(self) -> int:
        return 2 * self.kj + 2

    @property
    def g(self) -> int:
        return 4

    @property
    def pi(self) -> float:
        return math.sqrt(self.r / (self.kj * (1.0 - self.r)))

    @property
    def true_beta(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2, 1.0, 1.0])

    def restriction(self, value: float | None = None) -> LinearRestriction:
        """``A = (1, 1, 0, 0)``, ``a = value`` (``beta1 + beta2`` by default)."""
        a = self.beta1 + self.beta2 if value is None else value
        return LinearRestriction(np.array([[1.0, 1.0, 0.0, 0.0]]), np.array([a]))

    def ar_point(self, value: float | None = None) -> np.ndarray:
        """Full coefficient vector for AR: ``beta1`` at truth, ``beta2 = value - beta1``."""
        b = self.true_beta.copy()
        if value is not None:
            b[1] = value - self.beta1
        return b

    def null_value(self) -> float:
        return self.beta1 + self.beta2

    def draw(self, rng: np.random.Generator):
        n, kj = self.n, self.kj
        Z1 = rng.standard_normal((n, kj))
        Z2 = rng.standard_normal((n, kj))
        x3 = rng.standard_normal(n)
        u = rng.standard_normal(n)
        e = self.sigma_e * rng.standard_normal(n)
        v1 = self.sigma_v * rng.standard_normal(n)
        v2 = self.sigma_v * rng.standard_normal(n)
        X3 = np.column_stack([np.ones(n), x3])
        eps = 0.2 * u + e
        x1 = self.pi * Z1.sum(axis=1) + self.delta1 * u + v1
        x2 = self.pi * Z2.sum(axis=1) + self.delta2 * u + v2
        X = np.column_stack([x1, x2, X3])
        Z = np.column_stack([Z1, Z2, X3])
        y = X @ self.true_beta + eps
        return y, X, Z

    def labels(self):
        x = ["x1", "x2", "const", "x3"]
        z = ([f"z1_{j}" for j in range(1, self.kj + 1)]
             + [f"z2_{j}" for j in range(1, self.kj + 1)] + ["const", "x3"])
        return x, z


def _dataset(spec, y, X, Z) -> IVDataset:
    xl, zl = spec.labels()
    return IVDataset(y, X, Z, tuple(xl), tuple(zl))


def gen_dgp1(spec: DGP1Spec, seed: int, index: int = 0) -> IVDataset:
    return _dataset(spec, *spec.draw(replication_rng(seed, index)))


def gen_dgp2(spec: DGP2Spec, seed: int, index: int = 0) -> IVDataset:
    return _dataset(spec, *spec.draw(replication_rng(seed, index)))


def generate(spec, seed: int, index: int = 0) -> IVDataset:
    return _dataset(spec, *spec.draw(replication_rng(seed, index)))


def spec_from_mapping(m: dict):
    """Build a design from ``{"dgp": "dgp1"|"dgp2", ...fields}``."""
    m = dict(m)
    kind = str(m.pop("dgp", "dgp1")).lower()
    cls = {"dgp1": DGP1Spec, "dgp2": DGP2Spec}.get(kind)
    if cls is None:
        raise SpecError(f"unknown design {kind!r}")
    allowed = set(cls.__dataclass_fields__)
    extra = set(m) - allowed
    if extra:
        raise SpecError(f"unknown {kind} fields: {sorted(extra)}")
    try:
        return cls(**m)
    except TypeError as exc:
        raise SpecError(str(exc)) from None


def spec_to_mapping(spec) -> dict:
    return {"dgp": spec.name, **asdict(spec)}


# --------------------------------------------------------------------------
# experiment cells

@dataclass(frozen=True)
class Cell:
    """Identifies one rejection counter."""

    method: str
    family: str
    reference: str
    variance_mode: str


def _cells(methods, families, variance_modes, ar_modes):
    cells = []
    for m in methods:
        for vm in variance_modes:
            for f in families:
                cells.append(Cell(m.value, f.value, f.default_reference.value, vm.value))
        if not m.is_ratio:
            for am in ar_modes:
                cells.append(Cell(m.value, Family.AR.value, Reference.STD_NORMAL.value, am))
    return cells


@dataclass(frozen=True)
class ExperimentConfig:
    spec: object
    methods: tuple = ALL_METHODS
    families: tuple = SIZE_FAMILIES
    variance_modes: tuple = (VarianceMode.PLUGIN,)
    ar_modes: tuple = AR_MODES
    nominal: float = 0.05
    grid: tuple | None = None
    ar_one_sided: bool = False

    def cells(self):
        return _cells(self.methods, self.families, self.variance_modes, self.ar_modes)

    def nulls(self):
        return self.grid if self.grid is not None else (self.spec.null_value(),)


def _ar_p(stat, one_sided):
    return normal_sf(stat) if one_sided else min(1.0, 2.0 * normal_sf(abs(stat)))


def replicate(cfg: ExperimentConfig, seed: int, index: int):
    """Run one replication. Returns ``(reject, valid)`` arrays of shape
    ``(len(nulls), len(cells))`` with 0/1 entries."""
    spec = cfg.spec
    cells = cfg.cells()
    col = {c: j for j, c in enumerate(cells)}
    nulls = cfg.nulls()
    reject = np.zeros((len(nulls), len(cells)), dtype=np.int64)
    valid = np.zeros_like(reject)
    y, X, Z = spec.draw(replication_rng(seed, index))
    try:
        kernels = build_kernels(Z, cfg.methods)
    except NumericalError:
        return reject, valid
    for m in cfg.methods:
        kern = kernels[m]
        try:
            mom = ObjectiveMoments(kern, y, X)
            est = estimate_unrestricted(kern, y, X, moments=mom)
        except NumericalError:
            est = None
        for i, b0 in enumerate(nulls):
            if est is not None:
                R = spec.restriction(b0)
                try:
                    rest = estimate_restricted(kern, y, X, R, moments=mom)
                except NumericalError:
                    rest = None
                if rest is not None:
                    for vm in cfg.variance_modes:
                        failures: dict = {}
                        reps = linear_restriction_tests(
                            kern, y, X, R, cfg.families, vm, moments=mom,
                            unrestricted=est, restricted=rest, failures=failures)
                        for rep in reps:
                            j = col[Cell(m.value, rep.family.value, rep.reference.value,
                                         vm.value)]
                            valid[i, j] = 1
                            reject[i, j] = int(rep.p_value < cfg.nominal)
            if not m.is_ratio:
                beta_ar = spec.ar_point(b0)
                for am in cfg.ar_modes:
                    try:
                        stat, _ = ar_statistic(kern, y, X, beta_ar, am)
                    except NumericalError:
                        continue
                    j = col[Cell(m.value, Family.AR.value, Reference.STD_NORMAL.value, am)]
                    valid[i, j] = 1
                    reject[i, j] = int(_ar_p(stat, cfg.ar_one_sided) < cfg.nominal)
    return reject, valid


def _run_chunk(args):
    cfg, seed, lo, hi = args
    shape = (len(cfg.nulls()), len(cfg.cells()))
    rej = np.zeros(shape, dtype=np.int64)
    val = np.zeros(shape, dtype=np.int64)
    for idx in range(lo, hi):
        r, v = replicate(cfg, seed, idx)
        rej += r
        val += v
    return rej, val


def default_workers() -> int:
    env = os.environ.get("JIVE_INFER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SpecError(f"JIVE_INFER_THREADS must be an integer, got {env!r}") from None
    return 1


def _chunks(reps: int, workers: int):
    size = max(1, min(250, -(-reps // (4 * workers))))
    return [(lo, min(reps, lo + size)) for lo in range(0, reps, size)]


def _counts(cfg: ExperimentConfig, reps: int, seed: int, workers: int):
    if reps < 1:
        raise SpecError("reps must be at least 1")
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise SpecError("workers must be at least 1")
    jobs = [(cfg, seed, lo, hi) for lo, hi in _chunks(reps, workers)]
    if workers == 1:
        results = map(_run_chunk, jobs)
        parts = list(results)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, jobs))
    rej = sum(p[0] for p in parts)
    val = sum(p[1] for p in parts)
    return rej, val


# --------------------------------------------------------------------------
# results

@dataclass(frozen=True)
class RejectionRow:
    design: dict
    null: float
    method: str
    family: str
    reference: str
    variance_mode: str
    nominal: float
    rejections: int
    valid: int
    reps: int
    seed: int

    @property
    def failures(self) -> int:
        return self.reps - self.valid

    @property
    def rate(self) -> float:
        return self.rejections / self.valid if self.valid else float("nan")

    @property
    def mcse(self) -> float:
        p = self.rate
        return math.sqrt(p * (1.0 - p) / self.valid) if self.valid else float("nan")

    @property
    def column(self) -> str:
        """Short label used in the printed tables."""
        if self.family == Family.AR.value:
            return "ARn" if self.variance_mode == "naive" else "ARcf"
        return {"Dstar1": "D*1", "Dstar2": "D*2", "LMstar": "LM*", "W1star": "W*1",
                "W2star": "W*2"}.get(self.family, self.family)


CSV_FIELDS = ("dgp", "n", "alpha", "r", "null", "method", "family", "reference",
              "variance_mode", "nominal", "rejections", "valid", "failures", "reps",
              "rate", "mcse", "seed")


@dataclass
class RejectionTable:
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def extend(self, other: "RejectionTable"):
        self.rows.extend(other.rows)
        self.warnings.extend(other.warnings)

    def lookup(self, method, family, *, variance_mode=None, null=None, **design):
        """The unique row matching the given keys (``design`` matches spec fields)."""
        method = Method.parse(method).value
        family = Family.parse(family).value if family not in ("ARn", "ARcf") else family
        hits = []
        for row in self.rows:
            if row.method != method:
                continue
            if family == "ARn":
                if row.family != "AR" or row.variance_mode != "naive":
                    continue
            elif family == "ARcf":
                if row.family != "AR" or row.variance_mode != "crossfit":
                    continue
            elif row.family != family:
                continue
            if variance_mode is not None and family not in ("ARn", "ARcf") \
                    and row.variance_mode != variance_mode:
                continue
            if null is not None and not math.isclose(row.null, null, abs_tol=1e-12):
                continue
            if any(not math.isclose(float(row.design.get(k)), float(v), abs_tol=1e-12)
                   for k, v in design.items()):
                continue
            hits.append(row)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {method}/{family} {design}")
        return hits[0]

    def _records(self):
        for r in self.rows:
            yield {
                "dgp": r.design["dgp"], "n": r.design["n"], "alpha": r.design["alpha"],
                "r": r.design["r"], "null": r.null, "method": r.method,
                "family": r.family, "reference": r.reference,
                "variance_mode": r.variance_mode, "nominal": r.nominal,
                "rejections": r.rejections, "valid": r.valid, "failures": r.failures,
                "reps": r.reps, "rate": r.rate, "mcse": r.mcse, "seed": r.seed,
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in self._records():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": list(self._records()), "warnings": self.warnings},
                          indent=2, sort_keys=True)

    def to_gnuplot(self) -> str:
        """Long format: one block per (design, method, family, variance mode)
        with ``null rate mcse`` lines, blocks separated by two blank lines."""
        groups: dict = {}
        for r in self.rows:
            key = (r.design["dgp"], r.design["alpha"], r.design["r"], r.method,
                   r.family, r.variance_mode)
            groups.setdefault(key, []).append(r)
        out = []
        for key, rows in groups.items():
            out.append("# " + " ".join(str(k) for k in key))
            out.append("# null rate mcse")
            for r in sorted(rows, key=lambda r: r.null):
                out.append(f"{r.null!r} {r.rate!r} {r.mcse!r}")
            out.append("\n")
        return "\n".join(out)

    def format_table(self, columns=("D", "W1", "LM", "D*1", "W*1", "LM*", "ARn", "ARcf"),
                     variance_mode="plugin") -> str:
        """Human-readable table: one line per (method, alpha, r, null)."""
        lines = []
        head = f"{'Method':<7}{'alpha':>6}{'r':>6}{'null':>7}" + "".join(
            f"{c:>7}" for c in columns)
        lines.append(head)
        lines.append("-" * len(head))
        order: dict = {}
        for r in self.rows:
            key = (r.method, r.design["alpha"], r.design["r"], r.null)
            order.setdefault(key, {})
            if r.family == "AR" or r.variance_mode == variance_mode:
                order[key][r.column] = r
        methods = [m.value for m in ALL_METHODS]
        keys = sorted(order, key=lambda k: (methods.index(k[0]), k[1], k[2], k[3]))
        for key in keys:
            cells = order[key]
            vals = "".join(
                f"{cells[c].rate:>7.3f}" if c in cells and cells[c].valid else f"{'':>7}"
                for c in columns)
            lines.append(f"{key[0]:<7}{key[1]:>6.2f}{_fmt_r(key[2]):>6}{key[3]:>7.3g}{vals}")
        if self.warnings:
            lines.append("")
            lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def _fmt_r(r):
    return f"{r:g}"


def _table(cfg: ExperimentConfig, reps, seed, rej, val) -> RejectionTable:
    design = spec_to_mapping(cfg.spec)
    table = RejectionTable()
    for i, b0 in enumerate(cfg.nulls()):
        for j, c in enumerate(cfg.cells()):
            table.rows.append(RejectionRow(
                design=design, null=float(b0), method=c.method, family=c.family,
                reference=c.reference, variance_mode=c.variance_mode,
                nominal=cfg.nominal, rejections=int(rej[i, j]), valid=int(val[i, j]),
                reps=reps, seed=int(seed)))
    worst: dict = {}
    for row in table.rows:
        worst[row.method] = max(worst.get(row.method, 0), row.failures)
    for m, f in worst.items():
        if f > FAILURE_WARN_RATE * reps:
            msg = (f"{cfg.spec.name} alpha={cfg.spec.alpha} r={cfg.spec.r}: {m} failed "
                   f"in {f} of {reps} replications")
            table.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return table


def _normalize(methods, families, variance_modes):
    methods = tuple(Method.parse(m) for m in methods)
    families = tuple(Family.parse(f) for f in families)
    if Family.AR in families:
        raise SpecError("AR columns are added automatically for JIVE1/JIVE2")
    vms = tuple(VarianceMode.parse(v) for v in variance_modes)
    return methods, families, vms


def run_size_experiment(
    dgp,
    methods=ALL_METHODS,
    families=SIZE_FAMILIES,
    reps: int = 5000,
    nominal: float = 0.05,
    seed: int = 0,
    workers: int | None = 1,
    *,
    variance_modes=(VarianceMode.PLUGIN,),
    ar_modes=AR_MODES,
    ar_one_sided: bool = False,
) -> RejectionTable:
    """Rejection rates under the null for one design."""
    methods, families, vms = _normalize(methods, families, variance_modes)
    cfg = ExperimentConfig(dgp, methods, families, vms, tuple(ar_modes), float(nominal),
                           None, ar_one_sided)
    rej, val = _counts(cfg, reps, seed, workers)
    return _table(cfg, reps, seed, rej, val)


def default_grid(spec, half_width: float = 0.5, points: int = 21) -> tuple:
    t = spec.null_value()
    return tuple(float(x) for x in np.linspace(t - half_width, t + half_width, points))


def run_power_curve(
    dgp,
    grid=None,
    methods=ALL_METHODS,
    families=SIZE_FAMILIES,
    reps: int = 1000,
    nominal: float = 0.05,
    seed: int = 0,
    workers: int | None = 1,
    *,
    variance_modes=(VarianceMode.PLUGIN,),
    ar_modes=AR_MODES,
    ar_one_sided: bool = False,
) -> RejectionTable:
    """Rejection rates at each null value in ``grid`` with data drawn at the truth."""
    methods, families, vms = _normalize(methods, families, variance_modes)
    grid = default_grid(dgp) if grid is None else tuple(float(g) for g in grid)
    if not grid:
        raise SpecError("power grid is empty")
    cfg = ExperimentConfig(dgp, methods, families, vms, tuple(ar_modes), float(nominal),
                           grid, ar_one_sided)
    rej, val = _counts(cfg, reps, seed, workers)
    return _table(cfg, reps, seed, rej, val)


TABLE_PRESETS = {
    "dgp1": [DGP1Spec(alpha=a, r=r) for a in (0.05, 0.10) for r in (32.0, 64.0)],
    "dgp2": [DGP2Spec(alpha=a, r=r) for a in (0.05, 0.10) for r in (0.1, 0.2)],
}


def run_table(name: str, reps: int = 5000, seed: int = 0, workers: int | None = 1,
              **kwargs) -> RejectionTable:
    """All four designs of a preset table."""
    try:
        specs = TABLE_PRESETS[name.lower()]
    except KeyError:
        raise SpecError(f"unknown table preset {name!r}; expected dgp1 or dgp2") from None
    table = RejectionTable()
    for spec in specs:
        table.extend(run_size_experiment(spec, reps=reps, seed=seed, workers=workers,
                                         **kwargs))
    return table


__all__ = [
    "DGP1Spec", "DGP2Spec", "RejectionRow", "RejectionTable", "ExperimentConfig",
    "gen_dgp1", "gen_dgp2", "generate", "replicate", "replication_rng",
    "run_size_experiment", "run_power_curve", "run_table", "default_grid",
    "spec_from_mapping", "spec_to_mapping", "TABLE_PRESETS", "JiveInferError",
]
