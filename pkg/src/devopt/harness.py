"""Experiment orchestration: configs, problems, solver registry, and export.

A flat key=value config file describes one experiment: a problem family
(blurred or ray-projected phantoms with a smoothed-TV or wavelet-l1 prior),
a list of solvers, and budgets.  ``run_experiment`` solves every configured
solver on a held-out pool of phantoms, pools the reference optimum F* per
problem, checks every per-iteration certificate, and hands back convergence
curves that ``export_result`` writes as CSV plus a JSON manifest.  All
outputs are byte-stable for a fixed config.

Phantom seeds are split nine-to-one into train/test pools by hashing the
seed, so rules trained through :func:`training_sampler` never see an
evaluation image.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from time import perf_counter

import numpy as np

from devopt.forward_backward import (
    FistaRule,
    RandomFBRule,
    baseline_fista,
    baseline_ista,
    run_fb,
)
from devopt.learned import (
    LearnedFBRule,
    LearnedSmoothRule,
    TrainConfig,
    UnsafeFBRule,
    UnsafeSmoothRule,
    load_rule,
    save_fb_rule,
    save_smooth_rule,
    train_fb_rule,
    train_smooth_rule,
)
from devopt.networks import ConvNet
from devopt.objectives import CompositeProblem, huber_tv, l1_of_orthogonal, least_squares
from devopt.phantoms import phantom
from devopt.smooth import RandomBallRule, baseline_gd, baseline_nesterov, run_smooth
from devopt.tensors import DivergenceError
from devopt.transforms import (
    GridGeometry,
    discrete_gradient,
    gaussian_blur,
    haar_wavelet,
    ray_transform,
)

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "read_config",
    "pool_of",
    "evaluation_seeds",
    "training_sampler",
    "make_problem",
    "assemble_problem",
    "reference_optimum",
    "run_experiment",
    "train_from_config",
    "export_result",
    "load_traces",
    "CurveRecord",
    "ExperimentResult",
]

NOISE_CONVENTION = "additive white Gaussian rescaled to noise * ||A(truth)||"

_PROBLEM_KINDS = ("huber_tv", "wavelet_l1")
_OPERATORS = ("blur", "ray")
_PHANTOM_KINDS = ("shepp_like", "blobs", "ingest")

# default regularization weights per problem kind, used when lam=0
_DEFAULT_LAM = {"huber_tv": 0.0015, "wavelet_l1": 0.0005}


@dataclass
class ExperimentConfig:
    """One experiment, fully determined by these fields.

    ``lam=0`` and ``gamma=0`` mean "use the problem-kind default" (0.0015 or
    0.0005 for ``lam``; the problem's ``beta`` for ``gamma``).  ``solvers``
    entries are registry names; ``learned:<path>`` and
    ``learned_unsafe:<path>`` point at a checkpoint file.
    """

    problem: str = "huber_tv"
    operator: str = "blur"
    size: int = 32
    noise: float = 0.05
    lam: float = 0.0
    delta: float = 0.01
    eps: float = 0.9
    kappa_a: float = 0.5
    kappa_b: float = 0.5
    gamma: float = 0.0
    iters: int = 500
    seed: int = 0
    problems: int = 5
    phantom_kind: str = "blobs"
    phantom_path: str = ""
    sigma: float = 1.5
    angles: int = 48
    detectors: int = 0
    levels: int = 3
    solvers: tuple = ("gd", "nesterov")
    reference_budget: int = 5000
    train_steps: int = 2000
    train_lr: float = 1e-3
    train_n_min: int = 10
    train_n_max: int = 20
    checkpoint: str = ""
    outdir: str = "results"

    def __post_init__(self):
        if self.problem not in _PROBLEM_KINDS:
            raise ValueError(f"problem must be one of {_PROBLEM_KINDS}, got {self.problem!r}")
        if self.operator not in _OPERATORS:
            raise ValueError(f"operator must be one of {_OPERATORS}, got {self.operator!r}")
        if self.phantom_kind not in _PHANTOM_KINDS:
            raise ValueError(f"phantom_kind must be one of {_PHANTOM_KINDS}")
        if self.size < 4:
            raise ValueError("size must be at least 4")
        if self.problem == "wavelet_l1" and (self.size & (self.size - 1)) != 0:
            raise ValueError("wavelet problems need a power-of-two size")
        if isinstance(self.solvers, str):
            self.solvers = tuple(s for s in self.solvers.split(",") if s)
        else:
            self.solvers = tuple(self.solvers)
        if not self.solvers:
            raise ValueError("need at least one solver")
        if self.lam == 0.0:
            self.lam = _DEFAULT_LAM[self.problem]
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not 0.0 <= self.eps < 1.0:
            raise ValueError("eps must lie in [0, 1)")
        if not 0.0 <= self.kappa_a < 1.0 or not 0.0 <= self.kappa_b < 1.0:
            raise ValueError("kappa_a and kappa_b must lie in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be positive (or 0 for the default step)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.iters < 1:
            raise ValueError("iters must be positive")
        if self.problems < 1:
            raise ValueError("problems must be positive")
        if self.reference_budget < 1000:
            raise ValueError("reference_budget must be at least 1000")
        if self.train_steps < 1 or not 1 <= self.train_n_min <= self.train_n_max:
            raise ValueError("bad training budget fields")
        if self.train_lr <= 0:
            raise ValueError("train_lr must be positive")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``key=value`` lines (# comments and blanks allowed)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kind = _FIELD_TYPES[key]
        if kind == "int":
            values[key] = int(val)
        elif kind == "float":
            values[key] = float(val)
        elif kind == "tuple":
            values[key] = tuple(s.strip() for s in val.split(",") if s.strip())
        else:
            values[key] = val
    return ExperimentConfig(**values)


def read_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# seed pools


def pool_of(seed: int) -> str:
    """Deterministic nine-to-one train/test split by hash of the seed."""
    digest = hashlib.sha256(str(int(seed)).encode()).digest()
    return "test" if digest[0] % 10 == 9 else "train"


def evaluation_seeds(config: ExperimentConfig) -> list:
    """First ``config.problems`` held-out phantom seeds for this experiment."""
    out = []
    i = 0
    while len(out) < config.problems:
        cand = config.seed * 1_000_003 + i
        if pool_of(cand) == "test":
            out.append(cand)
        i += 1
    return out


def draw_train_seed(rng) -> int:
    while True:
        cand = int(rng.integers(2**30))
        if pool_of(cand) == "train":
            return cand


# ---------------------------------------------------------------------------
# problem construction


@lru_cache(maxsize=32)
def _forward_operator(kind: str, size: int, sigma: float, angles: int, detectors: int):
    if kind == "blur":
        return gaussian_blur(size, sigma=sigma)
    return ray_transform(GridGeometry(size, angles, detectors))


@lru_cache(maxsize=32)
def _regularizer_parts(problem: str, size: int, lam: float, delta: float, levels: int):
    if problem == "huber_tv":
        return huber_tv(discrete_gradient(size), lam, delta)
    return l1_of_orthogonal(haar_wavelet(size, levels), lam)


def assemble_problem(config: ExperimentConfig, truth, rng) -> CompositeProblem:
    """Simulate data from ``truth`` and assemble the configured objective.

    ``y = A(truth) + noise``, with the noise vector rescaled to exactly
    ``config.noise`` times ``||A(truth)||`` (zero noise stays exactly zero).
    """
    detectors = config.detectors if config.detectors > 0 else int(1.5 * config.size)
    op = _forward_operator(config.operator, config.size, config.sigma, config.angles, detectors)
    clean = op.apply(np.asarray(truth, dtype=np.float64))
    y = clean
    if config.noise > 0:
        g = rng.standard_normal(clean.shape)
        gn = np.linalg.norm(g)
        cn = np.linalg.norm(clean)
        if gn > 0 and cn > 0:
            y = clean + config.noise * cn * g / gn
    f = least_squares(op, y)
    reg = _regularizer_parts(config.problem, config.size, config.lam, config.delta, config.levels)
    if config.problem == "huber_tv":
        return CompositeProblem(f, y, smooth_g=reg)
    return CompositeProblem(f, y, prox_g=reg)


def make_problem(config: ExperimentConfig, seed: int):
    """Phantom + simulated data for one seed; returns (problem, truth)."""
    truth = phantom(config.size, config.phantom_kind, seed=seed, path=config.phantom_path or None)
    rng = np.random.default_rng([seed, 1])
    return assemble_problem(config, truth, rng), truth


def training_sampler(config: ExperimentConfig):
    """Problem sampler over the train pool, for the rule-training loops."""

    def sampler(rng):
        prob, _ = make_problem(config, draw_train_seed(rng))
        return prob

    return sampler


def _resolve_gamma(config: ExperimentConfig, problem: CompositeProblem) -> float:
    return config.gamma if config.gamma > 0 else problem.beta


# ---------------------------------------------------------------------------
# solver registry


@dataclass(frozen=True)
class Solver:
    """A named way to run one problem: ``run(problem) -> trace``.

    ``enforced`` marks runs whose traces carry valid per-iteration
    certificates (deviation schemes with enforcement); only those are
    counted in the certificate report.
    """

    name: str
    run: callable
    enforced: bool


def _load_checkpoint_rule(path: str, config: ExperimentConfig):
    rule = load_rule(path)
    wanted_smooth = config.problem == "huber_tv"
    if wanted_smooth and not isinstance(rule, LearnedSmoothRule):
        raise ValueError(f"checkpoint {path} is not a smooth-scheme rule")
    if not wanted_smooth and not isinstance(rule, LearnedFBRule):
        raise ValueError(f"checkpoint {path} is not a forward-backward rule")
    return rule


def build_solver(name: str, config: ExperimentConfig) -> Solver:
    """Map a registry name to a runnable solver for this config's problem kind."""
    iters = config.iters
    smooth = config.problem == "huber_tv"
    x0 = np.zeros((config.size, config.size))

    if smooth:
        if name == "gd":
            return Solver(name, lambda p: baseline_gd(p, x0, iters), enforced=True)
        if name == "nesterov":
            return Solver(name, lambda p: baseline_nesterov(p, x0, iters), enforced=False)
        if name == "dev_random":
            def run_random(p):
                return run_smooth(p, RandomBallRule(config.eps, seed=config.seed), x0, iters)

            return Solver(name, run_random, enforced=True)
        if name.startswith("learned:"):
            rule = _load_checkpoint_rule(name.split(":", 1)[1], config)
            return Solver(name, lambda p: run_smooth(p, rule, x0, iters), enforced=True)
        if name.startswith("learned_unsafe:"):
            inner = _load_checkpoint_rule(name.split(":", 1)[1], config)
            unsafe = UnsafeSmoothRule(inner.net)
            return Solver(
                name, lambda p: run_smooth(p, unsafe, x0, iters, enforce=False), enforced=False
            )
        raise ValueError(f"unknown smooth-problem solver {name!r}")

    if name == "ista":
        return Solver(
            name, lambda p: baseline_ista(p, x0, _resolve_gamma(config, p), iters), enforced=True
        )
    if name == "fista":
        return Solver(
            name, lambda p: baseline_fista(p, x0, _resolve_gamma(config, p), iters), enforced=False
        )
    if name == "fista_dev":
        def run_fista_dev(p):
            return run_fb(p, FistaRule(), x0, _resolve_gamma(config, p), iters, enforce=False)

        return Solver(name, run_fista_dev, enforced=False)
    if name == "fb_random":
        def run_fb_random(p):
            rule = RandomFBRule(config.kappa_a, config.kappa_b, seed=config.seed)
            return run_fb(
                p, rule, x0, _resolve_gamma(config, p), iters,
                kappa_a=config.kappa_a, kappa_b=config.kappa_b,
            )

        return Solver(name, run_fb_random, enforced=True)
    if name.startswith("learned:"):
        rule = _load_checkpoint_rule(name.split(":", 1)[1], config)

        def run_learned(p):
            return run_fb(
                p, rule, x0, _resolve_gamma(config, p), iters,
                kappa_a=rule.kappa_a, kappa_b=rule.kappa_b,
            )

        return Solver(name, run_learned, enforced=True)
    if name.startswith("learned_unsafe:"):
        inner = _load_checkpoint_rule(name.split(":", 1)[1], config)
        unsafe = UnsafeFBRule(inner.net1, inner.net2)

        def run_unsafe(p):
            return run_fb(p, unsafe, x0, _resolve_gamma(config, p), iters, enforce=False)

        return Solver(name, run_unsafe, enforced=False)
    raise ValueError(f"unknown forward-backward solver {name!r}")


# ---------------------------------------------------------------------------
# reference optimum and certificates


def reference_optimum(problem: CompositeProblem, budget: int, extra=()):
    """Pooled optimum estimate: best value seen by a high-budget baseline
    (accelerated proximal gradient or momentum descent, by problem kind) and
    any ``(name, best_value)`` pairs from configured solvers.

    Returns ``(fstar, provenance)``.
    """
    if budget < 1000:
        raise ValueError("reference budget must be at least 1000")
    x0 = np.zeros(problem.x_shape)
    if problem.prox_g is not None:
        ref = baseline_fista(problem, x0, problem.beta, budget)
        method = "fista"
    else:
        ref = baseline_nesterov(problem, x0, budget)
        method = "nesterov"
    fstar = float(ref.objectives.min())
    source = f"{method}({budget})"
    for name, best in extra:
        if best < fstar:
            fstar = float(best)
            source = str(name)
    return fstar, {"method": method, "budget": budget, "achieved_by": source}


def _certificate_failures(trace) -> tuple[int, int]:
    """Bundle the per-iteration inequalities of one enforced trace.

    One check per iteration ``n`` in ``1..steps-1``: the recorded proposal
    feasibility plus the descent property (objective decrease for the smooth
    scheme; Lyapunov domination and combined-energy decrease for the
    forward-backward scheme).
    """
    steps = trace.steps
    checks = max(steps - 1, 0)
    failures = 0
    is_fb = hasattr(trace, "lyapunov")
    for n in range(1, steps):
        ok = bool(trace.feasible[n])
        if is_fb:
            ok &= trace.lyapunov[n] >= trace.objectives[n + 1] - 1e-10
            prev = trace.combined[n - 1]
            ok &= trace.combined[n] <= prev + 1e-9 * max(1.0, abs(prev))
        else:
            ok &= trace.objectives[n + 1] <= trace.objectives[n] + 1e-10
        failures += 0 if ok else 1
    return checks, failures


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class CurveRecord:
    """One solver's aggregated result over the test pool.

    ``gaps`` is ``(problems_completed, iters + 1)``: per-problem objective
    curves minus the pooled per-problem F*.  ``wall_time`` is measured, so it
    is deliberately excluded from every exported file.
    """

    solver: str
    enforced: bool
    gaps: np.ndarray
    completed_seeds: list
    diverged: dict
    checks: int
    failures: int
    wall_time: float

    @property
    def mean_gap(self) -> np.ndarray:
        return self.gaps.mean(axis=0)

    @property
    def min_gap(self) -> np.ndarray:
        return self.gaps.min(axis=0)

    @property
    def max_gap(self) -> np.ndarray:
        return self.gaps.max(axis=0)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list
    fstars: list
    fstar_notes: list
    records: list

    @property
    def total_checks(self) -> int:
        return sum(r.checks for r in self.records)

    @property
    def total_failures(self) -> int:
        return sum(r.failures for r in self.records)

    @property
    def divergences(self) -> dict:
        out = {}
        for r in self.records:
            for seed, msg in r.diverged.items():
                out[f"{r.solver}@{seed}"] = msg
        return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Solve every configured solver on the held-out pool and certify runs.

    Divergence of one (solver, seed) pair is recorded and skipped, never
    fatal.  F* is pooled per problem from the high-budget reference run and
    every completed solver curve, so recorded gaps are non-negative by
    construction.
    """
    seeds = evaluation_seeds(config)
    problems = [make_problem(config, s)[0] for s in seeds]
    solvers = [build_solver(name, config) for name in config.solvers]

    traces = {}
    walls = {}
    diverged = {s.name: {} for s in solvers}
    for solver in solvers:
        start = perf_counter()
        for seed, prob in zip(seeds, problems):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    traces[(solver.name, seed)] = solver.run(prob)
            except DivergenceError as exc:
                diverged[solver.name][seed] = str(exc)
        walls[solver.name] = perf_counter() - start

    fstars, notes = [], []
    for seed, prob in zip(seeds, problems):
        extra = [
            (s.name, float(traces[(s.name, seed)].objectives.min()))
            for s in solvers
            if (s.name, seed) in traces
        ]
        fstar, note = reference_optimum(prob, config.reference_budget, extra)
        fstars.append(fstar)
        notes.append(note)

    records = []
    for solver in solvers:
        rows, completed, checks, failures = [], [], 0, 0
        for seed, fstar in zip(seeds, fstars):
            trace = traces.get((solver.name, seed))
            if trace is None:
                continue
            rows.append(trace.objectives - fstar)
            completed.append(seed)
            if solver.enforced:
                c, f = _certificate_failures(trace)
                checks += c
                failures += f
        gaps = np.array(rows) if rows else np.empty((0, config.iters + 1))
        records.append(
            CurveRecord(
                solver=solver.name,
                enforced=solver.enforced,
                gaps=gaps,
                completed_seeds=completed,
                diverged=diverged[solver.name],
                checks=checks,
                failures=failures,
                wall_time=walls[solver.name],
            )
        )
    return ExperimentResult(config, seeds, fstars, notes, records)


# ---------------------------------------------------------------------------
# training entry point


def train_from_config(config: ExperimentConfig, progress=None):
    """Train the configured rule kind on the train pool; returns
    ``(rule, losses, checkpoint_path)``.  ``progress`` (if given) is called
    every 100 steps with the running mean loss."""
    sampler = training_sampler(config)
    tc = TrainConfig(
        steps=config.train_steps,
        lr=config.train_lr,
        n_min=config.train_n_min,
        n_max=config.train_n_max,
        seed=config.seed,
    )
    path = config.checkpoint or f"{config.problem}_rule.ckpt"
    if config.problem == "huber_tv":
        net = ConvNet(4, seed=config.seed)
        rule, losses = train_smooth_rule(sampler, net, config.eps, tc, progress=progress)
        save_smooth_rule(path, rule, seed=config.seed)
    else:
        net1 = ConvNet(3, seed=config.seed)
        net2 = ConvNet(4, seed=config.seed + 1)
        gamma = config.gamma if config.gamma > 0 else None
        rule, losses = train_fb_rule(
            sampler, net1, net2, config.kappa_a, config.kappa_b, tc,
            gamma=gamma, progress=progress,
        )
        save_fb_rule(path, rule, seed=config.seed)
    return rule, losses, path


# ---------------------------------------------------------------------------
# export


def _solver_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name) + ".csv"


def _curve_csv(record: CurveRecord) -> str:
    lines = ["n,mean_gap,min_gap,max_gap"]
    mean, lo, hi = record.mean_gap, record.min_gap, record.max_gap
    for n in range(1, len(mean)):
        lines.append(f"{n},{float(mean[n])!r},{float(lo[n])!r},{float(hi[n])!r}")
    return "\n".join(lines) + "\n"


def _manifest_dict(result: ExperimentResult) -> dict:
    config = dataclasses.asdict(result.config)
    config["solvers"] = list(result.config.solvers)
    return {
        "config": config,
        "noise_convention": NOISE_CONVENTION,
        "evaluation_seeds": list(result.seeds),
        "fstar": {
            "values": [float(v) for v in result.fstars],
            "notes": result.fstar_notes,
        },
        "csv_files": {r.solver: _solver_filename(r.solver) for r in result.records},
        "certificates": {
            "checks": result.total_checks,
            "failures": result.total_failures,
            "by_solver": {
                r.solver: {"enforced": r.enforced, "checks": r.checks, "failures": r.failures}
                for r in result.records
            },
            "divergences": result.divergences,
        },
    }


def export_result(result: ExperimentResult, outdir, write_traces: bool = True) -> list:
    """Write one CSV per solver plus ``manifest.json`` (and ``traces.json``
    for later re-export); returns the created paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    if not result.records:
        raise ValueError("nothing to export: no solver records")
    written = []
    for record in result.records:
        path = out / _solver_filename(record.solver)
        if record.gaps.shape[0] == 0:
            path.write_text("n,mean_gap,min_gap,max_gap\n")
        else:
            path.write_text(_curve_csv(record))
        written.append(path)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(_manifest_dict(result), indent=2, sort_keys=True) + "\n")
    written.append(manifest)
    if write_traces:
        traces = out / "traces.json"
        traces.write_text(json.dumps(_traces_dict(result), indent=2, sort_keys=True) + "\n")
        written.append(traces)
    return written


def _traces_dict(result: ExperimentResult) -> dict:
    return {
        "config": _manifest_dict(result)["config"],
        "seeds": list(result.seeds),
        "fstars": [float(v) for v in result.fstars],
        "fstar_notes": result.fstar_notes,
        "records": [
            {
                "solver": r.solver,
                "enforced": r.enforced,
                "gaps": [[float(v) for v in row] for row in r.gaps],
                "completed_seeds": list(r.completed_seeds),
                "diverged": {str(k): v for k, v in r.diverged.items()},
                "checks": r.checks,
                "failures": r.failures,
            }
            for r in result.records
        ],
    }


def load_traces(path) -> ExperimentResult:
    """Rebuild an :class:`ExperimentResult` from ``traces.json`` (wall times
    are gone; they are never persisted)."""
    data = json.loads(Path(path).read_text())
    config = ExperimentConfig(**data["config"])
    records = [
        CurveRecord(
            solver=r["solver"],
            enforced=r["enforced"],
            gaps=np.array(r["gaps"]) if r["gaps"] else np.empty((0, config.iters + 1)),
            completed_seeds=r["completed_seeds"],
            diverged={int(k): v for k, v in r["diverged"].items()},
            checks=r["checks"],
            failures=r["failures"],
            wall_time=0.0,
        )
        for r in data["records"]
    ]
    return ExperimentResult(config, data["seeds"], data["fstars"], data["fstar_notes"], records)
