"""
Continual-learning strategies.

Regularization strategies keep an importance map (Omega) and an anchor copy of
the parameters from the end of the previous task and add
lambda * sum(Omega * (theta - anchor)^2) to the training loss. They differ only in
how Omega is computed when a task ends:

    l2      every entry 1
    ewc     mean squared per-sample gradient (Fisher), replaced each task
    ewcol   same, accumulated over tasks
    si      clamped path integral of -g * delta_theta over the task, damped by xi
    mas     mean absolute gradient of the squared score gap

Replay strategies keep a MemoryBuffer of training triples from past tasks:

    nr      stored triples are merged into the next task's training set
    gem     stored triples give one reference gradient per past task; the batch
            gradient is projected so it does not increase any of those losses

All hooks are driven by runner.ContinualAgent, one strategy instance per run.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

import autodiff as ad
from autodiff import NonFiniteError, ParameterSet, ShapeError, Tensor
from config import StrategyConfig
from rankers import Ranker, TripleBatch
from taskdata import Triple, batch_triples

logger = logging.getLogger(__name__)

ImportanceMap = Dict[str, np.ndarray]
GradientMap = Mapping[str, np.ndarray]
Encoder = Callable[[Sequence[Triple]], TripleBatch]

MAX_FISHER_SAMPLES = 1024
# g~ . g_s >= -GEM_TOLERANCE * |g~| |g_s| for every stored task s
GEM_TOLERANCE = 1e-6


class QPConvergenceError(RuntimeError):
    """The dual QP did not reach its KKT tolerance within the iteration cap."""

    def __init__(self, message: str, partial: np.ndarray):
        super().__init__(message)
        self.partial = partial


def _values(grad) -> np.ndarray:
    return grad.values if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)


def _check_finite(grads: GradientMap, what: str) -> None:
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"{what}: non-finite gradient for {name!r}")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def loss_gradient(ranker: Ranker, batch: TripleBatch) -> Dict[str, np.ndarray]:
    """Gradient of the unregularized margin loss of one batch, for every parameter."""
    with ad.recording() as record:
        grads = record.backward(ranker.pair_loss(batch), ranker.params)
    return {name: grad.values for name, grad in grads.items()}


def score_gap_gradient(ranker: Ranker, batch: TripleBatch) -> Dict[str, np.ndarray]:
    """Gradient of the batch mean of (R(q, pos) - R(q, neg))^2."""
    with ad.recording() as record:
        gap = ranker.score_gap(batch)
        grads = record.backward(ad.mean(ad.square(gap)), ranker.params)
    return {name: grad.values for name, grad in grads.items()}


# ---------------------------------------------------------------------------
# Penalty and importance maps
# ---------------------------------------------------------------------------

def penalty_term(params: ParameterSet, anchor: Mapping[str, np.ndarray], importance: Mapping[str, np.ndarray],
                 lam: float) -> Tensor:
    """lam * sum_i Omega_i * (theta_i - anchor_i)^2; exactly 0 when Omega is empty or lam is 0."""
    if not importance or lam == 0.0:
        return Tensor(0.0)
    total: Optional[Tensor] = None
    for name in sorted(importance):
        theta = params[name]
        omega = np.asarray(importance[name], dtype=np.float64)
        reference = np.asarray(anchor[name], dtype=np.float64)
        if omega.shape != theta.shape or reference.shape != theta.shape:
            raise ShapeError(
                f"penalty for {name!r}: parameter {theta.shape}, anchor {reference.shape}, importance {omega.shape}"
            )
        term = ad.sum(ad.multiply(ad.square(ad.subtract(theta, reference)), omega))
        total = term if total is None else ad.add(total, term)
    return ad.multiply(total, lam)


def l2_importance(params: ParameterSet) -> ImportanceMap:
    return {name: np.ones_like(tensor.values) for name, tensor in params.items()}


def _accumulate(prior: Optional[Mapping[str, np.ndarray]], term: ImportanceMap, online: bool) -> ImportanceMap:
    if not online or not prior:
        return term
    return {name: prior[name] + values for name, values in term.items()}


def fisher_importance(gradients: Iterable[GradientMap], online: bool = False,
                      prior: Optional[Mapping[str, np.ndarray]] = None) -> ImportanceMap:
    """
    Diagonal Fisher estimate: mean of squared per-sample gradients.

    Args:
        gradients: one gradient map per Fisher sample, taken at the task-end parameters
        online: add to `prior` instead of replacing it
        prior: importance accumulated over earlier tasks
    """
    total: Dict[str, np.ndarray] = {}
    count = 0
    for grads in gradients:
        grads = {name: _values(g) for name, g in grads.items()}
        _check_finite(grads, "fisher")
        for name, grad in grads.items():
            total[name] = total[name] + grad ** 2 if name in total else grad ** 2
        count += 1
    if count == 0:
        raise ValueError("fisher importance needs at least one sample")
    return _accumulate(prior, {name: values / count for name, values in total.items()}, online)


def mas_importance(gradients: Iterable[GradientMap],
                   prior: Optional[Mapping[str, np.ndarray]] = None) -> ImportanceMap:
    """Mean absolute gradient of the squared score gap over replay batches, added to `prior`."""
    total: Dict[str, np.ndarray] = {}
    count = 0
    for grads in gradients:
        grads = {name: _values(g) for name, g in grads.items()}
        _check_finite(grads, "mas")
        for name, grad in grads.items():
            total[name] = total[name] + np.abs(grad) if name in total else np.abs(grad)
        count += 1
    if count == 0:
        raise ValueError("mas importance needs at least one batch")
    return _accumulate(prior, {name: values / count for name, values in total.items()}, online=True)


@dataclass
class PathIntegral:
    """SI running sums omega and the parameters before the latest step."""

    omega: Dict[str, np.ndarray] = field(default_factory=dict)
    previous: Optional[Dict[str, np.ndarray]] = None

    @classmethod
    def start(cls, params: ParameterSet) -> "PathIntegral":
        return cls({name: np.zeros_like(t.values) for name, t in params.items()}, params.snapshot())


def si_accumulate(state: PathIntegral, grads: GradientMap, params: ParameterSet) -> PathIntegral:
    """omega -= g * (theta_k - theta_{k-1}) after one optimizer step; g is the pre-step gradient."""
    if state.previous is None:
        raise ValueError("si_accumulate needs the pre-step parameter snapshot")
    current = params.snapshot()
    for name, values in current.items():
        step = values - state.previous[name]
        grad = _values(grads[name])
        if name in state.omega:
            state.omega[name] = state.omega[name] - grad * step
        else:
            state.omega[name] = -grad * step
    state.previous = current
    return state


def si_consolidate(omega: Mapping[str, np.ndarray], end: Mapping[str, np.ndarray], start: Mapping[str, np.ndarray],
                   xi: float = 1e-3, prior: Optional[Mapping[str, np.ndarray]] = None) -> ImportanceMap:
    """Omega += max(omega, 0) / ((theta_end - theta_start)^2 + xi)."""
    if xi <= 0:
        raise ValueError(f"SI damping xi must be > 0, got {xi}")
    term = {
        name: np.maximum(np.asarray(omega[name], dtype=np.float64), 0.0) / ((end[name] - start[name]) ** 2 + xi)
        for name in omega
    }
    return _accumulate(prior, term, online=True)


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

class MemoryBuffer:
    """
    Per-task slices of stored training triples under one global capacity.

    After t tasks every slice is cut to its quota: capacity // t, with the remainder
    going to the earliest tasks. Slices only ever shrink once their task is over.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError(f"memory capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.seed = seed
        self.slices: Dict[int, List[Triple]] = {}

    def __len__(self) -> int:
        return sum(len(items) for items in self.slices.values())

    @property
    def tasks(self) -> List[int]:
        return sorted(self.slices)

    def quotas(self, tasks: Sequence[int]) -> Dict[int, int]:
        if not tasks:
            return {}
        base, extra = divmod(self.capacity, len(tasks))
        return {task: base + (1 if i < extra else 0) for i, task in enumerate(sorted(tasks))}

    def _sample(self, items: Sequence[Triple], size: int, task: int, round_: int) -> List[Triple]:
        if size >= len(items):
            return list(items)
        rng = np.random.default_rng([self.seed, task, round_])
        keep = np.sort(rng.choice(len(items), size=size, replace=False))
        return [items[int(i)] for i in keep]

    def update(self, task: int, triples: Sequence[Triple]) -> None:
        """Store a uniform sample of a finished task's triples and shrink older slices to their quotas."""
        if task in self.slices:
            raise ValueError(f"task {task} already stored in memory")
        quotas = self.quotas(self.tasks + [task])
        round_ = len(quotas)
        for old in self.tasks:
            self.slices[old] = self._sample(self.slices[old], quotas[old], old, round_)
        self.slices[task] = self._sample(triples, quotas[task], task, round_)
        logger.info("🔍 memory after task %d: %s (capacity %d)", task,
                    {t: len(items) for t, items in self.slices.items()}, self.capacity)

    def slice(self, task: int) -> List[Triple]:
        return list(self.slices.get(task, []))

    def samples(self) -> List[Triple]:
        return [triple for task in self.tasks for triple in self.slices[task]]


def nr_merge(current: Sequence[Triple], memory: MemoryBuffer, seed: int) -> List[Triple]:
    """Current task triples plus every stored triple, shuffled by `seed`."""
    merged = list(current) + memory.samples()
    order = np.random.default_rng(seed).permutation(len(merged))
    return [merged[int(i)] for i in order]


# ---------------------------------------------------------------------------
# Gradient episodic memory
# ---------------------------------------------------------------------------

def gem_reference_gradients(ranker: Ranker, memory: MemoryBuffer, encode: Encoder) -> np.ndarray:
    """One flattened loss gradient per stored task, each slice taken as a single batch."""
    if not memory.tasks:
        raise ValueError("gem needs at least one past task in memory")
    rows = []
    for task in memory.tasks:
        items = memory.slice(task)
        if not items:
            raise ValueError(f"memory slice for task {task} is empty")
        rows.append(ranker.params.flatten_map(loss_gradient(ranker, encode(items))))
    return np.stack(rows)


def kkt_residual(G: np.ndarray, g: np.ndarray, v: np.ndarray, gamma: float) -> float:
    """Largest KKT violation of min 1/2 v'(GG' + gamma I)v + g'G'v s.t. v >= 0."""
    grad = G @ (G.T @ v + g) + gamma * v
    active = v > 0
    violation = np.where(active, np.abs(grad), np.maximum(-grad, 0.0))
    return float(violation.max()) if violation.size else 0.0


def _qp_scale(G: np.ndarray, g: np.ndarray) -> float:
    norms = np.linalg.norm(G, axis=1)
    return float(np.max([1.0, norms.max() ** 2, norms.max() * np.linalg.norm(g)]))


def _projected_gradient(G: np.ndarray, g: np.ndarray, gamma: float, tol: float, max_iter: int) -> np.ndarray:
    hessian = G @ G.T + gamma * np.eye(G.shape[0])
    linear = G @ g
    step = 1.0 / max(np.linalg.eigvalsh(hessian).max(), 1e-12)
    v = np.zeros(G.shape[0])
    for _ in range(max_iter):
        v = np.maximum(v - step * (hessian @ v + linear), 0.0)
        if kkt_residual(G, g, v, gamma) <= tol:
            return v
    raise QPConvergenceError(f"projected gradient did not converge in {max_iter} iterations", v)


def solve_dual_qp(G: np.ndarray, g: np.ndarray, gamma: float = 1e-3, tol: float = 1e-8, max_iter: int = 1000,
                  method: str = "nnls") -> np.ndarray:
    """
    Solve min_v 1/2 v'(G G' + gamma I) v + g' G' v subject to v >= 0.

    Up to a constant this is 1/2 ||G'v + g||^2 + gamma/2 ||v||^2, a non-negative least
    squares problem over [G'; sqrt(gamma) I]. `method="pgd"` runs projected gradient
    descent instead. `tol` bounds the KKT residual relative to the problem scale.

    Raises:
        QPConvergenceError: iteration cap reached; `.partial` holds the last iterate
    """
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    g = np.asarray(g, dtype=np.float64)
    if G.shape[0] < 1 or G.shape[1] != g.shape[0]:
        raise ShapeError(f"dual QP needs G (m x n) and g (n,), got {G.shape} and {g.shape}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    m = G.shape[0]
    threshold = tol * _qp_scale(G, g)
    if method == "pgd":
        return _projected_gradient(G, g, gamma, threshold, max_iter)
    if method != "nnls":
        raise ValueError(f"unknown QP method {method!r}")

    design = np.vstack([G.T, np.sqrt(gamma) * np.eye(m)]) if gamma > 0 else G.T
    target = np.concatenate([-g, np.zeros(m)]) if gamma > 0 else -g
    try:
        v, _ = nnls(design, target, maxiter=max_iter)
    except RuntimeError as exc:
        logger.warning("⚠️ nnls stopped early (%s); retrying with projected gradient", exc)
        return _projected_gradient(G, g, gamma, threshold, max_iter)
    residual = kkt_residual(G, g, v, gamma)
    if residual > threshold:
        raise QPConvergenceError(f"dual QP KKT residual {residual:.3e} above {threshold:.3e}", v)
    return v


def constraint_margins(projected: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Cosine of the projected gradient with each reference row (0 where either norm is 0)."""
    scale = np.linalg.norm(projected) * np.linalg.norm(G, axis=1)
    dots = G @ projected
    return np.divide(dots, scale, out=np.zeros_like(dots), where=scale > 0)


def gem_project(g: np.ndarray, G: np.ndarray, gamma: float = 1e-3, tol: float = 1e-8,
                max_iter: int = 1000) -> np.ndarray:
    """
    Return g unchanged when it agrees (dot >= 0) with every reference gradient row of G,
    otherwise G'v* + g for the dual QP solution v*. On QP failure g is returned as is.

    The ridge gamma leaves a slack of gamma * v_s on each active constraint; when that
    breaks GEM_TOLERANCE the dual is solved again with gamma = 0.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gem_project: non-finite batch gradient")
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if np.all(G @ g >= 0.0):
        return g.copy()
    try:
        projected = _projection(g, G, gamma, tol, max_iter)
        if gamma > 0 and np.any(constraint_margins(projected, G) < -GEM_TOLERANCE):
            logger.debug("ridge %.1e leaves constraints open; solving without it", gamma)
            projected = _projection(g, G, 0.0, tol, max_iter)
    except QPConvergenceError as exc:
        logger.warning("⚠️ GEM projection skipped: %s", exc)
        return g.copy()
    return projected


def _projection(g: np.ndarray, G: np.ndarray, gamma: float, tol: float, max_iter: int) -> np.ndarray:
    projected = G.T @ solve_dual_qp(G, g, gamma, tol, max_iter) + g
    # a direct conflict lands on the origin; rounding there would flip the sign of every dot
    if np.linalg.norm(projected) <= 1e-12 * np.linalg.norm(g):
        return np.zeros_like(g)
    return projected


# ---------------------------------------------------------------------------
# Strategy objects
# ---------------------------------------------------------------------------

class Strategy:
    """
    Baseline strategy and the hook interface.

    Hook order per task: begin_task, training_set, then per batch penalty_gradient /
    adjust_gradient / after_step around the optimizer step, then end_task.
    """

    def __init__(self, config: StrategyConfig, encode: Encoder, batch_size: int = 32, seed: int = 0):
        self.config = config
        self.encode = encode
        self.batch_size = batch_size
        self.seed = seed
        self.importance: ImportanceMap = {}
        self.anchor: Dict[str, np.ndarray] = {}

    @property
    def name(self) -> str:
        return self.config.name

    def begin_task(self, ranker: Ranker, task: int) -> None:
        pass

    def training_set(self, triples: Sequence[Triple], task: int) -> List[Triple]:
        return list(triples)

    def penalty(self, ranker: Ranker) -> Tensor:
        return penalty_term(ranker.params, self.anchor, self.importance, self.config.lam)

    def penalty_gradient(self, ranker: Ranker) -> Optional[Dict[str, np.ndarray]]:
        """Gradient of the penalty term, or None while there is nothing to penalize."""
        if not self.importance or self.config.lam == 0.0:
            return None
        with ad.recording() as record:
            grads = record.backward(self.penalty(ranker), ranker.params)
        return {name: grad.values for name, grad in grads.items()}

    def adjust_gradient(self, ranker: Ranker, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return grads

    def after_step(self, ranker: Ranker, loss_grads: GradientMap) -> None:
        pass

    def end_task(self, ranker: Ranker, triples: Sequence[Triple], task: int) -> None:
        pass

    def describe(self) -> dict:
        return {"name": self.name, "importance_entries": int(sum(v.size for v in self.importance.values()))}


class L2Strategy(Strategy):
    def end_task(self, ranker: Ranker, triples: Sequence[Triple], task: int) -> None:
        self.importance = l2_importance(ranker.params)
        self.anchor = ranker.params.snapshot()


class EWCStrategy(Strategy):
    """Fisher importance from K single-triple gradients; `online` accumulates across tasks."""

    def __init__(self, *args, online: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.online = online

    def fisher_sample_count(self, available: int) -> int:
        requested = self.config.fisher_samples or min(MAX_FISHER_SAMPLES, available)
        if requested > available:
            logger.warning("⚠️ %d Fisher samples requested, only %d available; clamping", requested, available)
        return min(requested, available)

    def end_task(self, ranker: Ranker, triples: Sequence[Triple], task: int) -> None:
        if not triples:
            logger.warning("⚠️ task %d has no training triples; importance unchanged", task)
            return
        count = self.fisher_sample_count(len(triples))
        picks = np.random.default_rng([self.seed, task]).choice(len(triples), size=count, replace=False)
        samples = (loss_gradient(ranker, self.encode([triples[int(i)]])) for i in picks)
        self.importance = fisher_importance(samples, self.online, self.importance)
        self.anchor = ranker.params.snapshot()
        logger.info("✅ %s importance from %d Fisher samples after task %d", self.name, count, task)


class SIStrategy(Strategy):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.path: Optional[PathIntegral] = None
        self.task_start: Dict[str, np.ndarray] = {}

    def begin_task(self, ranker: Ranker, task: int) -> None:
        self.path = PathIntegral.start(ranker.params)
        self.task_start = ranker.params.snapshot()

    def after_step(self, ranker: Ranker, loss_grads: GradientMap) -> None:
        si_accumulate(self.path, loss_grads, ranker.params)

    def end_task(self, ranker: Ranker, triples: Sequence[Triple], task: int) -> None:
        end = ranker.params.snapshot()
        self.importance = si_consolidate(self.path.omega, end, self.task_start, self.config.si_xi, self.importance)
        self.anchor = end


class MASStrategy(Strategy):
    def end_task(self, ranker: Ranker, triples: Sequence[Triple], task: int) -> None:
        if not triples:
            logger.warning("⚠️ task %d has no training triples; importance unchanged", task)
            return
        batches = batch_triples(triples, self.batch_size, self.seed + task)
        samples = (score_gap_gradient(ranker, self.encode(batch)) for batch in batches)
        self.importance = mas_importance(samples, self.importance)
        self.anchor = ranker.params.snapshot()


class RehearsalStrategy(Strategy):
    """Naive rehearsal: stored triples of past tasks join every later training set."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.memory = MemoryBuffer(self.config.capacity, self.seed)

    def training_set(self, triples: Sequence[Triple], task: int) -> List[Triple]:
        if not len(self.memory):
            return list(triples)
        return nr_merge(triples, self.memory, self.seed + task)

    def end_task(self, ranker: Ranker, triples: Sequence[Triple], task: int) -> None:
        self.memory.update(task, triples)

    def describe(self) -> dict:
        return {**super().describe(), "memory": {str(t): len(self.memory.slice(t)) for t in self.memory.tasks}}


class GEMStrategy(RehearsalStrategy):
    """Projects each batch gradient against the loss gradients of the stored tasks."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.projections = 0

    def training_set(self, triples: Sequence[Triple], task: int) -> List[Triple]:
        return list(triples)

    def adjust_gradient(self, ranker: Ranker, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        if not len(self.memory):
            return grads
        params = ranker.params
        reference = gem_reference_gradients(ranker, self.memory, self.encode)
        flat = params.flatten_map(grads)
        projected = gem_project(flat, reference, self.config.gem_gamma, self.config.qp_tol, self.config.qp_max_iter)
        if projected is flat or np.array_equal(projected, flat):
            return grads
        self.projections += 1
        return params.unflatten(projected)

    def describe(self) -> dict:
        return {**super().describe(), "projections": self.projections}


def build_strategy(config: StrategyConfig, encode: Encoder, batch_size: int = 32, seed: int = 0) -> Strategy:
    kwargs = dict(batch_size=batch_size, seed=seed)
    if config.name == "none":
        return Strategy(config, encode, **kwargs)
    if config.name == "l2":
        return L2Strategy(config, encode, **kwargs)
    if config.name in ("ewc", "ewcol"):
        return EWCStrategy(config, encode, online=config.name == "ewcol", **kwargs)
    if config.name == "si":
        return SIStrategy(config, encode, **kwargs)
    if config.name == "mas":
        return MASStrategy(config, encode, **kwargs)
    if config.name == "nr":
        return RehearsalStrategy(config, encode, **kwargs)
    if config.name == "gem":
        return GEMStrategy(config, encode, **kwargs)
    raise ValueError(f"unknown strategy {config.name!r}")
