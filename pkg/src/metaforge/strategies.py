"""Interchangeable outer-gradient strategies for bi-level training, plus the
outer optimizers and the hyperparameter search runner.

Four routes to d(query loss)/d(theta):

* unrolled     - exact differentiation through the inner SGD trajectory
* first_order  - gradient at the adapted parameters, inner Jacobian dropped
* implicit     - proximal inner objective; lam (H + lam I)^-1 chain solved by
                 conjugate gradient on Hessian-vector products
* es           - Monte-Carlo gradient of the Gaussian-smoothed objective from
                 perturbed evaluations (antithetic pairs optional)
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import apply, backward, constant, grad_or_none, tape, tensor_of
from .metalearners import MamlWrapper, _adapt_once, episode_losses


class StrategyError(Exception):
    pass


_DIAG = threading.local()


def last_tape_generation() -> int | None:
    """Generation counter of the tape used by the most recent gradient call on
    this thread; 1 means no second-order structure was recorded."""
    return getattr(_DIAG, "generation", None)


class CgError(StrategyError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class StrategySpec:
    kind: str                   # unrolled | first_order | implicit | es
    inner_steps: int = 1
    lam: float = 1.0            # implicit
    cg_iters: int = 100
    cg_tol: float = 1e-10
    sigma: float = 0.1          # es
    samples: int = 64
    antithetic: bool = True

    def __post_init__(self):
        if self.kind not in ("unrolled", "first_order", "implicit", "es"):
            raise StrategyError(f"unknown strategy kind '{self.kind}'")
        if self.inner_steps < 0:
            raise StrategyError("inner_steps must be >= 0")
        if self.kind == "implicit":
            if self.lam <= 0:
                raise StrategyError("implicit strategy needs lam > 0")
            if self.cg_tol <= 0:
                raise StrategyError("implicit strategy needs cg_tol > 0")
        if self.kind == "es":
            if self.sigma <= 0:
                raise StrategyError("es strategy needs sigma > 0")
            if self.samples < 2:
                raise StrategyError("es strategy needs samples >= 2")
            if self.antithetic and self.samples % 2:
                raise StrategyError("antithetic es needs an even sample count")


# ---------------------------------------------------------------------------
# flattened-dict vector helpers

def _flatten(d: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(v).reshape(-1) for v in d.values()]) \
        if d else np.zeros(0)


def _unflatten(vec: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for k, v in like.items():
        n = v.size
        out[k] = vec[off:off + n].reshape(v.shape)
        off += n
    return out


# ---------------------------------------------------------------------------
# gradient routes over (theta, inner loss, outer loss) closures

def unrolled_gradient(theta: dict[str, np.ndarray], inner_loss_fn, outer_loss_fn,
                      inner_steps: int, lr_inner, *,
                      first_order: bool = False,
                      allow_unused: bool = False,
                      update_names=None) -> tuple[dict, float]:
    """Differentiate the query loss through `inner_steps` of inner SGD.

    With ``first_order=True`` every step detaches, reducing to the
    single-level approximation.  ``update_names`` restricts the inner loop to
    a parameter subset (the ANIL head); ``lr_inner`` may be a per-parameter
    tensor dict (MetaSGD).
    """
    with tape() as tp:
        leaves = {k: tensor_of(v.shape, v, requires_grad=True)
                  for k, v in theta.items()}
        params = dict(leaves)
        for _ in range(inner_steps):
            params = _adapt_once(params, inner_loss_fn(params), lr=lr_inner,
                                 create_graph=not first_order,
                                 allow_unused=allow_unused, allow_nograd=False,
                                 detach=first_order,
                                 update_names=update_names)
        out = outer_loss_fn(params)
        targets = list(params.values()) if first_order else list(leaves.values())
        grads = grad_or_none(out, targets)
    _DIAG.generation = tp.generation
    result = {k: (np.array(g.data) if g is not None else np.zeros_like(theta[k]))
              for k, g in zip(theta, grads)}
    return result, out.item()


def first_order_gradient(theta, inner_loss_fn, outer_loss_fn, inner_steps,
                         lr_inner, *, allow_unused: bool = False,
                         update_names=None) -> tuple[dict, float]:
    """Gradient of the query loss at the adapted parameters, treating them as
    independent of theta; no second-order tape is recorded."""
    return unrolled_gradient(theta, inner_loss_fn, outer_loss_fn, inner_steps,
                             lr_inner, first_order=True,
                             allow_unused=allow_unused,
                             update_names=update_names)


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       tol: float, max_iters: int,
                       collect: bool = False):
    """Solve A x = b for SPD A.  Raises CgError carrying the residual norm if
    the tolerance is not met within max_iters iterations."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    history = [x.copy()] if collect else None
    if np.sqrt(rs) <= tol:
        return (x, history) if collect else x
    for _ in range(max_iters):
        ap = matvec(p)
        denom = float(p @ ap)
        if denom <= 0:
            raise CgError(
                f"cg: system not positive definite (p^T A p = {denom:.3e}); "
                "for the implicit strategy this means lambda does not dominate "
                "the inner loss curvature - increase it",
                residual=float(np.sqrt(rs)))
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        if collect:
            history.append(x.copy())
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol:
            return (x, history) if collect else x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise CgError(
        f"cg: residual {np.sqrt(rs):.3e} above tol {tol:.3e} after {max_iters} iterations",
        residual=float(np.sqrt(rs)))


def implicit_gradient(theta: dict[str, np.ndarray], inner_loss_fn, outer_loss_fn,
                      lam: float, cg_iters: int, cg_tol: float,
                      inner_steps: int, lr_inner: float,
                      update_names=None) -> tuple[dict, float]:
    """iMAML-style gradient.

    The inner objective is ``inner_loss(phi) + (lam/2) ||phi - theta||^2``
    over the adapted subset, run for `inner_steps` of plain SGD toward
    stationarity; the outer gradient is ``lam (H + lam I)^-1 grad_outer(phi*)``
    with H the adapted-block Hessian at phi*, solved by conjugate gradient on
    Hessian-vector products.  Parameters outside ``update_names`` stay fixed
    in the inner loop and receive the cross-term-corrected direct gradient.
    """
    adapted = list(theta) if update_names is None else \
        [k for k in theta if k in update_names]
    if update_names is not None:
        unknown = set(update_names) - set(theta)
        if unknown:
            raise StrategyError(f"update_names outside theta: {sorted(unknown)}")

    def prox_loss(params, anchors):
        base = inner_loss_fn(params)
        for k in adapted:
            diff = apply("sub", params[k], anchors[k])
            base = apply("add", base,
                         apply("scale", apply("sum", apply("square", diff)),
                               c=lam / 2.0))
        return base

    anchors = {k: constant(v) for k, v in theta.items()}
    phi = {k: np.array(v) for k, v in theta.items()}
    for _ in range(inner_steps):
        with tape():
            params = {k: tensor_of(v.shape, v, requires_grad=True)
                      for k, v in phi.items()}
            params = _adapt_once(params, prox_loss(params, anchors), lr=lr_inner,
                                 create_graph=False, allow_unused=True,
                                 allow_nograd=False, detach=True,
                                 update_names=adapted)
        phi = {k: np.array(t.data) for k, t in params.items()}

    a_like = {k: phi[k] for k in adapted}
    with tape():
        leaves = {k: tensor_of(v.shape, v, requires_grad=True)
                  for k, v in phi.items()}
        out = outer_loss_fn(leaves)
        b_grads = grad_or_none(out, list(leaves.values()))
        b_full = {k: (g.data if g is not None else np.zeros_like(phi[k]))
                  for k, g in zip(phi, b_grads)}
        inner_grads = dict(zip(adapted, grad_or_none(
            inner_loss_fn(leaves), [leaves[k] for k in adapted],
            create_graph=True)))

        def hvp(v_adapted: dict):
            dot = None
            for k in adapted:
                g = inner_grads[k]
                if g is None:
                    continue
                term = apply("sum", apply("mul", g, constant(v_adapted[k])))
                dot = term if dot is None else apply("add", dot, term)
            if dot is None:
                return {k: np.zeros_like(v) for k, v in phi.items()}
            hvs = grad_or_none(dot, list(leaves.values()))
            return {k: (g.data if g is not None else np.zeros_like(phi[k]))
                    for k, g in zip(phi, hvs)}

        def matvec(v_flat):
            full = hvp(_unflatten(v_flat, a_like))
            return _flatten({k: full[k] for k in adapted}) + lam * v_flat

        b_vec = _flatten({k: b_full[k] for k in adapted})
        x = conjugate_gradient(matvec, b_vec, cg_tol, cg_iters)
        x_dict = _unflatten(x, a_like)
        result = {k: lam * x_dict[k] for k in adapted}
        if len(adapted) != len(theta):
            cross = hvp(x_dict)
            for k in theta:
                if k not in result:
                    result[k] = b_full[k] - cross[k]
    return {k: result[k] for k in theta}, out.item()


def es_gradient(theta: dict[str, np.ndarray], value_fn: Callable[[dict], float],
                sigma: float, samples: int, antithetic: bool,
                seed: int) -> tuple[dict, float]:
    """(1/(m sigma)) sum F(theta + sigma eps_i) eps_i over standard-normal
    perturbations; antithetic mode pairs +-eps.  Deterministic under seed."""
    if antithetic and samples % 2:
        raise StrategyError("antithetic es needs an even sample count")
    base = _flatten(theta)
    d = base.size
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE5)))
    if antithetic:
        half = rng.standard_normal((samples // 2, d))
        eps = np.empty((samples, d))
        eps[0::2] = half
        eps[1::2] = -half
    else:
        eps = rng.standard_normal((samples, d))
    acc = np.zeros(d)
    for i in range(samples):
        val = value_fn(_unflatten(base + sigma * eps[i], theta))
        acc += val * eps[i]
    est = acc / (samples * sigma)
    return _unflatten(est, theta), value_fn(_unflatten(base, theta))


# ---------------------------------------------------------------------------
# episode-level surface used by the run loop

def outer_grad_unrolled(w: MamlWrapper, episode, spec: StrategySpec, loss_spec):
    inner, outer = episode_losses(w.model, loss_spec, episode)
    return unrolled_gradient(w.theta, inner, outer, spec.inner_steps, w.lr_alpha,
                             first_order=w.first_order,
                             allow_unused=w.allow_unused)


def outer_grad_first_order(w: MamlWrapper, episode, spec: StrategySpec, loss_spec):
    inner, outer = episode_losses(w.model, loss_spec, episode)
    return first_order_gradient(w.theta, inner, outer, spec.inner_steps,
                                w.lr_alpha, allow_unused=w.allow_unused)


def outer_grad_implicit(w: MamlWrapper, episode, spec: StrategySpec, loss_spec):
    if w.first_order:
        raise StrategyError(
            "implicit strategy is incompatible with first_order=True")
    inner, outer = episode_losses(w.model, loss_spec, episode)
    return implicit_gradient(w.theta, inner, outer, spec.lam, spec.cg_iters,
                             spec.cg_tol, spec.inner_steps, w.lr_alpha)


def outer_grad_es(w: MamlWrapper, episode, spec: StrategySpec, loss_spec,
                  seed: int = 0):
    inner, outer = episode_losses(w.model, loss_spec, episode)

    def value_fn(theta):
        if spec.inner_steps == 0:
            from .autograd import no_grad
            with no_grad():
                return outer({k: constant(v) for k, v in theta.items()}).item()
        adapted, val = first_order_gradient(theta, inner, outer,
                                            spec.inner_steps, w.lr_alpha)
        return val

    return es_gradient(w.theta, value_fn, spec.sigma, spec.samples,
                       spec.antithetic, seed)


OUTER_GRADS = {
    "unrolled": outer_grad_unrolled,
    "first_order": outer_grad_first_order,
    "implicit": outer_grad_implicit,
    "es": outer_grad_es,
}


# ---------------------------------------------------------------------------
# outer optimizers

@dataclass
class OuterOptimizer:
    kind: str                   # sgd | adam
    rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)
    _t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise StrategyError(f"unknown outer optimizer '{self.kind}'")
        if self.rate <= 0:
            raise StrategyError("outer optimizer rate must be positive")

    def step(self, theta: dict[str, np.ndarray],
             grad: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for k, v in theta.items():
            if k not in grad or np.asarray(grad[k]).shape != v.shape:
                raise StrategyError(f"gradient shape mismatch for '{k}'")
        if self.kind == "sgd":
            return {k: v - self.rate * grad[k] for k, v in theta.items()}
        self._t += 1
        out = {}
        for k, v in theta.items():
            m = self._m.get(k, np.zeros_like(v))
            s = self._v.get(k, np.zeros_like(v))
            m = self.beta1 * m + (1 - self.beta1) * grad[k]
            s = self.beta2 * s + (1 - self.beta2) * grad[k] ** 2
            self._m[k], self._v[k] = m, s
            mhat = m / (1 - self.beta1 ** self._t)
            vhat = s / (1 - self.beta2 ** self._t)
            out[k] = v - self.rate * mhat / (np.sqrt(vhat) + self.eps)
        return out


def outer_apply(opt: OuterOptimizer, theta, grad):
    return opt.step(theta, grad)


# ---------------------------------------------------------------------------
# parameter search

@dataclass(frozen=True)
class SearchSpace:
    axes: dict[str, object]     # name -> list of values, or (lo, hi) range
    mode: str = "grid"          # grid | random
    n: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.axes:
            raise StrategyError("search space needs at least one axis")
        if self.mode not in ("grid", "random"):
            raise StrategyError(f"unknown search mode '{self.mode}'")
        if self.mode == "random" and self.n < 1:
            raise StrategyError("random search needs n >= 1")

    def candidates(self) -> list[dict]:
        if self.mode == "grid":
            names = list(self.axes)
            pools = []
            for name in names:
                axis = self.axes[name]
                if isinstance(axis, tuple):
                    raise StrategyError(
                        f"grid mode needs finite values for axis '{name}', got a range")
                pools.append(list(axis))
            return [dict(zip(names, combo)) for combo in itertools.product(*pools)]
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0x5EA)))
        out = []
        for _ in range(self.n):
            pick = {}
            for name, axis in self.axes.items():
                if isinstance(axis, tuple):
                    lo, hi = axis
                    pick[name] = float(rng.uniform(lo, hi))
                else:
                    pick[name] = axis[int(rng.integers(len(axis)))]
            out.append(pick)
        return out


def param_search(space: SearchSpace, runner: Callable[[dict], object]) -> list[dict]:
    """Evaluate every candidate; failures are recorded and skipped in the
    ranking.  Results sort by score ascending (a loss), failures last."""
    results = []
    for i, cand in enumerate(space.candidates()):
        entry = {"index": i, "params": cand, "score": None, "report": None,
                 "error": None}
        try:
            value = runner(dict(cand))
            if isinstance(value, tuple):
                entry["score"], entry["report"] = float(value[0]), value[1]
            else:
                entry["score"] = float(value)
        except Exception as exc:  # search must survive individual failures
            entry["error"] = f"{type(exc).__name__}: {exc}"
        results.append(entry)
    ok = sorted((r for r in results if r["error"] is None),
                key=lambda r: (r["score"], r["index"]))
    failed = [r for r in results if r["error"] is not None]
    return ok + failed
