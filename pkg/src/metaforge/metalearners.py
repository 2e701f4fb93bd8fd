"""Meta-learner wrappers: learned initialization (MAML family) and learned
metric spaces (ProtoNet, MatchingNet).

Initialization-based learners hold meta-parameters as plain arrays between
episodes; each episode opens a tape, registers leaf snapshots of theta, and
adapts a clone with tape-connected (or, in first-order mode, detached) SGD
steps.  Clones never write back to their origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autograd import (
    Tensor,
    apply,
    backward,
    constant,
    grad_or_none,
    tape,
    tensor_of,
)
from .learners import Backbone, LossSpec, forward, loss
from .tasks import Episode


class MetaLearnError(Exception):
    pass


# ---------------------------------------------------------------------------
# MAML wrapper and clones

@dataclass
class MamlWrapper:
    model: Backbone
    lr_alpha: float
    lr_beta: float
    first_order: bool = False
    allow_unused: bool = False
    allow_nograd: bool = False
    theta: dict[str, np.ndarray] = field(default_factory=dict)

    def set_theta(self, theta: dict[str, np.ndarray]) -> None:
        self.theta = {k: np.array(v) for k, v in theta.items()}


def maml_wrap(model: Backbone, lr_alpha: float, lr_beta: float,
              first_order: bool = False, allow_unused: bool | None = None,
              allow_nograd: bool = False) -> MamlWrapper:
    """Wrap a backbone; its parameters become the meta-parameters theta.

    ``allow_unused=None`` follows ``allow_nograd``, matching the wrapper's
    documented default chain.
    """
    if lr_alpha <= 0 or lr_beta <= 0:
        raise MetaLearnError(
            f"learning rates must be positive (lr_alpha={lr_alpha}, lr_beta={lr_beta})")
    if allow_unused is None:
        allow_unused = allow_nograd
    return MamlWrapper(model, lr_alpha, lr_beta, bool(first_order),
                       bool(allow_unused), bool(allow_nograd),
                       model.parameters())


@dataclass
class CloneState:
    params: dict[str, Tensor]
    theta_leaves: dict[str, Tensor]
    steps_taken: int
    wrapper: MamlWrapper
    first_order: bool


def clone(w: MamlWrapper, first_order: bool | None = None) -> CloneState:
    """Snapshot theta onto the active tape.

    Second-order mode keeps the clone's parameters identical to the leaves, so
    gradients taken after adaptation reach theta; first-order mode will detach
    after every adapt step instead.
    """
    fo = w.first_order if first_order is None else first_order
    leaves = {k: tensor_of(v.shape, v, requires_grad=True)
              for k, v in w.theta.items()}
    return CloneState(dict(leaves), leaves, 0, w, fo)


def _adapt_once(params: dict[str, Tensor], inner_loss: Tensor, *,
                lr: float | dict[str, Tensor], create_graph: bool,
                allow_unused: bool, allow_nograd: bool, detach: bool,
                update_names=None) -> dict[str, Tensor]:
    """One SGD step on the tracked parameters; shared by every inner loop."""
    names = list(params)
    untracked = [k for k in names if not params[k].requires_grad]
    if untracked and not allow_nograd:
        raise MetaLearnError(
            f"parameters {untracked} have requires_grad=False; set allow_nograd "
            "to skip them during adaptation")
    if update_names is not None:
        unknown = set(update_names) - set(names)
        if unknown:
            raise MetaLearnError(f"mask names outside the parameter set: {sorted(unknown)}")
    active = [k for k in names
              if params[k].requires_grad
              and (update_names is None or k in update_names)]
    grads = grad_or_none(inner_loss, [params[k] for k in active],
                         create_graph=create_graph)
    unused = [k for k, g in zip(active, grads) if g is None]
    if unused and not allow_unused:
        raise MetaLearnError(
            f"parameters {unused} are unused by the inner loss; set allow_unused "
            "to leave them in place")
    out = dict(params)
    for k, g in zip(active, grads):
        if g is None:
            continue
        step = apply("mul", g, lr[k]) if isinstance(lr, dict) \
            else apply("scale", g, c=lr)
        new = apply("sub", params[k], step)
        if detach:
            new = tensor_of(new.data.shape, new.data, requires_grad=True)
        out[k] = new
    return out


def adapt(c: CloneState, inner_loss: Tensor) -> CloneState:
    """params <- params - lr_alpha * grad(inner_loss); differentiable through
    the step unless the clone is first-order."""
    w = c.wrapper
    new_params = _adapt_once(c.params, inner_loss, lr=w.lr_alpha,
                             create_graph=not c.first_order,
                             allow_unused=w.allow_unused,
                             allow_nograd=w.allow_nograd,
                             detach=c.first_order)
    return replace(c, params=new_params, steps_taken=c.steps_taken + 1)


# ---------------------------------------------------------------------------
# ANIL

@dataclass(frozen=True)
class PartitionMask:
    head: frozenset[str]
    body: frozenset[str]

    def validate(self, names) -> None:
        names = set(names)
        if self.head & self.body:
            raise MetaLearnError(f"mask overlap: {sorted(self.head & self.body)}")
        if self.head | self.body != names:
            missing = names - (self.head | self.body)
            extra = (self.head | self.body) - names
            raise MetaLearnError(
                f"mask must cover parameters exactly (missing {sorted(missing)}, "
                f"unknown {sorted(extra)})")


def final_layer_mask(model: Backbone) -> PartitionMask:
    """Default ANIL partition: the final linear layer is the head."""
    names = model.param_names()
    prefix = names[-1].rsplit(".", 1)[0]
    head = frozenset(n for n in names if n.startswith(prefix + "."))
    return PartitionMask(head, frozenset(names) - head)


def anil_adapt(c: CloneState, mask: PartitionMask, inner_loss: Tensor) -> CloneState:
    """Inner step on head parameters only; body stays adapt-frozen."""
    mask.validate(c.params)
    w = c.wrapper
    new_params = _adapt_once(c.params, inner_loss, lr=w.lr_alpha,
                             create_graph=not c.first_order,
                             allow_unused=True,
                             allow_nograd=w.allow_nograd,
                             detach=c.first_order,
                             update_names=mask.head)
    return replace(c, params=new_params, steps_taken=c.steps_taken + 1)


# ---------------------------------------------------------------------------
# MetaSGD

@dataclass
class MetaSgdState:
    model: Backbone
    theta: dict[str, np.ndarray]
    per_param_lr: dict[str, np.ndarray]
    lr_beta: float
    first_order: bool = False

    def check_shapes(self):
        for k, v in self.theta.items():
            if k not in self.per_param_lr or self.per_param_lr[k].shape != v.shape:
                raise MetaLearnError(f"per_param_lr shape drift for '{k}'")


def metasgd_wrap(model: Backbone, init_lr: float, lr_beta: float,
                 first_order: bool = False) -> MetaSgdState:
    if init_lr <= 0 or lr_beta <= 0:
        raise MetaLearnError("learning rates must be positive")
    theta = model.parameters()
    lrs = {k: np.full(v.shape, init_lr) for k, v in theta.items()}
    return MetaSgdState(model, theta, lrs, lr_beta, first_order)


def metasgd_episode_gradient(state: MetaSgdState, inner_loss_fn, outer_loss_fn,
                             inner_steps: int) -> tuple[dict, dict, float]:
    """Outer gradients for both theta and the learned rates on one episode.

    Learned rates are unclamped; negative rates are legal and simply reverse
    the inner step direction.  In first-order mode the inner Jacobian is
    dropped, so the rates receive zero gradient.
    """
    state.check_shapes()
    with tape():
        p_leaves = {k: tensor_of(v.shape, v, requires_grad=True)
                    for k, v in state.theta.items()}
        lr_leaves = {k: tensor_of(v.shape, v, requires_grad=True)
                     for k, v in state.per_param_lr.items()}
        params = dict(p_leaves)
        for _ in range(inner_steps):
            params = _adapt_once(params, inner_loss_fn(params), lr=lr_leaves,
                                 create_graph=not state.first_order,
                                 allow_unused=False, allow_nograd=False,
                                 detach=state.first_order)
        out = outer_loss_fn(params)
        targets = (list(params.values()) if state.first_order
                   else list(p_leaves.values()))
        lr_targets = list(lr_leaves.values())
        grads = grad_or_none(out, targets + lr_targets, create_graph=False)
    names = list(state.theta)
    g_theta = {k: (np.array(g.data) if g is not None else np.zeros_like(state.theta[k]))
               for k, g in zip(names, grads[:len(names)])}
    g_lr = {k: (np.array(g.data) if g is not None else np.zeros_like(state.per_param_lr[k]))
            for k, g in zip(names, grads[len(names):])}
    return g_theta, g_lr, out.item()


def metasgd_step(state: MetaSgdState, episodes, inner_loss_of, outer_loss_of,
                 inner_steps: int = 1) -> MetaSgdState:
    """Averaged outer step over a batch; rates and weights both learn."""
    if not episodes:
        raise MetaLearnError("metasgd_step needs a nonempty episode batch")
    acc_t = {k: np.zeros_like(v) for k, v in state.theta.items()}
    acc_l = {k: np.zeros_like(v) for k, v in state.per_param_lr.items()}
    for ep in episodes:
        gt, gl, _ = metasgd_episode_gradient(
            state, inner_loss_of(ep), outer_loss_of(ep), inner_steps)
        for k in acc_t:
            acc_t[k] += gt[k]
            acc_l[k] += gl[k]
    n = float(len(episodes))
    state.theta = {k: v - state.lr_beta * acc_t[k] / n for k, v in state.theta.items()}
    state.per_param_lr = {k: v - state.lr_beta * acc_l[k] / n
                          for k, v in state.per_param_lr.items()}
    return state


# ---------------------------------------------------------------------------
# Reptile

def reptile_step(model: Backbone, theta: dict[str, np.ndarray], episodes,
                 inner_steps: int, lr_inner: float, lr_outer: float,
                 loss_of) -> dict[str, np.ndarray]:
    """theta <- theta + lr_outer * mean(phi_adapted - theta) over the batch.

    The inner run is plain SGD on each episode's support loss; no gradient
    flows across episodes, so everything here stays first-order.
    """
    if inner_steps < 1:
        raise MetaLearnError(f"reptile needs inner_steps >= 1, got {inner_steps}")
    deltas = {k: np.zeros_like(v) for k, v in theta.items()}
    for ep in episodes:
        loss_fn = loss_of(ep)
        with tape():
            params = {k: tensor_of(v.shape, v, requires_grad=True)
                      for k, v in theta.items()}
            for _ in range(inner_steps):
                params = _adapt_once(params, loss_fn(params), lr=lr_inner,
                                     create_graph=False, allow_unused=False,
                                     allow_nograd=False, detach=True)
        for k in deltas:
            deltas[k] += params[k].data - theta[k]
    n = float(len(episodes))
    return {k: theta[k] + lr_outer * deltas[k] / n for k in theta}


# ---------------------------------------------------------------------------
# batched outer step for initialization-based learners

def meta_step_maml(w: MamlWrapper, episodes, outer_grad, optimizer=None):
    """One outer update: per-episode gradients from the strategy callable,
    reduced as an ordered arithmetic mean, then applied to theta.

    ``outer_grad(w, episode) -> (grad dict, query loss)`` is supplied by the
    optimization-strategy layer.  Returns (mean gradient, updated theta).
    """
    if not episodes:
        raise MetaLearnError("meta_step_maml needs a nonempty episode batch")
    acc: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in w.theta.items()}
    for ep in episodes:
        grads, _ = outer_grad(w, ep)
        for k in acc:
            acc[k] = acc[k] + grads[k]
    n = float(len(episodes))
    mean_grad = {k: v / n for k, v in acc.items()}
    if optimizer is not None:
        w.set_theta(optimizer.step(w.theta, mean_grad))
    else:
        w.set_theta({k: w.theta[k] - w.lr_beta * mean_grad[k] for k in w.theta})
    return mean_grad, w.theta


# ---------------------------------------------------------------------------
# episode loss builders

def episode_losses(backbone: Backbone, spec: LossSpec, episode: Episode):
    """(inner, outer) loss closures over a model parameter dict."""
    def target(y, labels):
        if spec.kind == "mse":
            return y
        return labels

    def inner(params):
        pred = forward(backbone, episode.support_x, params)
        return loss(spec, pred, target(episode.support_y, episode.support_labels))

    def outer(params):
        pred = forward(backbone, episode.query_x, params)
        return loss(spec, pred, target(episode.query_y, episode.query_labels))

    return inner, outer


# ---------------------------------------------------------------------------
# metric-based learners

def protonet_classify(embedder: Backbone, episode: Episode,
                      params: dict[str, Tensor] | None = None) -> Tensor:
    """Query logits = negative squared distance to class prototypes.

    Ties in the argmax resolve to the lower class index (numpy argmax order).
    """
    labels = episode.support_labels
    n = episode.n_way
    counts = np.bincount(labels, minlength=n)
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise MetaLearnError(f"protonet: support has empty classes {empty}")
    e_s = forward(embedder, episode.support_x, params)
    e_q = forward(embedder, episode.query_x, params)
    avg = np.zeros((n, labels.size))
    avg[labels, np.arange(labels.size)] = 1.0 / counts[labels]
    protos = apply("matmul", constant(avg), e_s)                  # (n, d)
    qp = apply("scale", apply("matmul", e_q, apply("transpose", protos)), c=2.0)
    q2 = apply("sum", apply("square", e_q), axis=1)               # (Q,)
    p2 = apply("sum", apply("square", protos), axis=1)            # (n,)
    penalty = apply("add",
                    apply("expand_cols", q2, n=n),
                    apply("broadcast", p2, n=e_q.data.shape[0]))
    return apply("sub", qp, penalty)


def matchingnet_classify(embedder: Backbone, episode: Episode,
                         params: dict[str, Tensor] | None = None) -> Tensor:
    """Class scores = attention-weighted vote of support labels, attention
    being a softmax over cosine similarities.  Rows sum to one."""
    e_s = forward(embedder, episode.support_x, params)
    e_q = forward(embedder, episode.query_x, params)
    for name, e in (("support", e_s), ("query", e_q)):
        norms = np.linalg.norm(e.data, axis=1)
        if (norms == 0).any():
            raise MetaLearnError(
                f"matchingnet: zero-norm {name} embedding, cosine undefined")
    s_count, q_count = e_s.data.shape[0], e_q.data.shape[0]
    nq = apply("sqrt", apply("sum", apply("square", e_q), axis=1))
    ns = apply("sqrt", apply("sum", apply("square", e_s), axis=1))
    cos = apply("div",
                apply("div", apply("matmul", e_q, apply("transpose", e_s)),
                      apply("expand_cols", nq, n=s_count)),
                apply("broadcast", ns, n=q_count))
    row_max = cos.data.max(axis=1)
    shifted = apply("sub", cos, constant(np.repeat(row_max[:, None], s_count, axis=1)))
    num = apply("exp", shifted)
    att = apply("div", num,
                apply("expand_cols", apply("sum", num, axis=1), n=s_count))
    labels = episode.support_labels
    onehot = np.zeros((s_count, episode.n_way))
    onehot[np.arange(s_count), labels] = 1.0
    return apply("matmul", att, constant(onehot))


def metric_episode_loss(kind: str, embedder: Backbone, episode: Episode):
    """Query-set training loss closure for a metric learner."""
    labels = episode.query_labels

    def fn(params):
        if kind == "protonet":
            logits = protonet_classify(embedder, episode, params)
            from .learners import cross_entropy
            return cross_entropy(logits, labels)
        scores = matchingnet_classify(embedder, episode, params)
        onehot = np.zeros(scores.data.shape)
        onehot[np.arange(labels.size), labels] = 1.0
        picked = apply("sum", apply("mul", scores, constant(onehot)), axis=1)
        eps = constant(np.full(labels.size, 1e-12))
        return apply("neg", apply("mean", apply("log", apply("add", picked, eps))))

    return fn
