"""Run orchestration: assembles a validated pipeline, executes the
meta-training loop under the serial or parallel training method, evaluates
pre/post-adaptation performance on held-out tasks, and writes the run report.

Determinism contract: (config, seed) fully determines every reported metric.
Episodes are sampled on the coordinating thread, per-episode work is pure,
and the meta-batch reduction is an ordered arithmetic mean, so serial and
parallel execution produce bitwise-identical numbers.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autograd import constant, no_grad, tape, tensor_of
from .learners import LossSpec, backbone_build, forward
from .metalearners import (
    MamlWrapper,
    MetaSgdState,
    _adapt_once,
    episode_losses,
    final_layer_mask,
    maml_wrap,
    metasgd_episode_gradient,
    metasgd_wrap,
    metric_episode_loss,
    reptile_step,
)
from .registry import PipelineConfig, check_compat, serialize_config
from .strategies import (
    OuterOptimizer,
    StrategySpec,
    es_gradient,
    first_order_gradient,
    implicit_gradient,
    unrolled_gradient,
)
from .tasks import (
    DataSplit,
    KShots,
    LabelFree,
    LoadData,
    NWays,
    TaskDataset,
    load_binary,
    load_csv,
    make_blobs,
    meta_dataset_wrap,
    sampler_select,
    synth_tasks,
)


class RunError(Exception):
    pass


@dataclass
class DeviceReport:
    logical_cores: int
    modes: list[str]
    accelerator: bool = False

    def to_json(self) -> dict:
        return {"logical_cores": self.logical_cores, "modes": self.modes,
                "accelerator": self.accelerator}


def device_check() -> DeviceReport:
    """Probe what this host can actually run; never claims absent hardware."""
    cores = os.cpu_count() or 1
    modes = ["serial"] + (["parallel"] if cores > 1 else [])
    return DeviceReport(cores, modes, accelerator=False)


@dataclass
class RunReport:
    config: dict
    seed: int
    losses: list[float]
    eval: dict
    wall_seconds: float
    parallel: int

    def to_json(self) -> dict:
        return {"config": self.config, "seed": self.seed, "losses": self.losses,
                "eval": self.eval, "wall_seconds": self.wall_seconds,
                "parallel": self.parallel}


def report_to_text(data: dict) -> str:
    """17-significant-digit JSON with sorted keys; byte-stable."""
    def fmt(v, indent):
        pad = " " * indent
        if isinstance(v, float):
            text = format(v, ".17g")
            return text if ("." in text or "e" in text or "n" in text) else text + ".0"
        if isinstance(v, bool) or isinstance(v, int) or v is None:
            return json.dumps(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            if not v:
                return "[]"
            inner = ",\n".join(pad + "  " + fmt(x, indent + 2) for x in v)
            return "[\n" + inner + "\n" + pad + "]"
        if isinstance(v, dict):
            if not v:
                return "{}"
            inner = ",\n".join(
                f'{pad}  {json.dumps(str(k))}: {fmt(v[k], indent + 2)}'
                for k in v)
            return "{\n" + inner + "\n" + pad + "}"
        raise TypeError(f"not serializable: {type(v)}")
    return fmt(data, 0) + "\n"


def write_report_atomic(path, data: dict) -> None:
    """Write via tmp+rename so a killed run leaves no partial file."""
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(report_to_text(data))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# episode providers: deterministic per (iteration, index), main-thread only

class ClassificationProvider:
    def __init__(self, cfg: PipelineConfig, feature_dim: int):
        h = cfg.hyper
        items = self._items(cfg, feature_dim)
        transforms = [NWays(h["n_way"]), KShots(h["k_shot"]), LoadData()]
        if cfg.split is not None:
            transforms.append(DataSplit(cfg.split["t"], cfg.split["v"]))
        if "label_free" in cfg.modifiers:
            transforms.append(LabelFree())
        source = meta_dataset_wrap(items)
        self.train = TaskDataset(source, transforms, num_tasks=h["num_tasks"],
                                 seed=cfg.seed)
        if h["sampler"] != "uniform":
            self.train.set_sampler(sampler_select(h["sampler"]))
        self.eval_ds = TaskDataset(source, transforms, num_tasks=h["eval_tasks"],
                                   seed=cfg.seed + 0x5EED)

    @staticmethod
    def _items(cfg: PipelineConfig, feature_dim: int):
        h = cfg.hyper
        if h["data_path"]:
            path = h["data_path"]
            items = load_binary(path) if path.endswith((".mft", ".bin")) \
                else load_csv(path)
            if items[0][0].size != feature_dim:
                raise RunError(
                    f"dataset feature dim {items[0][0].size} does not match "
                    f"backbone input {feature_dim}")
            return items
        items, _ = make_blobs(h["blob_classes"], h["blob_per_class"],
                              feature_dim, h["blob_spread"], h["blob_noise"],
                              seed=cfg.seed)
        return items

    def train_episode(self, iteration: int, j: int):
        return self.train.sample()

    def eval_episode(self, j: int):
        return self.eval_ds[j % len(self.eval_ds)]

    def feedback(self, signature, loss_value):
        self.train.feedback(signature, loss_value)


class RegressionProvider:
    def __init__(self, cfg: PipelineConfig, kind: str):
        self.family = synth_tasks(kind, seed=cfg.seed)
        self.k = cfg.hyper["k_shot"]
        self.seed = cfg.seed

    def train_episode(self, iteration: int, j: int):
        rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, 0x7A, iteration, j)))
        return self.family.sample(self.k, self.k, rng)

    def eval_episode(self, j: int):
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0xEB, j)))
        return self.family.sample(self.k, self.k, rng)

    def feedback(self, signature, loss_value):
        pass


# ---------------------------------------------------------------------------
# pipeline assembly

_LOSS_BY_OPTION = {"cross_entropy": "cross_entropy", "mse": "mse",
                   "contrastive": "contrastive"}


@dataclass
class Pipeline:
    cfg: PipelineConfig
    algo: str
    spec: StrategySpec
    loss_spec: LossSpec
    backbone: object
    provider: object
    theta: dict
    wrapper: MamlWrapper | None = None
    metasgd: MetaSgdState | None = None
    mask_names: frozenset | None = None
    optimizer: OuterOptimizer | None = None
    classification: bool = False


def build_pipeline(cfg: PipelineConfig) -> Pipeline:
    report = check_compat(cfg)
    if not report.ok:
        details = "; ".join(f"{v.rule}: {v.message}" for v in report.violations)
        raise RunError(f"config fails compatibility: {details}")
    h = cfg.hyper
    algo = h["algorithm"]
    task = cfg.slots["task_construction"]
    label_free = "label_free" in cfg.modifiers
    classification = task == "classification" and not label_free
    metric_based = algo in ("protonet", "matchingnet")

    if task == "classification":
        out_dim = h["embed_dim"] if (metric_based or label_free) else h["n_way"]
    else:
        out_dim = 1
    if cfg.slots["backbone"] == "conv":
        in_shape = tuple(h["in_shape"])
        backbone = backbone_build("conv", blocks=h["conv_blocks"],
                                  channels=h["channels"], in_shape=in_shape,
                                  out_dim=out_dim, activation=h["activation"],
                                  seed=cfg.seed + 1)
        feature_dim = backbone.in_dim
    else:
        feature_dim = {"classification": h["blob_dim"], "regression": 1,
                       "prediction": 4}[task]
        backbone = backbone_build("mlp", widths=h["widths"], in_dim=feature_dim,
                                  out_dim=out_dim, activation=h["activation"],
                                  seed=cfg.seed + 1)

    if task == "classification":
        provider = ClassificationProvider(cfg, feature_dim)
    else:
        provider = RegressionProvider(cfg, "sinusoid" if task == "regression"
                                      else "series")

    spec = StrategySpec(cfg.slots["optimization_strategy"],
                        inner_steps=h["inner_steps"], lam=h["lambda"],
                        cg_iters=h["cg_iters"], cg_tol=h["cg_tol"],
                        sigma=h["sigma"], samples=h["m"],
                        antithetic=h["antithetic"])
    loss_spec = LossSpec(_LOSS_BY_OPTION[cfg.slots["base_learner"]])
    pipe = Pipeline(cfg, algo, spec, loss_spec, backbone, provider,
                    theta=backbone.parameters(), classification=classification)
    if algo in ("maml", "anil", "esmaml"):
        pipe.wrapper = maml_wrap(backbone, h["lr_alpha"], h["lr_beta"],
                                 first_order=h["first_order"],
                                 allow_unused=h["allow_unused"],
                                 allow_nograd=h["allow_nograd"])
        pipe.theta = pipe.wrapper.theta
        if algo == "anil":
            pipe.mask_names = final_layer_mask(backbone).head
    elif algo == "metasgd":
        pipe.metasgd = metasgd_wrap(
            backbone, h["lr_alpha"], h["lr_beta"],
            first_order=h["first_order"] or spec.kind == "first_order")
        pipe.theta = pipe.metasgd.theta
    if algo != "reptile":
        pipe.optimizer = OuterOptimizer(h["outer_opt"], h["lr_beta"])
    return pipe


def _model_losses(pipe: Pipeline, episode):
    if pipe.algo in ("protonet", "matchingnet"):
        fn = metric_episode_loss(pipe.algo, pipe.backbone, episode)
        return fn, fn
    return episode_losses(pipe.backbone, pipe.loss_spec, episode)


def _episode_gradient(pipe: Pipeline, episode, es_seed: int):
    """(gradient dict over theta, query loss) for one episode; pure."""
    h = pipe.cfg.hyper
    inner, outer = _model_losses(pipe, episode)
    kind = pipe.spec.kind
    steps = 0 if pipe.algo in ("protonet", "matchingnet") else pipe.spec.inner_steps
    mask = pipe.mask_names

    if pipe.algo == "metasgd":
        if kind in ("unrolled", "first_order"):
            gt, gl, val = metasgd_episode_gradient(pipe.metasgd, inner, outer, steps)
            return {**gt, **{f"lr::{k}": v for k, v in gl.items()}}, val
        # es over the joint (weights, rates) space
        def value_fn(vec):
            theta = {k: v for k, v in vec.items() if not k.startswith("lr::")}
            lrs = {k[4:]: v for k, v in vec.items() if k.startswith("lr::")}
            with tape():
                params = {k: tensor_of(v.shape, v, requires_grad=True)
                          for k, v in theta.items()}
                lr_t = {k: constant(v) for k, v in lrs.items()}
                for _ in range(steps):
                    params = _adapt_once(params, inner(params), lr=lr_t,
                                         create_graph=False, allow_unused=False,
                                         allow_nograd=False, detach=True)
                return outer(params).item()
        joint_vec = {**pipe.metasgd.theta,
                     **{f"lr::{k}": v for k, v in pipe.metasgd.per_param_lr.items()}}
        return es_gradient(joint_vec, value_fn, pipe.spec.sigma,
                           pipe.spec.samples, pipe.spec.antithetic, es_seed)

    theta = pipe.theta
    first_order = h["first_order"]
    allow_unused = h["allow_unused"]
    if kind == "unrolled":
        return unrolled_gradient(theta, inner, outer, steps, h["lr_alpha"],
                                 first_order=first_order,
                                 allow_unused=allow_unused, update_names=mask)
    if kind == "first_order":
        return first_order_gradient(theta, inner, outer, steps, h["lr_alpha"],
                                    allow_unused=allow_unused, update_names=mask)
    if kind == "implicit":
        if first_order:
            raise RunError("implicit strategy is incompatible with first_order")
        return implicit_gradient(theta, inner, outer, pipe.spec.lam,
                                 pipe.spec.cg_iters, pipe.spec.cg_tol,
                                 steps, h["lr_alpha"], update_names=mask)

    def value_fn(vec):
        if steps == 0:
            with no_grad():
                return outer({k: constant(v) for k, v in vec.items()}).item()
        _, val = first_order_gradient(vec, inner, outer, steps, h["lr_alpha"],
                                      allow_unused=True, update_names=mask)
        return val
    return es_gradient(theta, value_fn, pipe.spec.sigma, pipe.spec.samples,
                       pipe.spec.antithetic, es_seed)


def _apply_outer(pipe: Pipeline, mean_grad: dict):
    if pipe.algo == "metasgd":
        st = pipe.metasgd
        joint = {**st.theta, **{f"lr::{k}": v for k, v in st.per_param_lr.items()}}
        updated = pipe.optimizer.step(joint, mean_grad)
        st.theta = {k: updated[k] for k in st.theta}
        st.per_param_lr = {k: updated[f"lr::{k}"] for k in st.per_param_lr}
        pipe.theta = st.theta
        return
    pipe.theta = pipe.optimizer.step(pipe.theta, mean_grad)
    if pipe.wrapper is not None:
        pipe.wrapper.set_theta(pipe.theta)
        pipe.theta = pipe.wrapper.theta


def _grad_keys(pipe: Pipeline) -> list[str]:
    if pipe.algo == "metasgd":
        return list(pipe.metasgd.theta) + [f"lr::{k}" for k in pipe.metasgd.per_param_lr]
    return list(pipe.theta)


# ---------------------------------------------------------------------------
# evaluation

def _eval_adapt_curve(pipe: Pipeline, episode, steps: int) -> list[float]:
    """Metric after 0..steps adaptation steps on the support set."""
    h = pipe.cfg.hyper
    if pipe.algo in ("protonet", "matchingnet"):
        return [_metric_value(pipe, episode, None)]
    lr = h["lr_alpha"]
    inner, _ = _model_losses(pipe, episode)
    curve = []
    with tape():
        params = {k: tensor_of(v.shape, v, requires_grad=True)
                  for k, v in pipe.theta.items()}
        lr_map = None
        if pipe.algo == "metasgd":
            lr_map = {k: constant(v) for k, v in pipe.metasgd.per_param_lr.items()}
        curve.append(_metric_value(pipe, episode, params))
        for _ in range(steps):
            params = _adapt_once(params, inner(params),
                                 lr=lr_map if lr_map is not None else lr,
                                 create_graph=False, allow_unused=True,
                                 allow_nograd=False, detach=True,
                                 update_names=pipe.mask_names)
            curve.append(_metric_value(pipe, episode, params))
    return curve


def _metric_value(pipe: Pipeline, episode, params) -> float:
    """Accuracy for classification pipelines, query loss otherwise."""
    with no_grad():
        if params is None:
            params = {k: constant(v) for k, v in pipe.theta.items()}
        if pipe.algo in ("protonet", "matchingnet"):
            from .metalearners import matchingnet_classify, protonet_classify
            fn = protonet_classify if pipe.algo == "protonet" else matchingnet_classify
            scores = fn(pipe.backbone, episode, params)
            pred = scores.data.argmax(axis=1)
            return float((pred == episode.query_labels).mean())
        pred = forward(pipe.backbone, episode.query_x, params)
        if pipe.classification:
            return float((pred.data.argmax(axis=1) == episode.query_labels).mean())
        _, outer = episode_losses(pipe.backbone, pipe.loss_spec, episode)
        return outer(params).item()


def evaluate(pipe: Pipeline) -> dict:
    h = pipe.cfg.hyper
    steps = h["eval_steps"] if h["eval_steps"] >= 0 else h["inner_steps"]
    curves = []
    for j in range(h["eval_tasks"]):
        ep = pipe.provider.eval_episode(j)
        curves.append(_eval_adapt_curve(pipe, ep, steps))
    arr = np.asarray(curves)
    curve = [float(v) for v in arr.mean(axis=0)]
    return {"pre": curve[0], "post": curve[-1], "curve": curve}


# ---------------------------------------------------------------------------
# the run loop

def run(cfg: PipelineConfig, report_path=None, progress=None) -> RunReport:
    """Execute the configured pipeline and return its report.

    ``progress(iteration, loss)`` is invoked after every meta-iteration so a
    caller (the HTTP service) can surface incremental metrics.
    """
    start = time.monotonic()
    pipe = build_pipeline(cfg)
    h = cfg.hyper
    threads = cfg.parallel if cfg.slots["training_method"] == "parallel" else 1
    losses: list[float] = []

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for it in range(h["iterations"]):
            episodes = [pipe.provider.train_episode(it, j)
                        for j in range(h["meta_batch"])]
            if pipe.algo == "reptile":
                with no_grad():
                    params = {k: constant(v) for k, v in pipe.theta.items()}
                    vals = [_model_losses(pipe, ep)[1](params).item()
                            for ep in episodes]
                pipe.theta = reptile_step(
                    pipe.backbone, pipe.theta, episodes, max(1, h["inner_steps"]),
                    h["lr_alpha"], h["lr_beta"],
                    lambda ep: _model_losses(pipe, ep)[0])
                mean_loss = float(np.mean(vals))
            else:
                seeds = [int(np.random.SeedSequence(
                    (cfg.seed, 0xE5, it, j)).generate_state(1)[0])
                    for j in range(len(episodes))]
                jobs = list(zip(episodes, seeds))
                if pool is not None:
                    results = list(pool.map(
                        lambda args: _episode_gradient(pipe, *args), jobs))
                else:
                    results = [_episode_gradient(pipe, ep, s) for ep, s in jobs]
                keys = _grad_keys(pipe)
                mean_grad = {k: np.mean([r[0][k] for r in results], axis=0)
                             for k in keys}
                mean_loss = float(np.mean([r[1] for r in results]))
                _apply_outer(pipe, mean_grad)
                for ep, (_, val) in zip(episodes, results):
                    pipe.provider.feedback(ep.signature, val)
            if not np.isfinite(mean_loss):
                raise RunError(f"non-finite loss at iteration {it}; run aborted")
            losses.append(mean_loss)
            if progress is not None:
                progress(it, mean_loss)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    eval_block = evaluate(pipe)
    wall = time.monotonic() - start
    report = RunReport(json.loads(serialize_config(cfg)), cfg.seed, losses,
                       eval_block, wall, threads)
    if report_path is not None:
        write_report_atomic(report_path, report.to_json())
    return report


# ---------------------------------------------------------------------------
# report rendering

def render_report(data: dict) -> str:
    """Aligned plain-text table for a stored run report."""
    cfg = data.get("config", {})
    slots = cfg.get("slots", {})
    rows = [("slot: " + k, str(v)) for k, v in slots.items()]
    rows.append(("seed", str(data.get("seed"))))
    rows.append(("parallel", str(data.get("parallel"))))
    rows.append(("iterations", str(len(data.get("losses", [])))))
    losses = data.get("losses", [])
    if losses:
        rows.append(("first loss", f"{losses[0]:.6g}"))
        rows.append(("final loss", f"{losses[-1]:.6g}"))
    ev = data.get("eval", {})
    rows.append(("eval pre-adaptation", f"{ev.get('pre', float('nan')):.6g}"))
    rows.append(("eval post-adaptation", f"{ev.get('post', float('nan')):.6g}"))
    curve = ev.get("curve", [])
    if curve:
        rows.append(("adaptation curve", " -> ".join(f"{v:.4g}" for v in curve)))
    rows.append(("wall seconds", f"{data.get('wall_seconds', 0.0):.3f}"))
    width = max(len(r[0]) for r in rows)
    lines = [f"{name.ljust(width)}  {value}" for name, value in rows]
    return "\n".join(lines) + "\n"
