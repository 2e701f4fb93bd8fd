"""Building-block registry: slot descriptors, compatibility rules, pipeline
configuration parsing, and two-line run-script generation.

The registry lists the complete option matrix, including options this
artifact deliberately does not execute; those stay listable and selectable so
composition always gets an explicit verdict instead of a crash.  Compatibility
rules live in one table shared by the CLI, the HTTP service, and the UI.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

SLOTS = ("task_construction", "meta_learner", "base_learner", "backbone",
         "optimization_strategy", "training_method")


class RegistryError(Exception):
    pass


class ConfigError(RegistryError):
    """Parse/validation error; message carries the offending key path."""


@dataclass(frozen=True)
class ModuleDescriptor:
    slot: str
    option: str                  # short id used in configs
    name: str                    # human-readable option label
    canonical: str               # catalog module name, e.g. ".metalearnerOp()"
    implemented: bool
    tags: frozenset = frozenset()


def _d(slot, option, name, canonical, implemented, *tags):
    return ModuleDescriptor(slot, option, name, canonical, implemented,
                            frozenset(tags))


DESCRIPTORS: tuple[ModuleDescriptor, ...] = (
    _d("task_construction", "regression", "Task for regression",
       ".dataload()+.taskre()", True),
    _d("task_construction", "classification", "Task for classification",
       ".dataload()+.taskcl()", True, "needs_labels"),
    _d("task_construction", "prediction", "Task for prediction",
       ".dataload()+.taskpre()", True),
    _d("task_construction", "label_free", "Task for unsupervised learning",
       "+.tasklabelfree()", True, "additive"),
    _d("task_construction", "reinforcement", "Task for reinforcement learning",
       ".taskrein()", False, "exclusive"),

    _d("meta_learner", "optimization", "Optimization-based", ".metalearnerOp()", True),
    _d("meta_learner", "model", "Model-based", ".metalearnerMo()", False),
    _d("meta_learner", "metric", "Metric-based", ".metalearnerMe()", True,
       "needs_labels"),
    _d("meta_learner", "bayesian", "Bayesian-based", ".metalearnerBaye()", False,
       "bayesian"),
    _d("meta_learner", "general", "General-Learner", ".metalearner()", True),

    _d("base_learner", "cross_entropy", "classification",
       ".baselearner()+.lossce()", True),
    _d("base_learner", "mse", "regression / prediction",
       ".baselearner()+.lossmse()", True),
    _d("base_learner", "contrastive", "unsupervised",
       ".baselearner()+.losscont()", True),
    _d("base_learner", "q_learning", "reinforcement learning",
       ".baselearner()+.lossq()", False),

    _d("backbone", "mlp", "MLP", "backbone = MLP", True, "higher_order_safe"),
    _d("backbone", "conv", "Conv-N", "backbone = CONVN", True, "higher_order_safe"),
    _d("backbone", "vgg16", "VGG-16", "backbone = VGG16", False),
    _d("backbone", "resnet", "ResNet-N", "backbone = RESNETN", False),
    _d("backbone", "vit", "Transformer-based", "backbone = VIT", False),

    _d("optimization_strategy", "implicit", "Implicit gradient",
       ".optimizerIG()", True, "second_order"),
    _d("optimization_strategy", "unrolled", "Differentiable proxies",
       ".optimizerDP()", True, "second_order"),
    _d("optimization_strategy", "first_order", "Single-level approximation",
       ".optimizerSA()", True),
    _d("optimization_strategy", "es", "Derivative estimation",
       ".optimizerDE()", True),

    _d("training_method", "serial", "Serial computing", ".serial()", True),
    _d("training_method", "parallel", "Parallel computing", ".parallel()", True),
    _d("training_method", "multi_gpu", "Multi-GPU", "train_gpu = N", False),
    _d("training_method", "notebook", "Notebook online", "online", False),
)

_BY_SLOT_OPTION = {(d.slot, d.option): d for d in DESCRIPTORS}


_ALL_STRATEGIES = frozenset({"unrolled", "first_order", "implicit", "es"})


@dataclass(frozen=True)
class Algorithm:
    name: str
    category: str                # meta_learner option implementing it
    implemented: bool
    strategies: frozenset = _ALL_STRATEGIES


ALGORITHMS: dict[str, Algorithm] = {a.name: a for a in (
    Algorithm("maml", "optimization", True),
    Algorithm("reptile", "optimization", True, frozenset({"first_order"})),
    Algorithm("anil", "optimization", True),
    Algorithm("metasgd", "optimization", True,
              frozenset({"unrolled", "first_order", "es"})),
    Algorithm("esmaml", "optimization", True, frozenset({"es"})),
    Algorithm("protonet", "metric", True),
    Algorithm("matchingnet", "metric", True),
    Algorithm("metaoptnet", "optimization", False),
    Algorithm("relationnet", "metric", False),
    Algorithm("tnet", "optimization", False),
    Algorithm("mtnet", "optimization", False),
    Algorithm("metadropout", "optimization", False),
    Algorithm("cnap", "model", False),
    Algorithm("snail", "model", False),
    Algorithm("metaaug", "optimization", False),
    Algorithm("metacrl", "optimization", False),
)}

DEFAULT_ALGORITHM = {"optimization": "maml", "metric": "protonet",
                     "general": "maml"}


def registry_list(slot: str = "all") -> list[ModuleDescriptor]:
    """Descriptors in stable declaration order; unimplemented ones included."""
    if slot == "all":
        return list(DESCRIPTORS)
    if slot not in SLOTS:
        raise RegistryError(f"unknown slot '{slot}'")
    return [d for d in DESCRIPTORS if d.slot == slot]


def descriptor(slot: str, option: str) -> ModuleDescriptor:
    d = _BY_SLOT_OPTION.get((slot, option))
    if d is None:
        raise RegistryError(f"unknown option '{option}' for slot '{slot}'")
    return d


# ---------------------------------------------------------------------------
# pipeline configuration

_HYPER_SPEC: dict[str, tuple] = {
    # name: (parser, default, predicate, requirement text)
    "n_way": (int, 5, lambda v: v >= 2, ">= 2"),
    "k_shot": (int, 1, lambda v: v >= 1, ">= 1"),
    "lr_alpha": (float, 0.01, lambda v: v > 0, "> 0"),
    "lr_beta": (float, 0.001, lambda v: v > 0, "> 0"),
    "inner_steps": (int, 1, lambda v: v >= 0, ">= 0"),
    "eval_steps": (int, -1, lambda v: v >= -1, ">= 0, or -1 for inner_steps"),
    "eval_tasks": (int, 100, lambda v: v >= 1, ">= 1"),
    "lambda": (float, 1.0, lambda v: v > 0, "> 0"),
    "cg_iters": (int, 100, lambda v: v >= 1, ">= 1"),
    "cg_tol": (float, 1e-10, lambda v: v > 0, "> 0"),
    "sigma": (float, 0.1, lambda v: v > 0, "> 0"),
    "m": (int, 64, lambda v: v >= 2, ">= 2"),
    "antithetic": (bool, True, lambda v: True, ""),
    "meta_batch": (int, 4, lambda v: v >= 1, ">= 1"),
    "iterations": (int, 100, lambda v: v >= 0, ">= 0"),
    "algorithm": (str, "", lambda v: True, ""),
    "first_order": (bool, False, lambda v: True, ""),
    "allow_unused": (bool, False, lambda v: True, ""),
    "allow_nograd": (bool, False, lambda v: True, ""),
    "outer_opt": (str, "adam", lambda v: v in ("sgd", "adam"), "sgd or adam"),
    "dataset": (str, "", lambda v: True, ""),
    "data_path": (str, "", lambda v: True, ""),
    "widths": (list, [32, 32], lambda v: len(v) >= 1 and all(
        isinstance(x, int) and x >= 1 for x in v), "nonempty positive ints"),
    "activation": (str, "tanh", lambda v: v in ("tanh", "relu"), "tanh or relu"),
    "conv_blocks": (int, 4, lambda v: v >= 1, ">= 1"),
    "channels": (int, 8, lambda v: v >= 1, ">= 1"),
    "in_shape": (list, [1, 8, 8], lambda v: len(v) == 3 and all(
        isinstance(x, int) and x >= 1 for x in v), "three positive ints"),
    "embed_dim": (int, 16, lambda v: v >= 1, ">= 1"),
    "blob_classes": (int, 8, lambda v: v >= 2, ">= 2"),
    "blob_per_class": (int, 20, lambda v: v >= 1, ">= 1"),
    "blob_dim": (int, 4, lambda v: v >= 1, ">= 1"),
    "blob_spread": (float, 10.0, lambda v: v > 0, "> 0"),
    "blob_noise": (float, 1.0, lambda v: v >= 0, ">= 0"),
    "num_tasks": (int, -1, lambda v: v == -1 or v >= 1, ">= 1 or -1"),
    "sampler": (str, "uniform", lambda v: v in (
        "uniform", "low_diversity", "high_diversity", "adaptive"),
        "uniform, low_diversity, high_diversity or adaptive"),
}

# split is structural (dict with t/v), handled separately from _HYPER_SPEC
_MODIFIERS = ("label_free",)


@dataclass
class PipelineConfig:
    slots: dict[str, str]
    modifiers: list[str] = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    split: dict | None = None          # {"t": int, "v": int} or None
    seed: int = 0
    parallel: int = 1

    def descriptor(self, slot: str) -> ModuleDescriptor:
        return descriptor(slot, self.slots[slot])

    def algorithm(self) -> str:
        return self.hyper["algorithm"]


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    slots: tuple[str, ...]


@dataclass(frozen=True)
class CompatReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def rule_ids(self) -> list[str]:
        return [v.rule for v in self.violations]

    def to_json(self) -> dict:
        return {"ok": self.ok,
                "violations": [{"rule": v.rule, "message": v.message,
                                "slots": list(v.slots)} for v in self.violations]}


def _type_name(parser) -> str:
    return {int: "integer", float: "number", str: "string", bool: "boolean",
            list: "list"}[parser]


def _coerce(path: str, parser, value):
    if parser is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {value!r}")
        return value
    if parser is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if parser is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if parser is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected string, got {value!r}")
    return value


def parse_config(document) -> PipelineConfig:
    """Parse a config document (JSON text or mapping) into a validated
    PipelineConfig with every default filled in."""
    if isinstance(document, (str, bytes)):
        try:
            raw = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    else:
        raw = document
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(raw) - {"slots", "modifiers", "hyper", "seed", "parallel"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    slots_raw = raw.get("slots")
    if not isinstance(slots_raw, dict):
        raise ConfigError("slots: expected an object with one entry per slot")
    missing = [s for s in SLOTS if s not in slots_raw]
    if missing:
        raise ConfigError(f"slots: missing {missing}")
    unknown = set(slots_raw) - set(SLOTS)
    if unknown:
        raise ConfigError(f"slots: unknown slot names {sorted(unknown)}")
    slots = {}
    for s in SLOTS:
        v = _coerce(f"slots.{s}", str, slots_raw[s])
        if (s, v) not in _BY_SLOT_OPTION:
            options = [d.option for d in DESCRIPTORS if d.slot == s]
            raise ConfigError(f"slots.{s}: unknown option '{v}' (choose from {options})")
        slots[s] = v

    modifiers_raw = raw.get("modifiers", [])
    if not isinstance(modifiers_raw, list):
        raise ConfigError("modifiers: expected a list")
    modifiers = []
    for i, m in enumerate(modifiers_raw):
        if m not in _MODIFIERS:
            raise ConfigError(f"modifiers[{i}]: unknown modifier '{m}'")
        if m not in modifiers:
            modifiers.append(m)
    modifiers.sort()

    hyper_raw = raw.get("hyper", {})
    if not isinstance(hyper_raw, dict):
        raise ConfigError("hyper: expected an object")
    unknown = set(hyper_raw) - set(_HYPER_SPEC) - {"split"}
    if unknown:
        raise ConfigError(f"hyper: unknown keys {sorted(unknown)}")
    hyper = {}
    for name, (parser, default, pred, req) in _HYPER_SPEC.items():
        if name in hyper_raw:
            value = _coerce(f"hyper.{name}", parser, hyper_raw[name])
            if not pred(value):
                raise ConfigError(f"hyper.{name}: must be {req}, got {value!r}")
            hyper[name] = value
        else:
            hyper[name] = default if not isinstance(default, list) else list(default)

    split = None
    if "split" in hyper_raw and hyper_raw["split"] is not None:
        sp = hyper_raw["split"]
        if not isinstance(sp, dict) or set(sp) != {"t", "v"}:
            raise ConfigError('hyper.split: expected {"t": int, "v": int}')
        t = _coerce("hyper.split.t", int, sp["t"])
        v = _coerce("hyper.split.v", int, sp["v"])
        if t <= 0 or v < 0:
            raise ConfigError(f"hyper.split: need t > 0 and v >= 0, got ({t}, {v})")
        split = {"t": t, "v": v}

    if not hyper["algorithm"]:
        hyper["algorithm"] = DEFAULT_ALGORITHM.get(slots["meta_learner"], "maml")

    seed = _coerce("seed", int, raw.get("seed", 0))
    parallel = _coerce("parallel", int, raw.get("parallel", 1))
    if parallel < 1:
        raise ConfigError(f"parallel: must be >= 1, got {parallel}")

    return PipelineConfig(slots, modifiers, hyper, split, seed, parallel)


def _fmt(value):
    if isinstance(value, bool) or isinstance(value, int):
        return json.dumps(value)
    if isinstance(value, float):
        text = format(value, ".17g")
        return text if ("." in text or "e" in text or "n" in text) else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(value[k])}"
                               for k in sorted(value)) + "}"
    if value is None:
        return "null"
    raise ConfigError(f"cannot serialize {type(value).__name__}")


def serialize_config(cfg: PipelineConfig) -> str:
    """Canonical JSON: fixed key order, every hyper explicit, floats at 17
    significant digits.  Byte-stable across runs and platforms."""
    lines = ["{", '  "slots": {']
    for i, s in enumerate(SLOTS):
        comma = "," if i < len(SLOTS) - 1 else ""
        lines.append(f'    "{s}": {json.dumps(cfg.slots[s])}{comma}')
    lines.append("  },")
    lines.append(f'  "modifiers": {_fmt(sorted(cfg.modifiers))},')
    hyper_items = []
    for name in sorted(_HYPER_SPEC):
        hyper_items.append(f'    "{name}": {_fmt(cfg.hyper[name])}')
    hyper_items.append(f'    "split": {_fmt(cfg.split)}')
    lines.append('  "hyper": {')
    lines.append(",\n".join(hyper_items))
    lines.append("  },")
    lines.append(f'  "seed": {cfg.seed},')
    lines.append(f'  "parallel": {cfg.parallel}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def config_signature(cfg: PipelineConfig) -> str:
    return hashlib.blake2b(serialize_config(cfg).encode(),
                           digest_size=6).hexdigest()


# ---------------------------------------------------------------------------
# compatibility rules: one table, shared by CLI, service, and UI

def _r1(cfg):
    if cfg.slots["task_construction"] == "reinforcement":
        return ("reinforcement task construction must be used independently "
                "and is outside this artifact's executable scope",
                ("task_construction",))


def _r2(cfg):
    if cfg.slots["task_construction"] == "label_free":
        return ("label-free is an additive modifier: pick a base task "
                "construction and set the label_free modifier instead",
                ("task_construction",))
    if "label_free" in cfg.modifiers and cfg.slots["base_learner"] != "contrastive":
        return ("the label_free modifier forces the contrastive loss, but "
                f"base_learner is '{cfg.slots['base_learner']}'",
                ("task_construction", "base_learner"))


def _r3(cfg):
    if cfg.slots["meta_learner"] != "metric":
        return None
    if cfg.slots["base_learner"] != "cross_entropy":
        return ("metric-based meta-learners need the classification "
                "(cross-entropy) loss", ("meta_learner", "base_learner"))
    if cfg.slots["task_construction"] != "classification":
        return ("metric-based meta-learners are restricted to classification "
                "tasks", ("meta_learner", "task_construction"))


def _r4(cfg):
    if cfg.slots["optimization_strategy"] == "implicit" and cfg.hyper["first_order"]:
        return ("the implicit-gradient strategy needs second-order "
                "differentiation; unset first_order", ("optimization_strategy",))


def _r5(cfg):
    strat = cfg.descriptor("optimization_strategy")
    back = cfg.descriptor("backbone")
    if "second_order" in strat.tags and back.implemented \
            and "higher_order_safe" not in back.tags:
        return (f"strategy '{strat.option}' needs a higher-order-safe "
                f"backbone; '{back.option}' is not", ("optimization_strategy", "backbone"))


def _r6(cfg):
    broken = []
    for slot in SLOTS:
        d = cfg.descriptor(slot)
        if not d.implemented and not (slot == "meta_learner" and d.option == "bayesian"):
            broken.append((slot, d))
    if broken:
        names = ", ".join(f"'{d.canonical}'" for _, d in broken)
        word = "option" if len(broken) == 1 else "options"
        return (f"{word} {names} registered but not implemented",
                tuple(slot for slot, _ in broken))


def _r7(cfg):
    if cfg.slots["meta_learner"] == "bayesian":
        return ("'.metalearnerBaye()' is registered, unimplemented",
                ("meta_learner",))


def _r8(cfg):
    name = cfg.hyper["algorithm"]
    algo = ALGORITHMS.get(name)
    if algo is None:
        return (f"unknown algorithm '{name}'", ("meta_learner",))
    category = cfg.slots["meta_learner"]
    effective = "optimization" if category == "general" else category
    if effective in ("optimization", "metric") and algo.category != effective:
        return (f"algorithm '{name}' belongs to the {algo.category} family, "
                f"not {effective}", ("meta_learner",))
    if not algo.implemented:
        return (f"algorithm '{name}' is registered, unimplemented", ("meta_learner",))


def _r9(cfg):
    algo = ALGORITHMS.get(cfg.hyper["algorithm"])
    if algo and algo.implemented \
            and cfg.slots["optimization_strategy"] not in algo.strategies:
        allowed = ", ".join(sorted(algo.strategies))
        return (f"algorithm '{algo.name}' supports only the [{allowed}] "
                "optimization strategies",
                ("meta_learner", "optimization_strategy"))


def _r10(cfg):
    if "label_free" in cfg.modifiers:
        return None  # R2 governs the label-free pairing
    task = cfg.slots["task_construction"]
    lossname = cfg.slots["base_learner"]
    wanted = {"classification": "cross_entropy", "regression": "mse",
              "prediction": "mse"}.get(task)
    if wanted and lossname != wanted:
        return (f"task '{task}' pairs with the '{wanted}' loss, not "
                f"'{lossname}'", ("task_construction", "base_learner"))


RULES: tuple[tuple[str, object], ...] = (
    ("R1", _r1), ("R2", _r2), ("R3", _r3), ("R4", _r4), ("R5", _r5),
    ("R6", _r6), ("R7", _r7), ("R8", _r8), ("R9", _r9), ("R10", _r10),
)


def check_compat(cfg: PipelineConfig) -> CompatReport:
    """Pure rule-table evaluation; the violation set is order-independent."""
    found = []
    for rule_id, fn in RULES:
        hit = fn(cfg)
        if hit is not None:
            message, slot_names = hit
            found.append(Violation(rule_id, message, slot_names))
    return CompatReport(tuple(found))


# ---------------------------------------------------------------------------
# command generation

def emit_command(cfg: PipelineConfig) -> str:
    """Two-line POSIX script: environment preparation, then the run command.

    The config path inside the script derives from the config's own signature
    so generation is byte-deterministic regardless of where it is invoked.
    """
    report = check_compat(cfg)
    if not report.ok:
        details = "; ".join(f"{v.rule}: {v.message}" for v in report.violations)
        raise RegistryError(f"config has compatibility violations: {details}")
    sig = config_signature(cfg)
    run = f"metaforge run --config run-{sig}.json"
    if cfg.slots["training_method"] == "parallel":
        run += f" --parallel {cfg.parallel}"
    return (
        "#!/bin/sh\n"
        f"# metaforge pipeline (config run-{sig}.json alongside this script)\n"
        "python3 -m pip install --quiet -e .\n"
        f"{run}\n")
