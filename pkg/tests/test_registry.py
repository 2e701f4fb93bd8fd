import json

import numpy as np
import pytest

from metaforge.registry import (
    ALGORITHMS,
    DESCRIPTORS,
    SLOTS,
    ConfigError,
    PipelineConfig,
    RegistryError,
    check_compat,
    config_signature,
    descriptor,
    emit_command,
    parse_config,
    registry_list,
    serialize_config,
)


def make_config(**overrides):
    doc = {
        "slots": {
            "task_construction": "classification",
            "meta_learner": "optimization",
            "base_learner": "cross_entropy",
            "backbone": "mlp",
            "optimization_strategy": "unrolled",
            "training_method": "serial",
        },
        "seed": 0,
    }
    slots = overrides.pop("slots", {})
    doc["slots"].update(slots)
    doc.update(overrides)
    return parse_config(doc)


def random_config_doc(rng):
    """Random config over implemented options, for roundtrip checks."""
    def pick(slot, implemented_only=True):
        opts = [d.option for d in registry_list(slot)
                if d.implemented or not implemented_only]
        return str(rng.choice(opts))

    doc = {
        "slots": {s: pick(s) for s in SLOTS},
        "modifiers": ["label_free"] if rng.random() < 0.3 else [],
        "hyper": {
            "n_way": int(rng.integers(2, 8)),
            "k_shot": int(rng.integers(1, 5)),
            "lr_alpha": float(rng.uniform(1e-4, 0.5)),
            "lr_beta": float(rng.uniform(1e-5, 0.1)),
            "inner_steps": int(rng.integers(0, 5)),
            "sigma": float(rng.uniform(0.01, 1.0)),
            "iterations": int(rng.integers(0, 50)),
            "antithetic": bool(rng.random() < 0.5),
        },
        "seed": int(rng.integers(0, 2**31)),
        "parallel": int(rng.integers(1, 8)),
    }
    if rng.random() < 0.4:
        doc["hyper"]["split"] = {"t": int(rng.integers(1, 9)),
                                 "v": int(rng.integers(0, 5))}
    return doc


# -- registry listing -----------------------------------------------------------

def test_four_strategy_descriptors():
    assert len(registry_list("optimization_strategy")) == 4


def test_five_meta_learner_descriptors():
    assert len(registry_list("meta_learner")) == 5


def test_all_union_unique_ids():
    allds = registry_list("all")
    assert len(allds) == len(DESCRIPTORS)
    assert len({(d.slot, d.option) for d in allds}) == len(allds)
    assert len({d.canonical for d in allds}) == len(allds)


def test_unknown_slot_rejected():
    with pytest.raises(RegistryError):
        registry_list("nonexistent")


def test_unimplemented_descriptors_listed():
    options = {d.option: d for d in registry_list("backbone")}
    assert not options["vgg16"].implemented
    assert not options["resnet"].implemented
    assert not options["vit"].implemented
    assert options["conv"].implemented


def test_every_catalog_row_has_descriptor():
    canonical = {d.canonical for d in DESCRIPTORS}
    for expected in (".dataload()+.taskre()", ".dataload()+.taskcl()",
                     ".dataload()+.taskpre()", "+.tasklabelfree()", ".taskrein()",
                     ".metalearnerOp()", ".metalearnerMo()", ".metalearnerMe()",
                     ".metalearnerBaye()", ".metalearner()",
                     ".baselearner()+.lossce()", ".baselearner()+.lossmse()",
                     ".baselearner()+.losscont()", ".baselearner()+.lossq()",
                     "backbone = CONVN", "backbone = VGG16", "backbone = RESNETN",
                     "backbone = VIT", ".optimizerIG()", ".optimizerDP()",
                     ".optimizerSA()", ".optimizerDE()", ".serial()", ".parallel()",
                     "train_gpu = N", "online"):
        assert expected in canonical, expected


# -- compatibility rules ----------------------------------------------------------

def test_valid_maml_config_passes():
    report = check_compat(make_config(slots={"backbone": "conv"}))
    assert report.ok
    assert report.rule_ids() == []


def test_r1_reinforcement_rejected():
    cfg = make_config(slots={"task_construction": "reinforcement",
                             "base_learner": "q_learning"})
    ids = check_compat(cfg).rule_ids()
    assert "R1" in ids


def test_r2_label_free_forces_contrastive():
    cfg = make_config(modifiers=["label_free"])
    report = check_compat(cfg)
    assert "R2" in report.rule_ids()
    ok = make_config(modifiers=["label_free"],
                     slots={"base_learner": "contrastive"})
    assert "R2" not in check_compat(ok).rule_ids()


def test_r2_label_free_as_base_slot():
    cfg = make_config(slots={"task_construction": "label_free",
                             "base_learner": "contrastive"})
    assert "R2" in check_compat(cfg).rule_ids()


def test_r3_metric_requires_classification_loss():
    cfg = make_config(slots={"meta_learner": "metric", "base_learner": "mse",
                             "task_construction": "regression"},
                      hyper={"algorithm": "protonet"})
    assert "R3" in check_compat(cfg).rule_ids()


def test_r4_implicit_forbids_first_order():
    cfg = make_config(slots={"optimization_strategy": "implicit"},
                      hyper={"first_order": True})
    report = check_compat(cfg)
    assert "R4" in report.rule_ids()
    assert any("first_order" in v.message for v in report.violations)


def test_r6_unimplemented_descriptor_named():
    cfg = make_config(slots={"backbone": "vgg16"})
    report = check_compat(cfg)
    assert "R6" in report.rule_ids()
    assert any("VGG16" in v.message for v in report.violations)


def test_r7_bayesian_meta_learner():
    cfg = make_config(slots={"meta_learner": "bayesian"})
    report = check_compat(cfg)
    assert "R7" in report.rule_ids()
    assert any("registered, unimplemented" in v.message for v in report.violations)
    assert "R6" not in report.rule_ids()  # R7 speaks for the bayesian row


def test_r8_algorithm_category_and_implementation():
    cfg = make_config(hyper={"algorithm": "protonet"})
    assert "R8" in check_compat(cfg).rule_ids()
    cfg = make_config(hyper={"algorithm": "snail"})
    assert "R8" in check_compat(cfg).rule_ids()
    cfg = make_config(hyper={"algorithm": "metaoptnet"})
    report = check_compat(cfg)
    assert "R8" in report.rule_ids()
    assert any("registered, unimplemented" in v.message for v in report.violations)


def test_r9_reptile_needs_first_order_strategy():
    cfg = make_config(hyper={"algorithm": "reptile"})
    assert "R9" in check_compat(cfg).rule_ids()
    ok = make_config(hyper={"algorithm": "reptile"},
                     slots={"optimization_strategy": "first_order"})
    assert "R9" not in check_compat(ok).rule_ids()


def test_r9_esmaml_needs_es_strategy():
    cfg = make_config(hyper={"algorithm": "esmaml"})
    assert "R9" in check_compat(cfg).rule_ids()


def test_r10_task_loss_pairing():
    cfg = make_config(slots={"task_construction": "regression"})
    assert "R10" in check_compat(cfg).rule_ids()
    ok = make_config(slots={"task_construction": "regression",
                            "base_learner": "mse"})
    assert "R10" not in check_compat(ok).rule_ids()


def test_check_compat_pure_and_order_free():
    cfg = make_config(slots={"backbone": "vgg16", "meta_learner": "bayesian"},
                      hyper={"first_order": True})
    a = check_compat(cfg)
    b = check_compat(cfg)
    assert a == b
    assert set(a.rule_ids()) == set(b.rule_ids())


def test_rule_order_permutation_never_changes_violation_set(monkeypatch):
    import metaforge.registry as reg
    cfg = make_config(slots={"backbone": "vgg16", "meta_learner": "metric",
                             "task_construction": "regression"},
                      hyper={"first_order": True, "algorithm": "protonet"},
                      modifiers=["label_free"])
    baseline = set(check_compat(cfg).rule_ids())
    monkeypatch.setattr(reg, "RULES", tuple(reversed(reg.RULES)))
    assert set(check_compat(cfg).rule_ids()) == baseline


def test_general_meta_learner_aliases_optimization():
    cfg = make_config(slots={"meta_learner": "general"})
    assert cfg.hyper["algorithm"] == "maml"
    assert check_compat(cfg).ok


# -- parsing ---------------------------------------------------------------------

def test_minimal_document_fills_defaults():
    cfg = make_config()
    assert cfg.hyper["n_way"] == 5
    assert cfg.hyper["lr_alpha"] == 0.01
    assert cfg.hyper["algorithm"] == "maml"
    assert cfg.parallel == 1
    assert cfg.split is None


def test_missing_slot_named():
    doc = {"slots": {"task_construction": "classification"}}
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert "meta_learner" in str(err.value)


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError) as err:
        make_config(hyper={"learning_rate": 0.1})
    assert "learning_rate" in str(err.value)
    with pytest.raises(ConfigError) as err:
        parse_config({"slots": {}, "extra": 1})
    assert "extra" in str(err.value)


def test_type_errors_carry_key_path():
    with pytest.raises(ConfigError) as err:
        make_config(hyper={"n_way": "five"})
    assert "hyper.n_way" in str(err.value)


def test_range_errors():
    with pytest.raises(ConfigError):
        make_config(hyper={"n_way": 1})
    with pytest.raises(ConfigError):
        make_config(hyper={"lr_alpha": 0.0})
    with pytest.raises(ConfigError):
        make_config(parallel=0)
    with pytest.raises(ConfigError):
        make_config(hyper={"split": {"t": 0, "v": 3}})


def test_json_decode_error_carries_position():
    with pytest.raises(ConfigError) as err:
        parse_config("{not json")
    assert "line 1" in str(err.value)


def test_roundtrip_on_random_configs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        doc = random_config_doc(rng)
        cfg = parse_config(doc)
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert serialize_config(again) == text


def test_serialization_canonicalizes():
    sparse = parse_config({"slots": make_config().slots})
    full = parse_config(serialize_config(sparse))
    assert sparse == full


# -- command emission --------------------------------------------------------------

def test_emit_two_line_script():
    script = emit_command(make_config())
    lines = script.split("\n")
    body = [l for l in lines if l and not l.startswith("#")]
    assert len(body) == 2
    assert body[1].startswith("metaforge run --config")
    assert script.endswith("\n")
    assert "\r" not in script


def test_emit_parallel_flag():
    cfg = make_config(slots={"training_method": "parallel"}, parallel=4)
    script = emit_command(cfg)
    assert "--parallel 4" in script
    serial = emit_command(make_config())
    assert "--parallel" not in serial


def test_emit_byte_deterministic():
    cfg1 = make_config(seed=123)
    cfg2 = make_config(seed=123)
    assert emit_command(cfg1).encode() == emit_command(cfg2).encode()
    assert config_signature(cfg1) == config_signature(cfg2)


def test_emit_rejects_violating_config():
    cfg = make_config(slots={"backbone": "vit"})
    with pytest.raises(RegistryError) as err:
        emit_command(cfg)
    assert "R6" in str(err.value)


def test_algorithm_catalog_covers_known_models():
    for name in ("maml", "reptile", "protonet", "metaoptnet", "relationnet",
                 "matchingnet", "anil", "metasgd", "tnet", "metadropout",
                 "mtnet", "esmaml", "cnap", "snail", "metaaug", "metacrl"):
        assert name in ALGORITHMS
    implemented = {n for n, a in ALGORITHMS.items() if a.implemented}
    assert implemented == {"maml", "reptile", "protonet", "matchingnet",
                           "anil", "metasgd", "esmaml"}
