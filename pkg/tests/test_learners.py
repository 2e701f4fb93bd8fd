import numpy as np
import pytest

from metaforge.autograd import backward, constant, finite_diff, tape, tensor_of
from metaforge.learners import (
    BackboneError,
    LossError,
    LossSpec,
    backbone_build,
    forward,
    load_params,
    loss,
    save_params,
)


def test_mlp_parameter_count_closed_form():
    # widths [2, 16], in=1, head 1: (1*2+2) + (2*16+16) + (16*1+1)
    b = backbone_build("mlp", widths=[2, 16], in_dim=1, out_dim=1, seed=0)
    expected = (1 * 2 + 2) + (2 * 16 + 16) + (16 * 1 + 1)
    assert expected == 69
    assert b.num_params() == expected


def test_conv4_output_shape_contract():
    b = backbone_build("conv4", in_shape=(1, 8, 8), channels=4, out_dim=3, seed=1)
    x = constant(np.random.default_rng(0).normal(size=(2, 64)))
    out = forward(b, x)
    assert out.data.shape == (2, 3)


@pytest.mark.parametrize("name", ["VGG16", "resnet18", "vit"])
def test_rejected_backbones_error_by_name(name):
    with pytest.raises(BackboneError) as err:
        backbone_build(name, in_dim=4, out_dim=2)
    assert name.lower().replace("-", "") in str(err.value).lower()


def test_zero_final_layer_gives_zero_logits():
    b = backbone_build("mlp", widths=[4], in_dim=3, out_dim=2, seed=2)
    params = {k: constant(v) for k, v in b.init_params.items()}
    params["layer1.weight"] = constant(np.zeros((4, 2)))
    params["layer1.bias"] = constant(np.zeros(2))
    out = forward(b, constant(np.ones((5, 3))), params)
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_forward_override_identity_and_purity():
    b = backbone_build("mlp", widths=[6], in_dim=2, out_dim=2, seed=3)
    x = constant(np.random.default_rng(1).normal(size=(4, 2)))
    own = forward(b, x)
    explicit = forward(b, x, {k: constant(v) for k, v in b.init_params.items()})
    again = forward(b, x)
    assert own.data.tobytes() == explicit.data.tobytes()
    assert own.data.tobytes() == again.data.tobytes()


def test_forward_override_never_mutates_backbone():
    b = backbone_build("mlp", widths=[5], in_dim=2, out_dim=1, seed=4)
    before = {k: v.tobytes() for k, v in b.init_params.items()}
    override = {k: constant(np.random.default_rng(2).normal(size=v.shape))
                for k, v in b.init_params.items()}
    forward(b, constant(np.zeros((3, 2))), override)
    assert {k: v.tobytes() for k, v in b.init_params.items()} == before


def test_conv_forward_second_order_capable():
    # gradients of gradients flow through the gather-based conv path
    b = backbone_build("conv2", in_shape=(1, 5, 5), channels=2, out_dim=1, seed=5)
    x = constant(np.random.default_rng(3).normal(size=(2, 25)))
    with tape():
        params = {k: tensor_of(v.shape, v, requires_grad=True)
                  for k, v in b.init_params.items()}
        out = apply_sum = forward(b, x, params)
        s = loss(LossSpec("mse"), out, constant(np.zeros((2, 1))))
        grads = backward(s, list(params.values()), create_graph=True)
        gsum = grads[0]
        for g in grads[1:]:
            from metaforge.autograd import apply
            gsum = apply("add", apply("sum", gsum) if gsum.data.shape != () else gsum,
                         apply("sum", apply("square", g)))
        hess = backward(gsum, list(params.values()), allow_unused=True)
    assert all(h.data.shape == p.data.shape for h, p in zip(hess, params.values()))


def test_cross_entropy_uniform_logits():
    logits = constant(np.zeros((3, 5)))
    val = loss(LossSpec("cross_entropy"), logits, [0, 3, 4])
    assert val.item() == pytest.approx(np.log(5.0), abs=1e-12)


def test_mse_zero_at_equality():
    pred = constant(np.array([[1.0], [2.0]]))
    assert loss(LossSpec("mse"), pred, pred).item() == 0.0


def test_contrastive_hand_evaluation():
    # identical positive pair -> zero positive term; negative at distance 2
    # with margin 1 -> hinge 0; hand value over three pairs: 0
    emb = constant(np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]]))
    val = loss(LossSpec("contrastive"), emb, [0, 0, 1])
    # pairs: (0,1) same d2=0; (0,2) diff relu(1-2)^2=0; (1,2) diff 0
    assert val.item() == pytest.approx(0.0, abs=1e-9)
    # move the negative inside the margin: d=0.5, hinge=(1-0.5)^2=0.25
    emb2 = constant(np.array([[0.0, 0.0], [0.0, 0.0], [0.5, 0.0]]))
    val2 = loss(LossSpec("contrastive"), emb2, [0, 0, 1])
    assert val2.item() == pytest.approx((0.0 + 0.25 + 0.25) / 3.0, abs=1e-6)


def test_label_out_of_range_rejected():
    with pytest.raises(LossError):
        loss(LossSpec("cross_entropy"), constant(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_nonnegative_and_onehot_limit():
    rng = np.random.default_rng(6)
    for _ in range(20):
        logits = constant(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 3, size=4)
        assert loss(LossSpec("cross_entropy"), logits, labels).item() >= 0.0
    big = np.full((2, 3), -50.0)
    big[0, 1] = big[1, 2] = 50.0
    almost = loss(LossSpec("cross_entropy"), constant(big), [1, 2]).item()
    assert almost == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("kind", ["cross_entropy", "mse", "contrastive"])
def test_loss_gradients_match_finite_diff(kind):
    rng = np.random.default_rng(7)
    pred0 = rng.normal(size=(4, 3))
    if kind == "cross_entropy":
        target = rng.integers(0, 3, size=4)
    elif kind == "mse":
        target = constant(rng.normal(size=(4, 3)))
    else:
        target = np.array([0, 0, 1, 2])

    def f(t):
        return loss(LossSpec(kind), t, target)

    with tape():
        th = tensor_of(pred0.shape, pred0, requires_grad=True)
        (g,) = backward(f(th), [th])
    fd = finite_diff(f, constant(pred0), step=1e-6)
    denom = np.maximum(np.abs(fd.data), 1.0)
    assert (np.abs(g.data - fd.data) / denom).max() <= 1e-6


def test_checkpoint_roundtrip(tmp_path):
    b = backbone_build("mlp", widths=[3], in_dim=2, out_dim=2, seed=8)
    path = tmp_path / "weights.mfw"
    save_params(path, b.init_params)
    loaded = load_params(path)
    assert list(loaded) == list(b.init_params)
    for k in loaded:
        assert loaded[k].tobytes() == b.init_params[k].tobytes()
    assert path.read_bytes()[:4] == b"MFW1"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_params(path)
