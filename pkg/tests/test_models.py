import numpy as np
import pytest

from veloxnet.errors import ConfigError, DimensionError, NumericError, StateError
from veloxnet.layers import softmax_cross_entropy
from veloxnet.models import (ABLATIONS, AblationSpec, Model, build_model_graph, build_squeezenet,
                             build_veloxnet, graph_from_id)

VELOX_SHAPES = {
    "conv1": (156, 111, 111), "batchnorm1": (156, 111, 111), "maxpool1": (156, 55, 55),
    "gmlp2": (156, 55, 55), "gmlp3": (156, 55, 55), "maxpool3": (156, 27, 27),
    "gmlp4": (156, 27, 27), "gmlp5": (156, 27, 27), "maxpool5": (156, 13, 13),
    "gmlp6": (156, 13, 13), "gmlp9": (156, 13, 13), "conv10": (5, 13, 13), "avgpool10": (5, 1, 1),
}
SQUEEZE_SHAPES = {
    "conv1": (96, 112, 112), "maxpool1": (96, 56, 56), "fire2": (128, 56, 56), "fire3": (128, 56, 56),
    "fire4": (256, 56, 56), "maxpool4": (256, 28, 28), "fire5": (256, 28, 28), "fire6": (384, 28, 28),
    "fire7": (384, 28, 28), "fire8": (512, 28, 28), "maxpool8": (512, 14, 14), "fire9": (512, 14, 14),
    "conv10": (5, 14, 14), "avgpool10": (5, 1, 1),
}


def _shapes(graph):
    return {n.name: n.out_shape for n in graph.layers}


def test_veloxnet_graph_shapes():
    g = build_veloxnet(5)
    shapes = _shapes(g)
    for name, shape in VELOX_SHAPES.items():
        assert shapes[name] == shape, name
    assert sum(n.kind == "gmlp" for n in g.nodes) == 8
    assert g.nodes[-1].kind == "softmax_head"


def test_squeezenet_graph_shapes():
    shapes = _shapes(build_squeezenet(5))
    for name, shape in SQUEEZE_SHAPES.items():
        assert shapes[name] == shape, name


def test_head_order_conv10_before_avgpool():
    names = [n.name for n in build_veloxnet(5).nodes]
    assert names[-3:] == ["conv10", "avgpool10", "softmax"]


def test_config_errors():
    with pytest.raises(ConfigError):
        build_veloxnet(1)
    with pytest.raises(ConfigError):
        build_squeezenet(1)
    with pytest.raises(ConfigError):
        build_veloxnet(5, ablation="depth4+depth6".split("+"))
    with pytest.raises(ConfigError):
        build_veloxnet(5, ablation="wide")
    with pytest.raises(ConfigError):
        build_veloxnet(5, input_size=20)
    with pytest.raises(ConfigError):
        build_model_graph("resnet")


def test_ablation_parse():
    assert str(AblationSpec.parse("full")) == "full"
    assert AblationSpec.parse(["no_sgu", "d128"]).width(156) == 128
    assert AblationSpec.parse("depth4").depths() == (2, 1, 1)
    assert AblationSpec.parse("depth6").depths() == (2, 2, 2)


@pytest.mark.parametrize("variant", ABLATIONS)
def test_every_ablation_builds(variant):
    g = build_veloxnet(5, ablation=variant)
    blocks = [n for n in g.nodes if n.kind == "gmlp"]
    assert len(blocks) == {"depth4": 4, "depth6": 6}.get(variant, 8)
    width = {"d96": 96, "d128": 128, "d192": 192}.get(variant, 156)
    assert g.nodes[0].out_shape[0] == width
    cfg = blocks[0].config["gmlp"]
    assert cfg.gating == (variant != "no_sgu")
    assert cfg.residual == (variant != "no_residual")
    assert cfg.block_norm == (variant != "no_layernorm")


def test_forward_reduced_models(rng):
    for name in ("veloxnet", "squeezenet"):
        g = build_model_graph(name, reduced=True)
        m = Model(g, seed=0)
        x = rng.standard_normal((2,) + g.input_shape).astype(np.float32)
        logits = m.forward(x, "train")
        assert logits.shape == (2, 3) and np.isfinite(logits).all()
        assert np.isfinite(m.forward(np.zeros_like(x), "infer")).all()


def test_full_veloxnet_forward_shape():
    m = Model(build_veloxnet(5))
    logits = m.forward(np.zeros((2, 3, 224, 224), np.float32), "infer")
    assert logits.shape == (2, 5) and np.isfinite(logits).all()


def test_full_squeezenet_forward_shape(rng):
    m = Model(build_squeezenet(5))
    x = rng.standard_normal((1, 3, 224, 224)).astype(np.float32)
    assert m.forward(x, "train").shape == (1, 5)
    assert m.forward(x, "infer").shape == (1, 5)


def test_input_shape_checked():
    m = Model(build_model_graph("veloxnet", reduced=True))
    with pytest.raises(DimensionError):
        m.forward(np.zeros((1, 3, 40, 40), np.float32))


def test_non_finite_names_node():
    m = Model(build_model_graph("veloxnet", reduced=True))
    x = np.zeros((1, 3, 47, 47), np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="conv1"):
        m.forward(x)


def test_backward_requires_train_forward(rng):
    m = Model(build_model_graph("veloxnet", reduced=True))
    with pytest.raises(StateError):
        m.backward(np.zeros((1, 3), np.float32))
    x = rng.standard_normal((1, 3, 47, 47)).astype(np.float32)
    m.forward(x, "infer")
    with pytest.raises(StateError):
        m.backward(np.zeros((1, 3), np.float32))


def test_gradients_deterministic_and_complete(rng):
    g = build_model_graph("veloxnet", reduced=True)
    x = rng.standard_normal((2,) + g.input_shape)
    runs = []
    for _ in range(2):
        m = Model(g, seed=3, dtype=np.float64)
        _, d = softmax_cross_entropy(m.forward(x, "train"), [0, 2])
        runs.append({k: v.copy() for k, v in m.backward(d).items()})
    assert runs[0].keys() == runs[1].keys()
    names = {n for n, _, _ in m.named_params()}
    assert set(runs[0]) == names
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()
    assert m.input_grad.shape == x.shape


def test_unused_head_entries_get_zero_gradient(rng):
    g = build_veloxnet(classes=4, d_model=12, input_size=47)
    m = Model(g, dtype=np.float64)
    x = rng.standard_normal((2,) + g.input_shape)
    m.forward(x, "train")
    d = np.zeros((2, 4))
    d[:, :3] = rng.standard_normal((2, 3))
    grads = m.backward(d)
    w = grads["conv10.weight"]
    assert not w[3].any() and w[:3].any()


def test_batch_order_invariance_infer(rng):
    g = build_model_graph("squeezenet", reduced=True)
    m = Model(g)
    x = rng.standard_normal((4,) + g.input_shape).astype(np.float32)
    m.forward(x, "train")
    together = m.forward(x, "infer")
    alone = np.concatenate([m.forward(x[i:i + 1], "infer") for i in range(4)])
    np.testing.assert_allclose(together, alone, atol=1e-5)
    rev = m.forward(x[::-1].copy(), "infer")[::-1]
    np.testing.assert_allclose(together, rev, atol=1e-5)


def test_model_id_roundtrip():
    for g in (build_veloxnet(5, ablation="d96"), build_model_graph("squeezenet", reduced=True),
              build_veloxnet(3, "paper-eq", input_size=47, d_model=12)):
        again = graph_from_id(g.model_id(), g.preset)
        assert again.nodes == g.nodes and again.input_shape == g.input_shape
    with pytest.raises(ConfigError):
        graph_from_id("garbage")


def test_state_dict_includes_running_stats():
    m = Model(build_model_graph("squeezenet", reduced=True))
    keys = m.state_dict()
    assert "batchnorm1.running_mean" in keys and "fire2.squeeze.bn.running_var" in keys
