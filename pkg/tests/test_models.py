import numpy as np
import pytest

from bmpq.errors import ContractError
from bmpq.models import (LayerSpec, ModelSpec, assignment_from_vector, assignment_vector,
                         build_desk_cnn, build_model, build_resnet18, build_vgg16,
                         instantiate_weights, param_counts)
from bmpq.published import PUBLISHED

# weight-only totals from the widely published layer tables
VGG16_CONV_WEIGHTS = 14_710_464
RESNET18_CIFAR_TOTAL = 11_173_962  # includes batchnorm (9600) and classifier bias (10)


class TestVGG16:
    def test_layer_count_and_fixed_ends(self):
        spec = build_vgg16()
        assert len(spec.listed_layers) == 16
        assert [l.kind for l in spec.layers].count("conv") == 13
        assert spec.layers[0].fixed and spec.layers[-1].fixed
        assert sum(l.fixed for l in spec.layers) == 2

    def test_first_conv_params(self):
        assert build_vgg16().layers[0].param_count == 3 * 3 * 3 * 64

    def test_conv_total(self):
        spec = build_vgg16()
        assert sum(l.param_count for l in spec.layers if l.kind == "conv") == VGG16_CONV_WEIGHTS

    @pytest.mark.parametrize("head,width", [("full", 4096), ("compact", 512)])
    def test_heads(self, head, width):
        spec = build_vgg16(32, 100, head=head)
        fc1, fc2, fc3 = spec.layers[-3:]
        assert (fc1.in_features, fc1.out_features) == (512, width)
        assert (fc3.in_features, fc3.out_features) == (width, 100)
        assert spec.variant == f"head={head}"

    def test_tiny_geometry(self):
        fc1 = build_vgg16(64, 200, head="compact").layers[-3]
        assert fc1.in_features == 512 * 2 * 2

    def test_unknown_head(self):
        with pytest.raises(ContractError):
            build_vgg16(head="wide")


class TestResNet18:
    def test_listing(self):
        spec = build_resnet18()
        assert len(spec.listed_layers) == 18
        assert len(spec.tie_groups()) == 3
        assert not spec.sequential

    def test_param_total(self):
        spec = build_resnet18()
        assert sum(param_counts(spec).values()) == RESNET18_CIFAR_TOTAL - 9600 - 10

    def test_downsample_inherits(self):
        spec = build_resnet18()
        bits = assignment_from_vector(spec, list(PUBLISHED[2].bits))
        assert spec.leader("layer2.0.downsample") == "layer2.0.conv1"
        assert bits["layer2.0.downsample"] == bits["layer2.0.conv1"]
        assert spec.layer("layer2.0.downsample").in_features == spec.layer("layer2.0.conv1").in_features


class TestDeskCNN:
    def test_defaults(self):
        spec = build_desk_cnn()
        assert len(spec.layers) == 7 and len(spec.flexible_layers) == 5
        assert sum(l.param_count for l in spec.flexible_layers) == 35712
        assert spec.layers[-2].activation == "relu"
        assert all(l.activation == "pact" for l in spec.layers[:-2])

    def test_custom_config(self):
        spec = build_desk_cnn({"convs": [[4, True], [4, True]], "hidden": [16, 16]})
        assert [l.name for l in spec.layers] == ["conv1", "conv2", "fc3", "fc4", "fc5"]
        assert spec.layer("fc3").in_features == 4 * 7 * 7

    def test_build_model_dispatch(self):
        assert build_model("desk_cnn").name == "desk-cnn"
        with pytest.raises(ContractError):
            build_model("alexnet")


class TestSpec:
    @pytest.mark.parametrize("spec", [build_vgg16(), build_resnet18(), build_desk_cnn()],
                             ids=["vgg16", "resnet18", "desk"])
    def test_instantiated_sizes_match_counts(self, spec):
        tensors = instantiate_weights(spec)
        assert {k: v.size for k, v in tensors.items()} == param_counts(spec)

    def test_json_round_trip(self):
        spec = build_resnet18(64, 200)
        again = ModelSpec.from_json(spec.to_json())
        assert again.to_dict() == spec.to_dict()

    def test_published_vectors_load(self):
        for entry in PUBLISHED:
            spec = entry.spec()
            bits = assignment_from_vector(spec, list(entry.bits))
            assert assignment_vector(spec, bits) == list(entry.bits)

    def test_vector_length_checked(self):
        with pytest.raises(ContractError):
            assignment_from_vector(build_desk_cnn(), [16, 4, 16])

    def test_fixed_layer_width_checked(self):
        with pytest.raises(ContractError):
            assignment_from_vector(build_desk_cnn(), [8, 4, 4, 4, 4, 4, 16])

    def test_unfixed_ends_rejected(self):
        layers = [LayerSpec("a", "dense", 2, 2, fixed=True), LayerSpec("b", "dense", 2, 2)]
        with pytest.raises(ContractError):
            ModelSpec("bad", (2,), 2, layers)

    def test_duplicate_names_rejected(self):
        layers = [LayerSpec("a", "dense", 2, 2, fixed=True), LayerSpec("a", "dense", 2, 2, fixed=True)]
        with pytest.raises(ContractError):
            ModelSpec("bad", (2,), 2, layers)
