"""
Unit tests for network parsing, shape inference and analytics.
"""

import json

import pytest

from model import (
    DescriptorError,
    ShapeError,
    layer_macs,
    load_network,
    mac_count,
    parse_network,
    resize_input,
    storage_report,
)
from models import LayerKind, Shape3D
from oracle import count_macs_loop_nest
from tests.conftest import toy_descriptor, toy_net

MIB = float(1 << 20)


@pytest.mark.unit
class TestParseNetwork:
    """Descriptor validation."""

    def test_parse_small_network(self, small_net):
        assert small_net.name == 'toy'
        assert [layer.id for layer in small_net.layers] == ['conv1', 'relu1', 'pool1', 'fc1', 'prob']
        assert small_net.layer('relu1').inputs == ('conv1',)
        assert small_net.layers[0].inputs == ('input',)

    def test_kernel_pairs_and_defaults(self):
        net = toy_net(layers=[{'id': 'c', 'kind': 'CONV', 'kernel': [3, 1], 'padding': [1, 0], 'out_channels': 2}])
        layer = net.layers[0]
        assert layer.kernel == (3, 1)
        assert layer.padding == (1, 0)
        assert layer.stride == (1, 1)
        assert layer.bias is True

    def test_syntax_error_reports_line_and_column(self):
        with pytest.raises(DescriptorError) as excinfo:
            parse_network('{"name": "x",\n "input": }', source='bad.json')
        assert 'line 2' in str(excinfo.value)
        assert 'column' in str(excinfo.value)

    def test_empty_layer_list_rejected(self):
        with pytest.raises(DescriptorError, match='no layers'):
            parse_network(json.dumps(toy_descriptor(layers=[])))

    @pytest.mark.parametrize('layers, message', [
        ([{'id': 'a', 'kind': 'CONV', 'out_channels': 2}, {'id': 'a', 'kind': 'ACT'}], 'Duplicate'),
        ([{'id': 'a', 'kind': 'CONV', 'out_channels': 2, 'inputs': ['ghost']}], 'unknown input'),
        ([{'id': 'a', 'kind': 'SOFTPLUS'}], 'unknown layer kind'),
        ([{'id': 'a', 'kind': 'CONV', 'out_channels': 2, 'dilation': 2}], 'unknown keys'),
        ([{'id': 'a', 'kind': 'CONV'}], 'out_channels'),
        ([{'id': 'a', 'kind': 'ELTWISE_ADD'}], 'at least 2 inputs'),
        ([{'id': 'a', 'kind': 'ACT', 'inputs': ['input', 'input']}], 'exactly 1 input'),
        ([{'id': 'input', 'kind': 'ACT'}], 'reserved'),
        ([{'id': 'a', 'kind': 'POOL', 'pool_kind': 'AVG'}], 'pool_kind'),
    ])
    def test_invalid_descriptors(self, layers, message):
        with pytest.raises(DescriptorError, match=message):
            parse_network(json.dumps(toy_descriptor(layers=layers)))

    def test_two_sinks_rejected(self):
        layers = [
            {'id': 'a', 'kind': 'CONV', 'out_channels': 2},
            {'id': 'b', 'kind': 'CONV', 'out_channels': 2, 'inputs': ['input']},
        ]
        with pytest.raises(DescriptorError, match='exactly one sink'):
            parse_network(json.dumps(toy_descriptor(layers=layers)))

    def test_cycle_rejected(self):
        layers = [
            {'id': 'a', 'kind': 'ELTWISE_ADD', 'inputs': ['input', 'b']},
            {'id': 'b', 'kind': 'ACT', 'inputs': ['a']},
        ]
        with pytest.raises(DescriptorError):
            parse_network(json.dumps(toy_descriptor(layers=layers)))

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(DescriptorError, match='not found'):
            load_network(str(tmp_path / 'nope.json'))

    def test_descriptor_error_is_user_error(self):
        with pytest.raises(DescriptorError) as excinfo:
            parse_network('[]')
        assert excinfo.value.exit_code == 1


@pytest.mark.unit
class TestInferShapes:
    """Shape inference."""

    def test_toy_shapes(self, small_net):
        shapes = {layer.id: layer.out_shape for layer in small_net.layers}
        assert shapes['conv1'] == Shape3D(12, 10, 4)
        assert shapes['pool1'] == Shape3D(6, 5, 4)
        assert shapes['fc1'] == Shape3D(1, 1, 5)
        assert shapes['prob'] == Shape3D(1, 1, 5)

    def test_fc_normalized_to_full_kernel(self, small_net):
        fc = small_net.layer('fc1')
        assert fc.kind == LayerKind.FC
        assert fc.kernel == (6, 5)
        assert fc.stride == (1, 1)

    def test_kernel_larger_than_padded_input(self):
        layers = [{'id': 'c', 'kind': 'CONV', 'kernel': 5, 'out_channels': 2}]
        with pytest.raises(ShapeError, match='does not fit'):
            toy_net(x=3, y=3, layers=layers)

    def test_eltwise_shape_mismatch(self):
        layers = [
            {'id': 'a', 'kind': 'CONV', 'out_channels': 2},
            {'id': 'b', 'kind': 'CONV', 'out_channels': 3, 'inputs': ['input']},
            {'id': 'add', 'kind': 'ELTWISE_ADD', 'inputs': ['a', 'b']},
        ]
        with pytest.raises(ShapeError, match='mismatch'):
            toy_net(layers=layers)

    def test_concat_sums_channels(self, residual_net):
        assert residual_net.layer('cat').out_shape == Shape3D(8, 8, 8)
        assert residual_net.layer('pool').out_shape == Shape3D(4, 4, 8)

    def test_global_pool(self):
        layers = [
            {'id': 'c', 'kind': 'CONV', 'kernel': 3, 'out_channels': 4},
            {'id': 'gp', 'kind': 'POOL', 'global': True},
        ]
        net = toy_net(x=9, y=7, layers=layers)
        assert net.layer('gp').kernel == (7, 5)
        assert net.layer('gp').out_shape == Shape3D(1, 1, 4)

    def test_resize_input_adapts_fc(self, small_net):
        bigger = resize_input(small_net, 24, 20)
        assert bigger.input_shape == Shape3D(24, 20, 3)
        assert bigger.layer('pool1').out_shape == Shape3D(12, 10, 4)
        assert bigger.layer('fc1').kernel == (12, 10)
        assert bigger.layer('fc1').out_shape == Shape3D(1, 1, 5)


@pytest.mark.unit
class TestAnalytics:
    """MAC counting and storage."""

    def test_toy_mac_count(self, small_net):
        report = mac_count(small_net)
        assert report.per_layer == {'conv1': 12 * 10 * 9 * 3 * 4, 'fc1': 6 * 5 * 4 * 5}
        assert report.total == 13560
        assert report.non_mac_ops['relu1'] == 12 * 10 * 4
        assert report.non_mac_ops['pool1'] == 6 * 5 * 4 * 4

    def test_loop_nest_agrees(self, small_net):
        for layer in small_net.weighted_layers():
            assert count_macs_loop_nest(layer) == layer_macs(layer)

    @pytest.mark.parametrize('x,y,stride,padding', [(8, 5, 2, 1), (7, 7, 3, 0), (9, 4, 2, 2), (5, 5, 1, 0)])
    def test_loop_nest_agrees_with_stride_and_padding(self, x, y, stride, padding):
        layers = [{'id': 'conv', 'kind': 'CONV', 'kernel': 3, 'stride': stride, 'padding': padding,
                   'out_channels': 3}]
        layer = toy_net(x=x, y=y, c=2, layers=layers).layer('conv')
        assert count_macs_loop_nest(layer) == layer_macs(layer)

    def test_loop_nest_without_padding_taps(self):
        layers = [{'id': 'conv', 'kind': 'CONV', 'kernel': 3, 'stride': 2, 'padding': 1, 'out_channels': 3}]
        layer = toy_net(x=8, y=5, c=2, layers=layers).layer('conv')
        assert layer_macs(layer) == 4 * 3 * 9 * 2 * 3
        # 11 in-bounds column taps times 7 row taps
        assert count_macs_loop_nest(layer, skip_padding=True) == 11 * 7 * 2 * 3

    def test_storage_of_toy(self, small_net):
        storage = storage_report(small_net)
        assert storage.coefficient_bytes == (9 * 3 * 4 + 4 + 120 * 5 + 5) * 4
        assert storage.largest_layer == 'conv1'
        assert storage.largest_layer_bytes == 12 * 10 * 4 * 4
        assert storage.activation_bytes['relu1'] == 12 * 10 * 4 * 4
        assert storage.in_place_layers == ['relu1']
        assert 'relu1' not in storage.materialized_bytes
        assert storage.total_bytes == storage.coefficient_bytes + storage.largest_layer_bytes
        assert storage.training_total_bytes > storage.total_bytes

    def test_storage_of_activation_only_network(self):
        net = toy_net(x=4, y=4, c=1, layers=[{'id': 'r', 'kind': 'ACT'}])
        storage = storage_report(net)
        assert storage.activation_bytes == {'r': 4 * 4 * 4}
        assert storage.in_place_layers == ['r']
        assert storage.largest_layer == 'r'
        assert storage.coefficient_bytes == 0
        assert storage.total_bytes == 64
        assert storage.training_total_bytes == 64

    def test_vgg19_is_about_twenty_gmac(self, network_path):
        report = mac_count(load_network(network_path('vgg19')))
        assert report.gmac == pytest.approx(20.0, rel=0.05)

    def test_googlenet_below_two_gmac(self, network_path):
        assert mac_count(load_network(network_path('googlenet'))).gmac < 2.0

    def test_resnet152_storage(self, network_path):
        storage = storage_report(load_network(network_path('resnet152')))
        assert storage.training_total_bytes / MIB == pytest.approx(372.0, rel=0.05)

    @pytest.mark.parametrize('name', ['alexnet', 'googlenet', 'resnet50', 'resnet101', 'resnet152',
                                      'vgg16', 'vgg19'])
    def test_shipped_networks_parse(self, name, network_path):
        net = load_network(network_path(name))
        assert net.is_annotated
        assert net.sink.kind == LayerKind.CLASS
