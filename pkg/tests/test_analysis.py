import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.stats import ortho_group

from domain.config import DEFAULT_CNN_CHANNELS
from domain.entities import Dataset
from domain.exceptions import DimensionError
from domain.layers import LinearLayer
from domain.network import build_cnn, build_mlp, run_dual
from domain.tensor import Rng
from use_cases.analysis import (
    PUBLISHED_FLOPS_M,
    cka_grid,
    cka_matrix,
    collect_trace,
    count_flops,
    count_forward_flops,
    export_embeddings,
    layer_forward_flops,
    linear_cka,
    weight_alignment,
    write_cka_json,
)

MNIST_MLP = [784, 256, 256, 256, 256, 256, 10]


class TestLinearCka:
    def test_self_similarity_is_one(self, np_rng):
        x = np_rng.normal(size=(50, 8))
        assert linear_cka(x, x) == pytest.approx(1.0)

    def test_invariant_to_rotation_and_scale(self, np_rng):
        x = np_rng.normal(size=(40, 6))
        y = np_rng.normal(size=(40, 5))
        q = ortho_group.rvs(6, random_state=0)
        assert linear_cka(3.0 * x @ q, y) == pytest.approx(linear_cka(x, y))

    def test_symmetric_and_bounded(self, np_rng):
        x = np_rng.normal(size=(30, 4))
        y = np_rng.normal(size=(30, 7))
        assert linear_cka(x, y) == pytest.approx(linear_cka(y, x))
        assert 0.0 <= linear_cka(x, y) <= 1.0

    def test_constant_input_gives_zero(self, np_rng):
        assert linear_cka(np.ones((10, 3)), np_rng.normal(size=(10, 3))) == 0.0

    def test_needs_matching_samples(self, np_rng):
        with pytest.raises(DimensionError):
            linear_cka(np.zeros((4, 2)), np.zeros((5, 2)))

    def test_matrix_layout(self, np_rng):
        rows = [np_rng.normal(size=(20, 3)) for _ in range(2)]
        cols = [np_rng.normal(size=(20, 4)) for _ in range(3)]
        m = cka_matrix(rows, cols, step=7)
        assert m.values.shape == (2, 3)
        assert m.step == 7
        assert m.row_labels == ["r0", "r1"]


class TestCkaGrid:
    def _dataset(self, np_rng, n=40):
        labels = np.arange(n) % 3
        return Dataset(np_rng.normal(size=(n, 1, 2, 3)), labels, 3, "test")

    def test_grid_orientation(self, small_mlp, np_rng):
        trace = collect_trace(small_mlp, self._dataset(np_rng), num_samples=30)
        grid = cka_grid(trace, step=5)
        assert trace.batch_size == 30
        assert grid.values.shape == (4, 4)
        assert grid.row_labels == ["a0", "a1", "a2", "a3"]
        assert grid.col_labels == ["b3", "b2", "b1", "b0"]
        # a_L holds logits while b_L is the one-hot target itself
        assert grid.entry(3, 3) == pytest.approx(linear_cka(trace.forward_acts[3], trace.feedback_acts[3]))

    def test_json_artifact(self, small_mlp, np_rng, tmp_path):
        grid = cka_grid(collect_trace(small_mlp, self._dataset(np_rng)))
        path = write_cka_json(grid, tmp_path / "out" / "cka.json")
        data = json.loads(path.read_text())
        assert data["rows"][0] == "a0"
        assert len(data["values"]) == 4


class TestWeightAlignment:
    def test_mirrored_weights_give_one(self, small_mlp):
        for fw, bw in zip(small_mlp.forward_layers, small_mlp.feedback_layers):
            bw.weight = fw.weight.T.copy()
        assert_allclose(weight_alignment(small_mlp), [1.0, 1.0, 1.0])

    def test_negated_weights_give_minus_one(self, small_mlp):
        for fw, bw in zip(small_mlp.forward_layers, small_mlp.feedback_layers):
            bw.weight = -fw.weight.T
        assert_allclose(weight_alignment(small_mlp), [-1.0, -1.0, -1.0])

    def test_independent_init_is_nearly_orthogonal(self):
        net = build_mlp([256, 256, 256, 10], Rng(0))
        assert abs(weight_alignment(net)[1]) < 0.1

    def test_cnn_kernels_mirror(self):
        net = build_cnn((3, 8, 8), [4, 6], 5, Rng(0))
        for fw, bw in zip(net.forward_layers[:-1], net.feedback_layers[:-1]):
            bw.kernel = fw.kernel.transpose(1, 0, 2, 3).copy()
        cosines = weight_alignment(net)
        assert len(cosines) == 3
        assert_allclose(cosines[:2], [1.0, 1.0])

    def test_mismatched_shapes_are_skipped(self, small_mlp):
        small_mlp.feedback_layers[1] = LinearLayer(np.zeros((5, 3)), np.zeros(5))
        assert weight_alignment(small_mlp)[1] is None


class TestFlops:
    def test_mlp_forward_closed_form(self, rng):
        net = build_mlp([784, 256, 10], rng)
        report = count_forward_flops(net.forward_layers, net.input_shape)
        matmuls = 2 * (784 * 256 + 256 * 10)
        assert matmuls == 406_528
        # plus one add per bias and one op per hidden activation
        assert report.forward == matmuls + 256 + 10 + 256

    def test_ccl_to_bp_ratio(self, rng):
        net = build_mlp(MNIST_MLP, rng)
        bp = count_flops(net, "bp", 32)
        ccl = count_flops(net, "ccl", 32)
        assert 0.9 <= ccl.total / bp.total <= 1.4
        assert bp.total / 1e6 == pytest.approx(PUBLISHED_FLOPS_M["mnist"]["BP"], rel=0.1)

    def test_ccl_well_below_target_propagation_family(self, rng):
        ccl = count_flops(build_mlp(MNIST_MLP, rng), "ccl", 32).total
        for method in ("DTP", "DRL", "L-DRL", "FWDTP-BN"):
            assert ccl * 5 <= PUBLISHED_FLOPS_M["mnist"][method] * 1e6

    def test_doubling_width_quadruples_matmul(self):
        narrow = LinearLayer(np.zeros((16, 16)), np.zeros(16), "none")
        wide = LinearLayer(np.zeros((32, 32)), np.zeros(32), "none")
        narrow_mm = layer_forward_flops(narrow, (16,))[0] - 16
        wide_mm = layer_forward_flops(wide, (32,))[0] - 32
        assert wide_mm == 4 * narrow_mm

    def test_additivity(self, rng):
        net = build_mlp([20, 12, 8, 4], rng)
        whole = count_forward_flops(net.forward_layers, (20,))
        head = count_forward_flops(net.forward_layers[:1], (20,))
        tail = count_forward_flops(net.forward_layers[1:], (12,))
        assert (head + tail).total == whole.total

    def test_dedup_scaling_of_feedback(self, rng):
        net = build_mlp([20, 12, 8, 4], rng)
        small_batch = count_flops(net, "ccl", 4)
        big_batch = count_flops(net, "ccl", 64)
        assert big_batch.feedback == pytest.approx(small_batch.feedback * 4 / 64)

    def test_cnn_counts(self, rng):
        net = build_cnn((3, 32, 32), DEFAULT_CNN_CHANNELS, 10, rng, dtype=np.float32)
        bp = count_flops(net, "bp", 32)
        ccl = count_flops(net, "ccl", 32)
        assert ccl.feedback > 0
        assert bp.feedback == 0
        assert ccl.total > bp.forward

    def test_drtp_cheaper_than_bp(self, rng):
        net = build_mlp(MNIST_MLP, rng)
        assert count_flops(net, "drtp", 32).total < count_flops(net, "bp", 32).total

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            count_flops(build_mlp([4, 3, 2], rng), "dtp", 32)


class TestEmbeddings:
    def test_csv_layout(self, small_mlp, np_rng, one_hot_batch, tmp_path):
        labels, y = one_hot_batch
        trace = run_dual(small_mlp, np_rng.normal(size=(5, 6)), y)
        path = export_embeddings(trace, [1, 2], tmp_path / "emb.csv")
        table = pd.read_csv(path)
        assert list(table.columns[:4]) == ["sample_id", "label", "network", "layer"]
        assert len(table) == 5 * 2 * 2
        fw_layer1 = table[(table["network"] == "fw") & (table["layer"] == 1)]
        assert fw_layer1["label"].tolist() == labels.tolist()
        assert_allclose(fw_layer1[[f"d{j}" for j in range(5)]].to_numpy(), trace.forward_acts[1])

    def test_rejects_bad_layer(self, small_mlp, np_rng, one_hot_batch, tmp_path):
        _, y = one_hot_batch
        trace = run_dual(small_mlp, np_rng.normal(size=(5, 6)), y)
        with pytest.raises(DimensionError):
            export_embeddings(trace, [7], tmp_path / "emb.csv")
