import math
import struct

import numpy as np
import pytest

from sparsefuel.compression import (
    CompressedModel,
    CompressionStrategy,
    QuantizedParameterSet,
    QuantizedTensor,
    SerializationError,
    SparseMask,
    compress,
    decompress,
    dequantize,
    encode_wire,
    from_bytes,
    nonzero_macs,
    payload_size,
    prune_magnitude,
    quantize_affine,
    serialized_size,
    to_bytes,
)
from sparsefuel.neuralnet import Architecture, ParameterSet, init_parameters


class TestStrategy:
    def test_valid(self):
        for kind in ("dense", "sparse", "quantized", "sparse+quantized"):
            CompressionStrategy(kind, 0.3)

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            CompressionStrategy("zip", 0.3)

    def test_psi_bounds(self):
        CompressionStrategy("sparse", 0.0)
        CompressionStrategy("sparse", 1.0)
        with pytest.raises(ValueError):
            CompressionStrategy("sparse", 1.5)
        with pytest.raises(ValueError):
            CompressionStrategy("sparse", -0.1)


class TestPrune:
    def test_psi_zero_is_identity_with_all_ones_mask(self):
        params = init_parameters(Architecture((3, 4, 2)), 0)
        pruned, mask = prune_magnitude(params, 0.0)
        for a, b in zip(pruned.weights, params.weights):
            assert np.array_equal(a, b)
        for m in mask.layers:
            assert np.all(m == 1)

    def test_magnitude_order_example(self):
        params = ParameterSet([np.array([[0.1, -0.4], [0.3, -0.2]])], [np.zeros(2)])
        pruned, mask = prune_magnitude(params, 0.5)
        assert np.array_equal(pruned.weights[0], [[0.0, -0.4], [0.3, 0.0]])
        assert np.array_equal(mask.layers[0], [[0, 1], [1, 0]])

    def test_thousand_weight_layer_counts(self):
        rng = np.random.default_rng(0)
        params = ParameterSet([rng.normal(0, 1, (25, 40))], [np.zeros(25)])
        for psi, kept in ((0.3, 700), (0.5, 500), (0.7, 300), (0.9, 100)):
            pruned, mask = prune_magnitude(params, psi)
            assert int(mask.layers[0].sum()) == kept
            assert int(np.count_nonzero(pruned.weights[0])) == kept

    def test_ties_prune_earlier_flat_positions(self):
        params = ParameterSet([np.ones((2, 2))], [np.zeros(2)])
        _, mask = prune_magnitude(params, 0.5)
        assert np.array_equal(mask.layers[0], [[0, 0], [1, 1]])

    def test_biases_untouched(self):
        params = ParameterSet([np.ones((2, 2))], [np.array([0.5, -0.5])])
        pruned, _ = prune_magnitude(params, 0.9)
        assert np.array_equal(pruned.biases[0], [0.5, -0.5])


class TestQuantize:
    def test_symmetric_unit_range_example(self):
        params = ParameterSet([np.array([[-1.0, 0.0, 1.0]])], [np.zeros(1)])
        q = quantize_affine(params)
        t = q.tensors[0]
        assert t.scale == 2.0 / 255.0
        assert t.zero_point == 128
        assert list(t.values.ravel()) == [0, 128, 255]
        deq = dequantize(q).weights[0]
        assert abs(deq[0, 1] - 0.0) <= t.scale / 2

    def test_constant_tensor_example(self):
        params = ParameterSet([np.full((2, 2), 0.5)], [np.zeros(2)])
        q = quantize_affine(params)
        t = q.tensors[0]
        assert t.scale == 1.0
        assert len(set(t.values.ravel().tolist())) == 1
        deq = dequantize(q).weights[0]
        assert len(set(deq.ravel().tolist())) == 1
        assert abs(deq[0, 0] - 0.5) <= t.scale / 2

    def test_constant_below_half_maps_onto_zero_point(self):
        params = ParameterSet([np.full((3,), 0.3).reshape(1, 3)], [np.zeros(1)])
        q = quantize_affine(params)
        t = q.tensors[0]
        assert np.all(t.values == t.zero_point)
        assert np.all(dequantize(q).weights[0] == 0.0)

    def test_all_values_at_zero_point_dequantize_to_zeros(self):
        q = QuantizedParameterSet([
            QuantizedTensor(0.01, 7, np.full((2, 3), 7, dtype=np.uint8)),
            QuantizedTensor(0.5, 200, np.full((2,), 200, dtype=np.uint8)),
        ])
        deq = dequantize(q)
        assert np.all(deq.weights[0] == 0.0)
        assert np.all(deq.biases[0] == 0.0)

    def test_round_trip_error_bound_and_fixpoint(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            w = rng.normal(0, 10.0 ** rng.uniform(-3, 1), (4, 7))
            w.flat[0] = -abs(w.flat[0]) - 1e-9
            w.flat[-1] = abs(w.flat[-1]) + 1e-9
            params = ParameterSet([w], [np.array([-0.1, 0.0, 0.2, 0.05])])
            q = quantize_affine(params)
            deq = dequantize(q)
            for orig, back, t in (
                (params.weights[0], deq.weights[0], q.tensors[0]),
                (params.biases[0], deq.biases[0], q.tensors[1]),
            ):
                assert np.abs(orig - back).max() <= t.scale / 2 + 1e-9
            q2 = quantize_affine(deq)
            for a, b in zip(q.tensors, q2.tensors):
                assert np.array_equal(a.values, b.values)
                assert a.zero_point == b.zero_point

    def test_non_finite_raises(self):
        params = ParameterSet([np.array([[1.0, np.nan]])], [np.zeros(1)])
        with pytest.raises(ValueError):
            quantize_affine(params)


class TestCompressDecompress:
    def test_dense_kind_is_exact_identity(self):
        params = init_parameters(Architecture((3, 5, 2)), 1)
        model = compress(params, CompressionStrategy("dense", 0.0))
        out = decompress(model)
        for a, b in zip(out.weights + out.biases, params.weights + params.biases):
            assert np.array_equal(a, b)

    def test_sparse_quantized_zero_counts_per_layer(self):
        params = init_parameters(Architecture((10, 20, 5)), 2)
        model = compress(params, CompressionStrategy("sparse+quantized", 0.5))
        out = decompress(model)
        for w in out.weights:
            assert np.count_nonzero(w == 0.0) >= math.floor(0.5 * w.size)

    def test_pruned_positions_dequantize_to_exact_zero(self):
        params = init_parameters(Architecture((6, 9, 3)), 3)
        pruned, mask = prune_magnitude(params, 0.7)
        model = compress(params, CompressionStrategy("sparse+quantized", 0.7))
        out = decompress(model)
        for w, m in zip(out.weights, mask.layers):
            assert np.all(w[m == 0] == 0.0)


class TestMacs:
    def test_dense_example(self):
        params = init_parameters(Architecture((784, 128, 47)), 0)
        assert nonzero_macs(params) == 784 * 128 + 128 * 47

    def test_scales_with_pruning(self):
        params = init_parameters(Architecture((20, 50, 10)), 1)
        dense = nonzero_macs(params)
        pruned, _ = prune_magnitude(params, 0.3)
        kept = sum(w.size - math.floor(0.3 * w.size) for w in params.weights)
        assert nonzero_macs(pruned) == kept
        assert abs(nonzero_macs(pruned) - 0.7 * dense) <= len(params.weights)


class TestSerializedSize:
    def test_dense_mnist_scale_model(self):
        # 784x600 weights + 600 biases = 471,000 parameters
        params = ParameterSet(
            [np.zeros((600, 784))], [np.zeros(600)]
        )
        model = compress(params, CompressionStrategy("dense", 0.0))
        assert payload_size(model) == 1_884_000
        assert serialized_size(model) == 1_884_000 + 16 + 2 * 8
        quant = compress(params, CompressionStrategy("quantized", 0.0))
        assert payload_size(quant) / payload_size(model) <= 0.27

    def test_all_kinds_match_byte_length(self):
        params = init_parameters(Architecture((5, 7, 4)), 5)
        for kind in ("dense", "sparse", "quantized", "sparse+quantized"):
            model = compress(params, CompressionStrategy(kind, 0.4))
            assert serialized_size(model) == len(to_bytes(model))

    def test_header_only_model(self):
        model = CompressedModel("dense", params=ParameterSet([], []))
        assert serialized_size(model) == 16
        assert len(to_bytes(model)) == 16


class TestWireFormat:
    def test_header_fields(self):
        params = init_parameters(Architecture((2, 3, 2)), 0)
        blob = to_bytes(compress(params, CompressionStrategy("quantized", 0.0)))
        magic, version, kind_code, count = struct.unpack_from("<4sIII", blob, 0)
        assert magic == b"SPFL"
        assert version == 1
        assert kind_code == 2
        assert count == 4  # W0, b0, W1, b1

    def test_sections_interleave_per_tensor(self):
        # layout per tensor: shape record, then values (dense kind)
        params = init_parameters(Architecture((2, 3)), 0)
        blob = to_bytes(compress(params, CompressionStrategy("dense", 0.0)))
        assert struct.unpack_from("<II", blob, 16) == (3, 2)
        # weight payload (6 f32) sits between the two shape records
        assert struct.unpack_from("<II", blob, 16 + 8 + 6 * 4) == (3, 0)

    def test_dense_payload_is_little_endian_f32(self):
        params = ParameterSet([np.array([[1.5, -2.0]])], [np.array([0.25])])
        blob = to_bytes(compress(params, CompressionStrategy("dense", 0.0)))
        assert struct.unpack_from("<2f", blob, 24) == (1.5, -2.0)
        assert struct.unpack_from("<II", blob, 32) == (1, 0)
        assert struct.unpack_from("<f", blob, 40) == (0.25,)

    def test_sparse_bitmap_is_msb_first(self):
        w = np.array([[1.0, 0.0], [0.0, 2.0]])
        mask = SparseMask([np.array([[1, 0], [0, 1]], dtype=np.uint8)])
        model = CompressedModel(
            "sparse", params=ParameterSet([w], [np.array([3.0, 4.0])]), mask=mask
        )
        blob = to_bytes(model)
        assert blob[24] == 0b10010000  # weight bitmap, flat [1,0,0,1]
        # surviving weight values follow the weight bitmap
        assert struct.unpack_from("<2f", blob, 25) == (1.0, 2.0)
        assert blob[41] == 0b11000000  # bias bitmap: biases always fully present

    def test_round_trip_preserves_payload_exactly(self):
        params = init_parameters(Architecture((4, 6, 3)), 9)
        for kind in ("dense", "sparse"):
            model = compress(params, CompressionStrategy(kind, 0.3))
            back = from_bytes(to_bytes(model))
            assert back.kind == kind
            a, b = decompress(model), decompress(back)
            for x, y in zip(a.weights + a.biases, b.weights + b.biases):
                assert np.array_equal(np.asarray(x, dtype=np.float32), y)
        for kind in ("quantized", "sparse+quantized"):
            model = compress(params, CompressionStrategy(kind, 0.3))
            back = from_bytes(to_bytes(model))
            assert back.kind == kind
            for t_in, t_out in zip(model.qparams.tensors, back.qparams.tensors):
                assert t_out.scale == np.float32(t_in.scale)
                assert t_out.zero_point == t_in.zero_point
                assert np.array_equal(t_out.values, t_in.values)
            # masked weight positions come back as q == zero_point
            a, b = decompress(model), decompress(back)
            for x, y in zip(a.weights + a.biases, b.weights + b.biases):
                assert np.allclose(x, y, rtol=1e-5, atol=1e-7)

    def test_dense_round_trip_is_exact_at_f32(self):
        params = init_parameters(Architecture((3, 4, 2)), 4)
        model = compress(params, CompressionStrategy("dense", 0.0))
        back = decompress(from_bytes(to_bytes(model)))
        for x, y in zip(back.weights + back.biases, params.weights + params.biases):
            assert np.array_equal(x, np.asarray(np.asarray(y, dtype=np.float32), dtype=np.float64))


class TestFromBytesErrors:
    def _blob(self):
        params = init_parameters(Architecture((2, 3, 2)), 0)
        return to_bytes(compress(params, CompressionStrategy("dense", 0.0)))

    def test_bad_magic(self):
        blob = b"XXXX" + self._blob()[4:]
        with pytest.raises(SerializationError):
            from_bytes(blob)

    def test_bad_version(self):
        blob = bytearray(self._blob())
        struct.pack_into("<I", blob, 4, 99)
        with pytest.raises(SerializationError):
            from_bytes(bytes(blob))

    def test_bad_kind_code(self):
        blob = bytearray(self._blob())
        struct.pack_into("<I", blob, 8, 7)
        with pytest.raises(SerializationError):
            from_bytes(bytes(blob))

    def test_truncated(self):
        blob = self._blob()
        with pytest.raises(SerializationError):
            from_bytes(blob[:-3])

    def test_trailing_garbage(self):
        with pytest.raises(SerializationError):
            from_bytes(self._blob() + b"\x00")

    def test_odd_tensor_count(self):
        # a weight matrix with no trailing bias vector
        blob = struct.pack("<4sIII", b"SPFL", 1, 0, 1)
        blob += struct.pack("<II", 2, 2)
        blob += struct.pack("<4f", 1, 2, 3, 4)
        with pytest.raises(SerializationError):
            from_bytes(blob)


class TestEncodeWire:
    def test_reuses_round_mask_without_repruning(self):
        params = init_parameters(Architecture((4, 8, 3)), 6)
        strategy = CompressionStrategy("sparse+quantized", 0.5)
        _, mask = prune_magnitude(params, 0.5)
        # train-like drift: change magnitudes so a fresh prune would differ
        drifted = params.copy()
        for w in drifted.weights:
            w *= np.random.default_rng(0).uniform(0.1, 2.0, w.shape)
        for w, m in zip(drifted.weights, mask.layers):
            w *= m
        model = encode_wire(drifted, strategy, mask)
        out = decompress(from_bytes(to_bytes(model)))
        for w, m in zip(out.weights, mask.layers):
            assert np.all(w[m == 0] == 0.0)
            assert np.count_nonzero(w) == np.count_nonzero(m)
