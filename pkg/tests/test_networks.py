"""Projection units, generator/extractor forwards, and weight persistence."""

import numpy as np
import numpy.testing as npt
import pytest

from fdsr import networks as N
from fdsr import tensor as T
from fdsr import weights_io as W
from fdsr.errors import DimensionError, FormatError
from fdsr.tensor import Tensor


def small_config(**over):
    base = dict(scale=4, stages=2, base_channels=4, in_channels=1, feat_channels=6)
    base.update(over)
    return N.GeneratorConfig(**base)


def zero_bias_unit(unit):
    taps = tuple(
        N.LayerWeights(t.kernel, Tensor(np.zeros_like(t.bias.data)), t.slope)
        for t in unit.taps)
    return N.ProjectionUnit(taps, unit.kernel_size, unit.stride, unit.padding)


class TestProjectionUnits:
    def test_up_unit_zero_input_zero_bias(self):
        gen = N.init_generator(small_config(), seed=3)
        unit = zero_bias_unit(gen.stage_unit(1, "up"))
        x = Tensor.zeros((1, 4, 8, 8))
        out = N.up_projection_unit(x, unit)
        npt.assert_array_equal(out.data, np.zeros((1, 4, 32, 32), np.float32))

    def test_down_unit_zero_input_zero_bias(self):
        gen = N.init_generator(small_config(), seed=3)
        unit = zero_bias_unit(gen.stage_unit(1, "down"))
        x = Tensor.zeros((1, 4, 32, 32))
        out = N.down_projection_unit(x, unit)
        npt.assert_array_equal(out.data, np.zeros((1, 4, 8, 8), np.float32))

    def test_up_unit_shape_contract(self):
        gen = N.init_generator(small_config(), seed=0)
        x = Tensor.zeros((1, 4, 8, 8))
        assert N.up_projection_unit(x, gen.stage_unit(1, "up")).shape == (1, 4, 32, 32)

    def test_down_unit_shape_contract(self):
        gen = N.init_generator(small_config(), seed=0)
        x = Tensor.zeros((1, 4, 32, 32))
        assert N.down_projection_unit(x, gen.stage_unit(1, "down")).shape == (1, 4, 8, 8)

    def test_down_unit_rejects_indivisible(self):
        gen = N.init_generator(small_config(), seed=0)
        with pytest.raises(DimensionError):
            N.down_projection_unit(Tensor.zeros((1, 4, 30, 30)),
                                   gen.stage_unit(1, "down"))

    def test_up_unit_matches_straight_line_formula(self, rng):
        gen = N.init_generator(small_config(), seed=11)
        unit = gen.stage_unit(1, "up")
        x = Tensor.from_array(rng.uniform(-1, 1, (2, 4, 8, 8)).astype(np.float32))
        got = N.up_projection_unit(x, unit)

        a, b, c = unit.taps
        s, p = unit.stride, unit.padding
        h0 = T.prelu(T.transposed_conv2d(x, a.kernel, a.bias, s, p), a.slope)
        l0 = T.prelu(T.conv2d(h0, b.kernel, b.bias, s, p), b.slope)
        h1 = T.prelu(T.transposed_conv2d(T.sub(l0, x), c.kernel, c.bias, s, p), c.slope)
        want = T.add(h0, h1)
        npt.assert_allclose(got.data, want.data, atol=1e-6)

    def test_down_unit_matches_straight_line_formula(self, rng):
        gen = N.init_generator(small_config(), seed=12)
        unit = gen.stage_unit(1, "down")
        x = Tensor.from_array(rng.uniform(-1, 1, (1, 4, 32, 32)).astype(np.float32))
        got = N.down_projection_unit(x, unit)

        a, b, c = unit.taps
        s, p = unit.stride, unit.padding
        l0 = T.prelu(T.conv2d(x, a.kernel, a.bias, s, p), a.slope)
        h0 = T.prelu(T.transposed_conv2d(l0, b.kernel, b.bias, s, p), b.slope)
        l1 = T.prelu(T.conv2d(T.sub(h0, x), c.kernel, c.bias, s, p), c.slope)
        want = T.add(l0, l1)
        npt.assert_allclose(got.data, want.data, atol=1e-6)


class TestGenerator:
    def test_output_shape(self):
        gen = N.init_generator(small_config(in_channels=3), seed=1)
        x = Tensor.from_array(np.random.default_rng(0).uniform(
            0, 1, (2, 3, 24, 24)).astype(np.float32))
        assert N.generator_forward(gen, x).shape == (2, 3, 96, 96)

    def test_scale2_output_shape(self):
        gen = N.init_generator(small_config(scale=2), seed=1)
        x = Tensor.zeros((1, 1, 12, 12))
        assert N.generator_forward(gen, x).shape == (1, 1, 24, 24)

    def test_batch_consistency(self, rng):
        gen = N.init_generator(small_config(), seed=5)
        both = rng.uniform(0, 1, (2, 1, 16, 16)).astype(np.float32)
        full = N.generator_forward(gen, Tensor.from_array(both))
        one = N.generator_forward(gen, Tensor.from_array(both[:1]))
        two = N.generator_forward(gen, Tensor.from_array(both[1:]))
        npt.assert_allclose(full.data[:1], one.data, atol=1e-6)
        npt.assert_allclose(full.data[1:], two.data, atol=1e-6)

    def test_fresh_weights_output_in_unit_range(self, rng):
        gen = N.init_generator(small_config(), seed=9)
        x = Tensor.from_array(rng.uniform(0, 1, (1, 1, 16, 16)).astype(np.float32))
        out = N.generator_forward(gen, x)
        assert np.all(np.isfinite(out.data))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_default_config_has_alternation(self):
        cfg = N.GeneratorConfig()
        assert cfg.stages >= 2

    def test_parameter_count_reported(self):
        gen = N.init_generator(small_config(), seed=0)
        assert gen.parameter_count() == sum(t.size for t in gen.tensors.values())
        assert gen.parameter_count() > 0

    def test_every_parameter_lands_on_tape(self, rng):
        gen = N.init_generator(small_config(stages=2), seed=4)
        x = Tensor.from_array(rng.uniform(0, 1, (1, 1, 8, 8)).astype(np.float32))
        with T.Tape() as tape:
            for t in gen.tensors.values():
                tape.watch(t)
            N.generator_forward(gen, x)
        recorded = set()
        for node in tape.nodes:
            recorded.update(node.parent_tids)
        for name, t in gen.tensors.items():
            assert t.tid in recorded, f"{name} never appeared on the tape"


class TestExtractor:
    def test_deterministic_forward(self, rng):
        ext = N.init_extractor(1, seed=2)
        img = Tensor.from_array(rng.uniform(0, 1, (1, 1, 32, 32)).astype(np.float32))
        a = N.extractor_forward(ext, img).numpy()
        b = N.extractor_forward(ext, img).numpy()
        npt.assert_array_equal(a, b)

    def test_feature_shape_total_stride(self):
        ext = N.init_extractor(1, seed=2)
        img = Tensor.zeros((2, 1, 96, 96))
        feats = N.extractor_forward(ext, img)
        assert feats.shape == (2, 32, 12, 12)

    def test_divisibility_enforced(self):
        ext = N.init_extractor(1, seed=2)
        with pytest.raises(DimensionError):
            N.extractor_forward(ext, Tensor.zeros((1, 1, 30, 30)))

    def test_gradient_flows_to_image(self, rng):
        ext = N.init_extractor(1, seed=7)
        img = Tensor.from_array(rng.uniform(0, 1, (1, 1, 16, 16)).astype(np.float32))
        with T.Tape() as tape:
            tape.watch(img)
            root = T.sum_all(N.extractor_forward(ext, img))
        g = T.backward(tape, root)[img.tid].data
        assert np.abs(g).max() > 0

    def test_extractor_params_never_get_gradients(self, rng):
        ext = N.init_extractor(1, seed=7)
        img = Tensor.from_array(rng.uniform(0, 1, (1, 1, 16, 16)).astype(np.float32))
        with T.Tape() as tape:
            tape.watch(img)
            root = T.sum_all(N.extractor_forward(ext, img))
        grads = T.backward(tape, root)
        ext_ids = {t.tid for t in ext.tensors.values()}
        assert not (ext_ids & set(grads.keys()))

    def test_fingerprint_stable(self):
        ext = N.init_extractor(1, seed=3)
        again = N.init_extractor(1, seed=3)
        other = N.init_extractor(1, seed=4)
        assert ext.fingerprint == again.fingerprint
        assert ext.fingerprint != other.fingerprint


class TestWeightPersistence:
    def test_generator_round_trip(self, tmp_path):
        gen = N.init_generator(small_config(), seed=21)
        path = tmp_path / "gen.fdsrw"
        W.save_weights(gen, path)
        loaded = W.load_weights(path)
        assert isinstance(loaded, N.GeneratorParams)
        assert loaded.config == gen.config
        assert loaded.fingerprint() == gen.fingerprint()

    def test_extractor_round_trip_fingerprint(self, tmp_path):
        ext = N.init_extractor(1, seed=21)
        path = tmp_path / "ext.fdsrw"
        W.save_weights(ext, path)
        loaded = W.load_weights(path)
        assert isinstance(loaded, N.ExtractorParams)
        assert loaded.fingerprint == ext.fingerprint

    def test_save_load_save_is_byte_identical(self, tmp_path):
        gen = N.init_generator(small_config(), seed=8)
        p1, p2 = tmp_path / "a.fdsrw", tmp_path / "b.fdsrw"
        W.save_weights(gen, p1)
        W.save_weights(W.load_weights(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_is_format_error(self, tmp_path):
        gen = N.init_generator(small_config(), seed=8)
        path = tmp_path / "gen.fdsrw"
        W.save_weights(gen, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError) as ei:
            W.load_weights(path)
        assert ei.value.offset is not None

    def test_bad_magic_is_format_error(self, tmp_path):
        path = tmp_path / "junk.fdsrw"
        path.write_bytes(b"NOTAFILE" + b"\x00" * 32)
        with pytest.raises(FormatError) as ei:
            W.read_tensor_file(path)
        assert ei.value.offset == 0

    def test_version_bump_rejected(self, tmp_path):
        gen = N.init_generator(small_config(), seed=8)
        path = tmp_path / "gen.fdsrw"
        W.save_weights(gen, path)
        blob = bytearray(path.read_bytes())
        blob[8] = 9  # low byte of the little-endian version field
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as ei:
            W.load_weights(path)
        assert "version" in str(ei.value)

    def test_head_round_trip(self, tmp_path):
        head = N.init_classifier_head(3, seed=5)
        path = tmp_path / "head.fdsrw"
        W.save_weights(head, path)
        loaded = W.load_weights(path)
        assert isinstance(loaded, N.ClassifierHead)
        assert loaded.num_classes == 3
        assert loaded.fingerprint() == head.fingerprint()
