import json

import numpy as np
import pytest

from _oracles import eq7_forward
from tsquant import clip_search as cs
from tsquant import quantizers as qz
from tsquant.analysis import layer_errors
from tsquant.errors import CoverageError, FormatError, IntegrityError, PolicyIncompleteError, ShapeError
from tsquant.runtime import (
    FORMAT_VERSION, QuantConfig, deserialize, empty_model, estimate_memory, forward_quantized,
    payload_path, quantize_layer, quantize_model, serialize,
)
from tsquant.toy_dit import EXPERTS, Expert

PATH = "blocks.0.ffn.0"


def calib_inputs(rng, n=6, rows=16, c_in=32):
    scale = np.ones(c_in)
    scale[:2] = 15.0  # outlier channels
    return [rng.standard_normal((rows, c_in)) * scale for _ in range(n)]


class TestLayer:
    @pytest.mark.parametrize("grid", ["int4", "mxfp4"])
    def test_matches_straight_line_oracle(self, rng, grid):
        xs = calib_inputs(rng)
        w = rng.standard_normal((32, 24))
        layer, _ = quantize_layer(PATH, w, xs, QuantConfig(rank=3, grid=grid, group=16 if grid == "int4" else None,
                                                            hp_dtype="float64"))
        for s in (0.05, 0.7, 3.0):
            p = qz.UniformQuantParams(s, 0, -layer.grid.q_max, layer.grid.q_max)
            x = rng.standard_normal((5, 32)) * 4
            np.testing.assert_allclose(layer.forward_with_params(x, p), eq7_forward(layer, x, s), rtol=0, atol=1e-9)

    def test_full_rank_is_exact(self, rng):
        xs = calib_inputs(rng)
        w = rng.standard_normal((32, 24))
        layer, _ = quantize_layer(PATH, w, xs, QuantConfig(rank=24, hp_dtype="float64"))
        for amp, s in ((1e-3, 1e-4), (1.0, 0.1), (1e3, 5.0)):
            x = rng.standard_normal((4, 32)) * amp
            p = qz.UniformQuantParams(s, 0, -6, 6)
            y = x @ w
            assert np.abs(layer.forward_with_params(x, p) - y).max() <= 1e-8 * max(1.0, np.abs(y).max())

    def test_kept_fp_is_reference(self, rng):
        xs = calib_inputs(rng)
        w = rng.standard_normal((32, 24))
        layer, rep = quantize_layer("blocks.0.ffn.2", w, xs,
                                    QuantConfig(keep_fp=("ffn.2",), hp_dtype="float64"))
        assert layer.kept_fp and rep is None
        x = rng.standard_normal((4, 32)) * 10
        np.testing.assert_allclose(forward_quantized(layer, x, 0.3, Expert.LOW_NOISE, None), x @ w, atol=1e-10)

    def test_triangle_bound(self, rng):
        xs = calib_inputs(rng)
        w = rng.standard_normal((32, 24))
        for r in (0, 2, 8):
            layer, _ = quantize_layer(PATH, w, xs, QuantConfig(rank=r, hp_dtype="float64"))
            d = layer.smoothing
            w_hat = w * d[:, None]
            resid = w_hat - layer.lowrank.product()
            x_hat = xs[0] / d
            approx = x_hat @ layer.lowrank.product() + x_hat @ layer.residual_dequant()
            lhs = np.linalg.norm(x_hat @ w_hat - approx)
            assert lhs <= np.linalg.norm(x_hat) * np.linalg.norm(resid - layer.residual_dequant()) + 1e-9

    def test_shape_and_policy_errors(self, rng):
        layer, _ = quantize_layer(PATH, rng.standard_normal((32, 8)), calib_inputs(rng), QuantConfig())
        with pytest.raises(ShapeError):
            layer.forward_with_params(np.ones((2, 31)), qz.UniformQuantParams(1.0))
        with pytest.raises(PolicyIncompleteError):
            forward_quantized(layer, np.ones((2, 32)), 0.5, Expert.HIGH_NOISE, None)


class TestConfig:
    def test_rtn_preset(self):
        q = QuantConfig.for_variant("rtn")
        assert (q.rank, q.bins, q.ratios, q.weight_mode, q.smooth) == (0, 1, (1.0,), "rtn", False)

    def test_keepfp_preset_and_matching(self):
        q = QuantConfig.for_variant("keepfp_diag")
        assert q.is_kept("blocks.3.self_attn.o") and q.is_kept("blocks.0.ffn.2")
        assert not q.is_kept("blocks.0.ffn.0") and not q.is_kept("blocks.0.cross_attn.o")
        assert QuantConfig(keep_fp=("*",)).is_kept("blocks.1.ffn.0")

    def test_dict_roundtrip(self):
        q = QuantConfig.for_variant("svd_gptq", rank=5, grid="int4", group=32)
        assert QuantConfig.from_dict(json.loads(json.dumps(q.to_dict()))) == q

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            QuantConfig.for_variant("fp8")


class TestModel:
    def test_keep_everything_matches_full_precision(self, small_toy):
        cfg, model, records = small_toy
        qm = quantize_model(model, records, QuantConfig(keep_fp=("*",)))
        assert all(l.kept_fp for _, l in qm.iter_layers())
        for r in records[::7]:
            ref = r.input.astype(np.float64) @ model.layer_weight(r.expert, r.layer).astype(np.float64)
            np.testing.assert_allclose(qm.linear(r.expert, r.layer, r.timestep, r.input), ref, atol=1e-8)

    def test_coverage_error(self, small_toy):
        cfg, model, records = small_toy
        partial = [r for r in records if not (r.expert is Expert.LOW_NOISE and r.timestep < 0.1)]
        with pytest.raises(CoverageError) as exc:
            quantize_model(model, partial, QuantConfig())
        assert all(m[0] == "low_noise" and m[2] == 0 for m in exc.value.missing)

    def test_check_policy(self, small_toy):
        _, model, records = small_toy
        qm = quantize_model(model, records, QuantConfig.for_variant("svd_rtn"))
        qm.policy.entries.pop(next(iter(qm.policy.entries)))
        with pytest.raises(PolicyIncompleteError):
            qm.check_policy()

    def test_pipeline_beats_rtn_per_layer(self, quantized, rtn_quantized, toy):
        _, model, records = toy
        ours = {(e.expert, e.path): e.cosine for e in layer_errors(quantized, model, records)}
        base = {(e.expert, e.path): e.cosine for e in layer_errors(rtn_quantized, model, records)}
        better = sum(ours[k] < base[k] for k in ours)
        assert better >= 0.9 * len(ours)

    def test_gptq_reports_dominate(self, quantized):
        assert len(quantized.reports) == 120
        for rep in quantized.reports:
            assert rep.gptq_objective <= rep.rtn_objective + 1e-9 * max(1.0, rep.rtn_objective)


class TestMemory:
    def test_rank0_int4_codes_closed_form(self, small_toy):
        cfg, model, records = small_toy
        qm = quantize_model(model, records, QuantConfig.for_variant("rtn", grid="int4", group=64))
        mem = estimate_memory(qm)
        expected = sum(l.c_in * l.c_out // 2 for _, l in qm.iter_layers())
        assert mem["codes"] == expected and mem["lowrank"] == 0
        assert mem["codes"] > mem["scales"] + mem["smoothing"]

    def test_rank_step_linear(self, small_toy):
        _, model, records = small_toy
        m1 = estimate_memory(quantize_model(model, records, QuantConfig.for_variant("svd_rtn", rank=1)))
        m2 = estimate_memory(quantize_model(model, records, QuantConfig.for_variant("svd_rtn", rank=2)))
        n_layers_dims = sum(4 * (l.c_in + l.c_out) for _, l in
                            quantize_model(model, records, QuantConfig.for_variant("svd_rtn", rank=1)).iter_layers())
        assert m2["lowrank"] - m1["lowrank"] == n_layers_dims
        assert m2["total"] - m1["total"] == n_layers_dims

    def test_default_below_045_of_16bit(self, quantized):
        mem = estimate_memory(quantized)
        assert mem["total"] < 0.45 * mem["baseline_16bit"]


class TestSerialization:
    def test_roundtrip(self, quantized, toy, tmp_path):
        path = serialize(quantized, tmp_path / "m.json")
        assert payload_path(path).stat().st_size == estimate_memory(quantized)["total"]
        back = deserialize(path)
        assert back == quantized
        _, _, records = toy
        for r in records[::97]:
            assert np.array_equal(back.linear(r.expert, r.layer, r.timestep, r.input),
                                  quantized.linear(r.expert, r.layer, r.timestep, r.input))

    def test_corruption_detected(self, small_toy, tmp_path, rng):
        _, model, records = small_toy
        qm = quantize_model(model, records, QuantConfig.for_variant("svd_rtn"))
        path = serialize(qm, tmp_path / "m.json")
        blob = payload_path(path).read_bytes()
        for pos in rng.choice(len(blob), 25, replace=False):
            bad = bytearray(blob)
            bad[pos] ^= 1 << int(rng.integers(8))
            payload_path(path).write_bytes(bytes(bad))
            with pytest.raises(IntegrityError):
                deserialize(path)
        payload_path(path).write_bytes(blob[:-1])
        with pytest.raises(IntegrityError):
            deserialize(path)

    def test_version_mismatch(self, tmp_path):
        path = serialize(empty_model(), tmp_path / "m.json")
        man = json.loads(path.read_text())
        man["version"] = "w4a4-v0"
        path.write_text(json.dumps(man))
        with pytest.raises(FormatError, match="version"):
            deserialize(path)

    def test_empty_model(self, tmp_path):
        qm = empty_model()
        back = deserialize(serialize(qm, tmp_path / "e.json"))
        assert back == qm and back.version == FORMAT_VERSION
        assert estimate_memory(back)["total"] == 0

    def test_kept_and_int4_roundtrip(self, small_toy, tmp_path):
        _, model, records = small_toy
        qm = quantize_model(model, records, QuantConfig.for_variant("keepfp_diag", grid="int4", group=16))
        assert deserialize(serialize(qm, tmp_path / "k.json")) == qm

    def test_manifest_path_rule(self, tmp_path):
        with pytest.raises(FormatError):
            serialize(empty_model(), tmp_path / "m.bin")
