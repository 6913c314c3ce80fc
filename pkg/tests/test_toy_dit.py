import numpy as np
import pytest

from tsquant import clip_search as cs
from tsquant.errors import DomainError, FormatError
from tsquant.toy_dit import (
    EXPERTS, MODULES, Expert, ToyDiTConfig, build_model, denoise_trajectory, group_records,
    layer_path, load_records, save_records, split_path,
)

BLOCK_INPUT = ("self_attn.q", "cross_attn.q", "ffn.0")


def test_paths():
    assert layer_path(20, "ffn.2") == "blocks.20.ffn.2"
    assert split_path("blocks.3.self_attn.o") == (3, "self_attn.o")
    assert len(MODULES) == 10 and len(ToyDiTConfig().layer_paths()) == 60
    with pytest.raises(DomainError):
        split_path("blocks.x.ffn.9")


@pytest.mark.parametrize("bad", [dict(d_model=4), dict(n_blocks=1), dict(expert_boundary=1.0),
                                 dict(nonstationarity_gain=0.5)])
def test_config_validation(bad):
    with pytest.raises(DomainError):
        ToyDiTConfig(**bad)


def test_weights_deterministic_per_seed():
    a, b = build_model(ToyDiTConfig()), build_model(ToyDiTConfig())
    c = build_model(ToyDiTConfig(seed=1))
    path = "blocks.2.ffn.0"
    for e in EXPERTS:
        assert np.array_equal(a.layer_weight(e, path), b.layer_weight(e, path))
        assert not np.array_equal(a.layer_weight(e, path), c.layer_weight(e, path))
    assert not np.array_equal(a.layer_weight(Expert.HIGH_NOISE, path), a.layer_weight(Expert.LOW_NOISE, path))


def test_heavy_tail_injected(toy):
    cfg, model, _ = toy
    for e in EXPERTS:
        for path in cfg.layer_paths():
            rows = np.abs(model.layer_weight(e, path)).max(axis=1)
            assert rows.max() / np.median(rows) >= 4, path


def test_trajectory_deterministic(small_toy):
    cfg, model, records = small_toy
    x1, r1 = denoise_trajectory(model)
    x2, r2 = denoise_trajectory(build_model(cfg))
    assert np.array_equal(x1, x2)
    assert r1 == r2 == records


def test_routing(toy):
    cfg, _, records = toy
    for r in records:
        assert r.expert is (Expert.HIGH_NOISE if r.timestep >= cfg.expert_boundary else Expert.LOW_NOISE)
    per_expert = {e: {r.timestep for r in records if r.expert is e} for e in EXPERTS}
    ts = cfg.timesteps()
    assert len(per_expert[Expert.HIGH_NOISE]) == int(np.sum(ts >= 0.5))
    assert len(per_expert[Expert.LOW_NOISE]) == int(np.sum(ts < 0.5))
    assert len(records) == cfg.n_steps * 60
    assert not per_expert[Expert.HIGH_NOISE] & per_expert[Expert.LOW_NOISE]


def bin_absmax(records, path):
    binning = cs.TimestepBinning.uniform(0.0, 1.0, 4)
    out = np.zeros(4)
    for r in records:
        if r.layer == path:
            k = cs.assign_bin(binning, r.timestep)
            out[k] = max(out[k], np.abs(r.input).max())
    return out


def test_stationary_control():
    cfg = ToyDiTConfig(nonstationarity_gain=1.0, n_blocks=2)
    _, records = denoise_trajectory(build_model(cfg), capture=list(BLOCK_INPUT))
    for path in {r.layer for r in records}:
        m = bin_absmax(records, path)
        assert m.max() / m.min() < 2, path


def test_gain_inflates_noisy_bins(toy):
    cfg, _, records = toy
    for b in range(cfg.n_blocks):
        for module in BLOCK_INPUT:
            m = bin_absmax(records, layer_path(b, module))
            assert m[3] / m[0] >= 4  # bin 3 holds the noisiest timesteps


def test_capture_filter(small_toy):
    _, model, _ = small_toy
    _, recs = denoise_trajectory(model, capture=["ffn.2"])
    assert recs and {split_path(r.layer)[1] for r in recs} == {"ffn.2"}
    _, none = denoise_trajectory(model, capture=[])
    assert none == []


def test_group_records_order(small_toy):
    _, _, records = small_toy
    groups = group_records(records)
    assert len(groups) == 2 * 20
    for recs in groups.values():
        ts = [r.timestep for r in recs]
        assert ts == sorted(ts, reverse=True)


def test_dump_roundtrip(small_toy, tmp_path):
    cfg, _, records = small_toy
    path = tmp_path / "cal.bin"
    save_records(path, cfg, records)
    cfg2, recs2 = load_records(path)
    assert cfg2 == cfg and recs2 == records
    again = tmp_path / "again.bin"
    save_records(again, cfg2, recs2)
    assert path.read_bytes() == again.read_bytes()


def test_dump_errors(small_toy, tmp_path):
    cfg, _, records = small_toy
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_records(bad)
    path = tmp_path / "cal.bin"
    save_records(path, cfg, records)
    cut = tmp_path / "cut.bin"
    cut.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(FormatError):
        load_records(cut)
