import math

import numpy as np
import pytest

from loopprune.autodiff import Tensor
from loopprune.errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    DimensionError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from loopprune.model import (
    CHECKPOINT_MAGIC,
    NON_RESIDUAL,
    RESIDUAL,
    BlockSpec,
    block_forward,
    build_default_uclf,
    build_report,
    count_parameters,
    default_network_spec,
    load_model,
    network_forward,
    save_model,
)


# -- closed-form parameter oracle ---------------------------------------------

def expected_param_count(spec) -> int:
    """Independent formula evaluation: conv = co*ci*9 + co, dense = co*ci + co."""
    def conv(co, ci):
        return co * ci * 9 + co

    def dns(co, ci):
        return co * ci + co

    total = conv(spec.stage_widths[0], 1)  # head
    for si, stage in enumerate(spec.blocks):
        cin = spec.stage_widths[si]
        for b in stage:
            total += conv(b.c1, cin) + conv(b.c2, b.c1) + dns(b.d1, b.c2) + dns(b.d2, b.d1)
        if si < 2 and spec.stage_widths[si] != spec.stage_widths[si + 1]:
            total += conv(spec.stage_widths[si + 1], spec.stage_widths[si])
    total += conv(1, spec.stage_widths[2])  # tail
    return total


def numpy_block_oracle(block, x):
    """Block forward composed from plain numpy ops, independent of autodiff."""
    def conv(x, w, b):
        n, ci, h, wd = x.shape
        xp = np.zeros((n, ci, h + 2, wd + 2))
        xp[:, :, 1:-1, 1:-1] = x
        co = w.shape[0]
        out = np.zeros((n, co, h, wd))
        for dy in range(3):
            for dx in range(3):
                out += np.einsum("nihw,oi->nohw",
                                 xp[:, :, dy:dy + h, dx:dx + wd], w[:, :, dy, dx])
        return out + b[None, :, None, None]

    x64 = x.astype(np.float64)
    u1 = np.maximum(conv(x64, block.conv1_w.data.astype(np.float64),
                         block.conv1_b.data.astype(np.float64)), 0)
    u2 = conv(u1, block.conv2_w.data.astype(np.float64),
              block.conv2_b.data.astype(np.float64))
    g = u2.mean(axis=(2, 3))
    h1 = np.maximum(g @ block.dense1_w.data.astype(np.float64).T
                    + block.dense1_b.data.astype(np.float64), 0)
    z = h1 @ block.dense2_w.data.astype(np.float64).T + block.dense2_b.data.astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-z))
    y = u2 * s[:, :, None, None]
    if block.spec.kind == NON_RESIDUAL:
        return y
    out = x64.copy()
    out[:, block.residual_idx] += y
    return out


# -- architecture --------------------------------------------------------------

class TestDefaultTopology:
    def test_table_budgets_at_full_scale(self):
        spec = default_network_spec(1.0)
        assert spec.stage_widths == (32, 64, 64)

        s1 = spec.blocks[0]
        assert [b.kind for b in s1] == [NON_RESIDUAL, NON_RESIDUAL, RESIDUAL]
        for b in s1[:2]:
            assert (b.c1, b.d1) == (48, 8)
            assert not b.prunable_c2 and not b.prunable_d2
        assert (s1[2].c1, s1[2].c2, s1[2].d1, s1[2].d2) == (48, 32, 8, 32)

        s2 = spec.blocks[1]
        assert len(s2) == 5
        for b in s2:
            assert b.kind == RESIDUAL
            assert (b.c1, b.c2, b.d1, b.d2) == (96, 64, 16, 64)

        s3 = spec.blocks[2]
        assert [b.kind for b in s3] == [NON_RESIDUAL, NON_RESIDUAL, RESIDUAL]
        for b in s3[:2]:
            assert (b.c1, b.d1) == (48, 8)
        assert (s3[2].c1, s3[2].c2, s3[2].d1, s3[2].d2) == (96, 64, 16, 64)

    def test_full_scale_parameter_count_near_reference(self):
        model = build_default_uclf(1.0, seed=0)
        total = count_parameters(model)
        assert total == expected_param_count(model.spec)
        assert abs(total - 879_681) / 879_681 < 0.05
        report = build_report(model)
        assert f"total_parameters={total}" in report
        assert "deviation=" in report

    @pytest.mark.parametrize("scale", [0.25, 0.5, 1.0])
    def test_scaled_budgets_and_count(self, scale):
        spec = default_network_spec(scale)
        assert spec.stage_widths == tuple(max(1, math.ceil(scale * w)) for w in (32, 64, 64))
        for b in spec.blocks[1]:
            assert b.c1 == max(1, math.ceil(scale * 96))
            assert b.d1 == max(1, math.ceil(scale * 16))
        model = build_default_uclf(scale, seed=1)
        assert count_parameters(model) == expected_param_count(spec)

    def test_invalid_width_scale(self):
        with pytest.raises(ConfigError):
            build_default_uclf(0.0)
        with pytest.raises(ConfigError):
            build_default_uclf(-1.0)

    def test_single_transition_between_unequal_stages(self):
        model = build_default_uclf(1.0, seed=0)
        assert sorted(model.transitions) == [0]

    def test_d2_equals_c2_everywhere(self):
        model = build_default_uclf(0.5, seed=3)
        for stage in model.stages:
            for block in stage:
                assert block.spec.d2 == block.spec.c2

    def test_d2_c2_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            BlockSpec(RESIDUAL, 48, 32, 8, 16)


class TestForward:
    def test_zero_conv2_makes_residual_identity(self):
        model = build_default_uclf(0.25, seed=0)
        block = model.stages[1][0]
        block.conv2_w.data[:] = 0
        block.conv2_b.data[:] = 0
        x = np.random.default_rng(0).random((2, 16, 8, 8)).astype(np.float32)
        out = block_forward(block, Tensor(x))
        assert np.array_equal(out.data, x)

    def test_unpruned_residual_matches_numpy_oracle(self):
        model = build_default_uclf(0.25, seed=4)
        block = model.stages[1][1]
        x = np.random.default_rng(1).random((2, 16, 8, 8)).astype(np.float32)
        got = block_forward(block, Tensor(x)).data
        ref = numpy_block_oracle(block, x)
        assert np.abs(got - ref).max() < 1e-5

    def test_non_residual_matches_numpy_oracle(self):
        model = build_default_uclf(0.25, seed=5)
        block = model.stages[0][0]
        x = np.random.default_rng(2).random((2, 8, 8, 8)).astype(np.float32)
        got = block_forward(block, Tensor(x)).data
        ref = numpy_block_oracle(block, x)
        assert got.shape == (2, block.spec.c2, 8, 8)
        assert np.abs(got - ref).max() < 1e-5

    def test_zero_tail_network_is_identity(self):
        model = build_default_uclf(0.25, seed=6)  # tail is zero-initialised
        x = np.random.default_rng(3).random((2, 1, 24, 24)).astype(np.float32)
        out = network_forward(model, Tensor(x))
        assert np.array_equal(out.data, x)

    def test_shape_preserved_at_48(self):
        model = build_default_uclf(0.25, seed=7)
        x = np.random.default_rng(4).random((4, 1, 48, 48)).astype(np.float32)
        assert network_forward(model, Tensor(x)).data.shape == (4, 1, 48, 48)

    def test_network_matches_blockwise_oracle(self):
        model = build_default_uclf(0.25, seed=8)
        # give the tail real weights so the oracle exercises the whole path
        rng = np.random.default_rng(5)
        model.tail_w.data[:] = rng.standard_normal(model.tail_w.data.shape).astype(np.float32) * 0.05
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        got = network_forward(model, Tensor(x)).data

        def conv(xv, w, b):
            n, ci, h, wd = xv.shape
            xp = np.zeros((n, ci, h + 2, wd + 2))
            xp[:, :, 1:-1, 1:-1] = xv
            out = np.zeros((n, w.shape[0], h, wd))
            for dy in range(3):
                for dx in range(3):
                    out += np.einsum("nihw,oi->nohw",
                                     xp[:, :, dy:dy + h, dx:dx + wd],
                                     w[:, :, dy, dx].astype(np.float64))
            return out + b[None, :, None, None].astype(np.float64)

        h = np.maximum(conv(x.astype(np.float64), model.head_w.data, model.head_b.data), 0)
        for si, stage in enumerate(model.stages):
            for block in stage:
                h = numpy_block_oracle(block, h.astype(np.float64))
            if si in model.transitions:
                w, b = model.transitions[si]
                h = np.maximum(conv(h, w.data, b.data), 0)
        ref = x.astype(np.float64) + conv(h, model.tail_w.data, model.tail_b.data)
        assert np.abs(got - ref).max() < 1e-4

    def test_rejects_multichannel_input(self):
        model = build_default_uclf(0.25, seed=9)
        with pytest.raises(DimensionError):
            network_forward(model, Tensor(np.zeros((1, 3, 16, 16), np.float32)))


class TestCountExamples:
    def test_dense_four_to_three(self):
        assert 4 * 3 + 3 == 15

    def test_conv_two_to_four(self):
        assert 2 * 4 * 9 + 4 == 76


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        model = build_default_uclf(0.25, seed=10)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_model(model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_masks_and_history_survive(self, tmp_path):
        model = build_default_uclf(0.25, seed=11)
        block = model.stages[1][0]
        block.conv1_w.mask.reshape(-1)[:10] = 0
        block.conv1_w.data *= block.conv1_w.mask
        model.prune_history.append("abc123")
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        loaded = load_model(path)
        assert np.array_equal(loaded.stages[1][0].conv1_w.mask, block.conv1_w.mask)
        assert loaded.prune_history == ["abc123"]
        assert count_parameters(loaded) == count_parameters(model)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(BadMagicError):
            load_model(path)

    def test_unsupported_version(self, tmp_path):
        model = build_default_uclf(0.25, seed=12)
        path = tmp_path / "v.ckpt"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 4] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_model(path)

    def test_truncated_payload(self, tmp_path):
        model = build_default_uclf(0.25, seed=13)
        path = tmp_path / "t.ckpt"
        save_model(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            load_model(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        model = build_default_uclf(0.25, seed=14)
        path = tmp_path / "g.ckpt"
        save_model(model, path)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_clone_is_independent(self):
        model = build_default_uclf(0.25, seed=15)
        clone = model.clone()
        clone.head_w.data[:] = 0
        assert not np.array_equal(model.head_w.data, clone.head_w.data)
