import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalfuse.encoder import EncoderConfig, init_params
from modalfuse.errors import ConfigError, ShapeError
from modalfuse.mdm import (
    FusionOutcome,
    MdmParams,
    aggregate,
    channel_weights,
    compensate,
    drop_without_compensation,
    gated_contribution,
    spatial_weights,
)
from modalfuse.tensor import GradTape, Tensor, add, backward, mul, precision, tensor_sum

from oracles import channel_gate_oracle, compensate_oracle, random_features, spatial_gate_oracle


def random_mdm(rng, c, scale=1.0):
    r = max(1, c // 4)
    with precision(np.float64):
        return MdmParams(
            Tensor(rng.standard_normal((r, c, 1, 1)) * scale),
            Tensor(rng.standard_normal(r) * scale),
            Tensor(rng.standard_normal((c, r, 1, 1)) * scale),
            Tensor(rng.standard_normal(c) * scale),
            Tensor(rng.standard_normal((1, 2, 3, 3)) * scale),
            Tensor(rng.standard_normal(1) * scale),
        )


def constant_mdm(c, bias, dtype=np.float64):
    """Zero weights and a constant bias, so both gates equal sigmoid(bias) everywhere."""
    r = max(1, c // 4)
    with precision(dtype):
        return MdmParams(
            Tensor(np.zeros((r, c, 1, 1))),
            Tensor(np.zeros(r)),
            Tensor(np.zeros((c, r, 1, 1))),
            Tensor(np.full(c, bias)),
            Tensor(np.zeros((1, 2, 3, 3))),
            Tensor([bias]),
        )


def arrays_of(features):
    return {k: v.data for k, v in features.items()}


class TestGates:
    def test_zero_params_give_half(self, rng):
        f = Tensor(rng.standard_normal((2, 8, 4, 4)))
        p = constant_mdm(8, 0.0, np.float32)
        assert np.all(channel_weights(f, p).data == 0.5)
        assert np.all(spatial_weights(f, p).data == 0.5)

    def test_shapes(self, rng):
        f = Tensor(rng.standard_normal((2, 8, 4, 4)))
        p = random_mdm(rng, 8)
        assert channel_weights(f, p).shape == (2, 8, 1, 1)
        assert spatial_weights(f, p).shape == (2, 1, 4, 4)

    def test_channel_gate_oracle(self, rng):
        p = random_mdm(rng, 8)
        f = rng.uniform(-2, 2, (2, 8, 3, 3))
        with precision(np.float64):
            out = channel_weights(Tensor(f), p).data
        ref = channel_gate_oracle(f, p.chan1_weight.data, p.chan1_bias.data, p.chan2_weight.data, p.chan2_bias.data)
        np.testing.assert_allclose(out, ref, atol=1e-9)

    def test_spatial_gate_oracle(self, rng):
        p = random_mdm(rng, 4)
        f = rng.uniform(-2, 2, (2, 4, 4, 5))
        with precision(np.float64):
            out = spatial_weights(Tensor(f), p).data
        ref = spatial_gate_oracle(f, p.spatial_weight.data, p.spatial_bias.data)
        np.testing.assert_allclose(out, ref, atol=1e-9)

    def test_gates_inside_unit_interval(self, rng):
        p = random_mdm(rng, 8)
        f = Tensor(rng.uniform(-2, 2, (3, 8, 4, 4)), dtype=np.float64)
        for g in (channel_weights(f, p).data, spatial_weights(f, p).data):
            assert np.all((g > 0) & (g < 1))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            channel_weights(Tensor(np.zeros((1, 4, 2, 2))), random_mdm(rng, 8))


class TestCompensate:
    def test_saturated_low_gates_are_identity(self, rng):
        f = random_features(rng, "abc", (2, 8, 4, 4))
        out = compensate(f, ["b"], constant_mdm(8, -60.0))
        for k in ("a", "c"):
            np.testing.assert_allclose(out.surviving[k].data, f[k].data, atol=1e-6, rtol=0)

    def test_saturated_high_gates_add_dropped(self, rng):
        f = random_features(rng, "abc", (2, 8, 4, 4))
        out = compensate(f, ["c"], constant_mdm(8, 60.0))
        for k in ("a", "b"):
            np.testing.assert_allclose(out.surviving[k].data, f[k].data + f["c"].data, atol=1e-12)

    def test_matches_elementwise_oracle(self, rng):
        p = random_mdm(rng, 4)
        f = random_features(rng, "abcd", (2, 4, 3, 3))
        dropped = ["b", "d"]
        out = compensate(f, dropped, p)
        wc = {j: channel_gate_oracle(f[j].data, p.chan1_weight.data, p.chan1_bias.data, p.chan2_weight.data, p.chan2_bias.data) for j in dropped}
        ws = {j: spatial_gate_oracle(f[j].data, p.spatial_weight.data, p.spatial_bias.data) for j in dropped}
        ref = compensate_oracle(arrays_of(f), dropped, wc, ws)
        assert sorted(out.surviving) == sorted(ref)
        for k in ref:
            np.testing.assert_allclose(out.surviving[k].data, ref[k], atol=1e-6)

    def test_indices_and_names_agree(self, rng):
        p = random_mdm(rng, 4)
        f = random_features(rng, "abc", (1, 4, 2, 2))
        by_name = compensate(f, ["c"], p)
        by_index = compensate(f, [2], p)
        assert by_index.dropped == ["c"] and by_index.dropped_indices == [2]
        for k in by_name.surviving:
            assert np.array_equal(by_name.surviving[k].data, by_index.surviving[k].data)

    def test_all_others_scope(self, rng):
        p = random_mdm(rng, 4)
        f = random_features(rng, "abc", (1, 4, 3, 3))
        out = compensate(f, ["c"], p, scope="all_others")
        contrib = {j: gated_contribution(f[j], p).data for j in f}
        for i in ("a", "b"):
            expected = f[i].data + sum(contrib[j] for j in f if j != i)
            np.testing.assert_allclose(out.surviving[i].data, expected, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 5))
    def test_partition_and_shapes(self, seed, n):
        r = np.random.default_rng(seed)
        names = [f"m{i}" for i in range(n)]
        f = random_features(r, names, (1, 4, 2, 2))
        k = int(r.integers(1, n))
        drop = sorted(r.choice(n, size=k, replace=False).tolist())
        out = compensate(f, drop, random_mdm(r, 4))
        assert len(out.surviving) == n - k
        assert set(out.surviving).isdisjoint(out.dropped)
        assert set(out.surviving) | set(out.dropped) == set(names)
        assert all(t.shape == (1, 4, 2, 2) for t in out.surviving.values())

    def test_linear_in_dropped_feature_with_frozen_gates(self, rng):
        p = random_mdm(rng, 4)
        f = random_features(rng, "ab", (2, 4, 3, 3))
        wc = channel_weights(f["b"], p)
        ws = spatial_weights(f["b"], p)

        def delta(fb):
            return add(mul(mul(wc, 0.5), fb), mul(mul(ws, 0.5), fb)).data

        alpha = 2.7
        scaled = Tensor(alpha * f["b"].data, dtype=np.float64)
        np.testing.assert_allclose(delta(scaled), alpha * delta(f["b"]), rtol=1e-12)

    def test_empty_or_full_drop_set(self, rng):
        f = random_features(rng, "ab", (1, 4, 2, 2))
        p = random_mdm(rng, 4)
        with pytest.raises(ConfigError):
            compensate(f, [], p)
        with pytest.raises(ConfigError):
            compensate(f, ["a", "b"], p)
        with pytest.raises(ConfigError):
            compensate(f, ["zz"], p)
        with pytest.raises(ConfigError):
            drop_without_compensation(f, [0, 1])

    def test_gradient_reaches_dropped_branch_encoder(self, rng):
        cfg = EncoderConfig(num_classes=2, num_stages=1, channels_per_stage=(4,), stage_stride=1)
        params = init_params(cfg, seed=2)
        from modalfuse.encoder import encode_stage

        x = {n: Tensor(rng.standard_normal((1, 3, 4, 4))) for n in "ab"}
        tape = GradTape()
        with tape:
            feats = encode_stage(0, x, params, cfg)
            out = compensate(feats, ["b"], MdmParams.from_model(params, 0))
            loss = tensor_sum(out.surviving["a"])
        grads = backward(tape, loss)
        # branch "a" alone would give these gradients; the dropped branch must add to them
        tape2 = GradTape()
        with tape2:
            only_a = encode_stage(0, {"a": x["a"]}, params, cfg)["a"]
            loss2 = tensor_sum(only_a)
        alone = backward(tape2, loss2)
        w = params["enc.0.conv1.weight"]
        assert not np.allclose(grads[w], alone[w])
        assert np.abs(grads[params["mdm.0.chan2.bias"]]).sum() > 0
        assert np.abs(grads[params["mdm.0.spatial.weight"]]).sum() > 0


class TestAggregate:
    def test_single_survivor_unchanged(self, rng):
        t = Tensor(rng.standard_normal((1, 2, 2, 2)))
        assert aggregate(FusionOutcome({"a": t})) is t

    def test_identical_survivors(self, rng):
        a = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
        out = aggregate(FusionOutcome({"a": Tensor(a), "b": Tensor(a)}))
        np.testing.assert_allclose(out.data, a, rtol=1e-6)

    def test_mean_oracle(self, rng):
        f = random_features(rng, "abc", (2, 3, 2, 2))
        ref = (f["a"].data + f["b"].data + f["c"].data) / 3
        np.testing.assert_allclose(aggregate(FusionOutcome(f)).data, ref, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ConfigError):
            aggregate(FusionOutcome({}))
