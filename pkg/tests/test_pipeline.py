import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalfuse.asm import AsmParams
from modalfuse.data import ModalityBundle
from modalfuse.encoder import EncoderConfig, encode_one, init_params, segmentation_head
from modalfuse.errors import ConfigError
from modalfuse.mdm import MdmParams
from modalfuse.pipeline import (
    FusionStrategy,
    all_subsets,
    conv_flops,
    conv_macs,
    conv_param_count,
    count_efficiency,
    evaluate,
    evaluate_subsets,
    forward,
)
from modalfuse.synth import SceneSpec, generate
from modalfuse.tensor import Tensor, precision
from modalfuse.training import TrainConfig, poly_lr

from oracles import (
    argmin_lowest,
    asm_score_oracle,
    channel_gate_oracle,
    compensate_oracle,
    power_set,
    spatial_gate_oracle,
)

MODS = ("rgb", "depth", "event", "lidar")


def bundle(rng, names=MODS, shape=(2, 3, 8, 8), dtype=None):
    return ModalityBundle.from_arrays({n: rng.standard_normal(shape) for n in names}, dtype=dtype)


def randomise_biases(params, rng):
    for name in params:
        if name.endswith("bias"):
            params.assign(name, rng.standard_normal(params[name].shape) * 0.5)
    return params


@pytest.fixture
def small_data():
    spec = SceneSpec(height=8, width=8, min_size=2, max_size=6, modalities=MODS)
    return generate(spec, 6, "source")


class TestStrategy:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            FusionStrategy("best_drop")

    def test_average_fusion_has_no_drops(self):
        with pytest.raises(ConfigError):
            FusionStrategy("average_fusion", 1)
        assert FusionStrategy.average().drops_per_stage == 0

    def test_negative_drops(self):
        with pytest.raises(ConfigError):
            FusionStrategy("score_drop", -1)

    def test_validate_against_modalities(self):
        FusionStrategy("score_drop", 3).validate(4)
        FusionStrategy("score_drop", 3).validate(1)
        with pytest.raises(ConfigError):
            FusionStrategy("score_drop", 4).validate(4)

    def test_labels(self):
        assert FusionStrategy.average().label == "average_fusion"
        assert FusionStrategy("naive_drop", 2).label == "naive_drop@2"


class TestForward:
    @pytest.mark.parametrize("kind,drops", [("score_drop", 1), ("random_drop", 1), ("naive_drop", 1), ("average_fusion", 0)])
    def test_single_modality_bypass(self, rng, tiny_encoder, tiny_params, kind, drops):
        b = bundle(rng, names=("rgb",))
        logits, trace = forward(b, tiny_params, FusionStrategy(kind, drops), tiny_encoder)
        feat = b.tensors["rgb"]
        for s in range(tiny_encoder.num_stages):
            feat = encode_one(feat, s, tiny_params, tiny_encoder)
        plain = segmentation_head(feat, tiny_params, (8, 8))
        assert np.array_equal(logits.data, plain.data)
        assert trace.dropped == []
        assert all(s.report is None for s in trace.stages)

    def test_average_fusion_keeps_all_branches(self, rng, tiny_encoder, tiny_params):
        _, trace = forward(bundle(rng), tiny_params, FusionStrategy.average(), tiny_encoder)
        assert trace.dropped == []
        assert trace.survivors == list(MODS)

    def test_logit_shape(self, rng, tiny_encoder, tiny_params):
        logits, _ = forward(bundle(rng), tiny_params, FusionStrategy(), tiny_encoder)
        assert logits.shape == (2, tiny_encoder.num_classes, 8, 8)

    def test_zero_drops_equals_average_fusion(self, rng, tiny_encoder, tiny_params):
        b = bundle(rng)
        a, _ = forward(b, tiny_params, FusionStrategy("score_drop", 0), tiny_encoder)
        c, _ = forward(b, tiny_params, FusionStrategy.average(), tiny_encoder)
        assert np.array_equal(a.data, c.data)

    def test_inactive_modalities_are_ignored(self, rng, tiny_encoder, tiny_params):
        b = bundle(rng)
        sub = b.subset(["rgb", "event"])
        only = ModalityBundle.from_arrays({n: b.tensors[n] for n in ("rgb", "event")})
        x, _ = forward(sub, tiny_params, FusionStrategy(), tiny_encoder)
        y, _ = forward(only, tiny_params, FusionStrategy(), tiny_encoder)
        assert np.array_equal(x.data, y.data)

    def test_empty_bundle(self, rng, tiny_encoder, tiny_params):
        with pytest.raises(ConfigError):
            forward(bundle(rng).subset([]), tiny_params, FusionStrategy(), tiny_encoder)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(0, 3), st.sampled_from(["score_drop", "random_drop", "naive_drop"]))
    def test_drop_budget(self, seed, n, k, kind):
        r = np.random.default_rng(seed)
        cfg = EncoderConfig(num_classes=2, num_stages=3, channels_per_stage=(4, 4, 4), stage_stride=1)
        params = init_params(cfg, seed=seed % 100)
        k = min(k, max(n - 1, 0))
        _, trace = forward(bundle(r, names=MODS[:n], shape=(1, 3, 4, 4)), params, FusionStrategy(kind, k), cfg, rng=r)
        assert len(trace.dropped) <= n - 1
        assert len(set(trace.dropped)) == len(trace.dropped)
        assert len(trace.survivors) >= 1

    def test_score_drop_matches_stagewise_replay(self, rng):
        cfg = EncoderConfig(num_classes=3, num_stages=4, channels_per_stage=(4, 4, 8, 8), stage_stride=1)
        with precision(np.float64):
            params = randomise_biases(init_params(cfg, seed=11), rng)
            b = bundle(rng, shape=(2, 3, 4, 4), dtype=np.float64)
            logits, trace = forward(b, params, FusionStrategy("score_drop", 1), cfg)

        # replay with the loop oracles
        feats = {n: b.tensors[n] for n in MODS}
        order = []
        for s in range(cfg.num_stages):
            with precision(np.float64):
                feats = {n: encode_one(x, s, params, cfg) for n, x in feats.items()}
            arrays = {n: t.data for n, t in feats.items()}
            if len(arrays) > 1:
                a = AsmParams.from_model(params, s)
                raw = [t.data for t in (a.psi1_weight, a.psi1_bias, a.psi2_weight, a.psi2_bias, a.w, a.b)]
                means = [float(np.mean(asm_score_oracle(arrays[n], *raw))) for n in arrays]
                victim = list(arrays)[argmin_lowest(means)]
                order.append(victim)
                m = MdmParams.from_model(params, s)
                mw = [t.data for t in (m.chan1_weight, m.chan1_bias, m.chan2_weight, m.chan2_bias)]
                wc = {victim: channel_gate_oracle(arrays[victim], *mw)}
                ws = {victim: spatial_gate_oracle(arrays[victim], m.spatial_weight.data, m.spatial_bias.data)}
                arrays = compensate_oracle(arrays, [victim], wc, ws)
            feats = {n: Tensor(v, dtype=np.float64) for n, v in arrays.items()}

        assert len(trace.dropped) == 3
        assert trace.dropped == order
        assert len(trace.survivors) == 1
        with precision(np.float64):
            ref = segmentation_head(next(iter(feats.values())), params, (4, 4))
        np.testing.assert_allclose(logits.data, ref.data, atol=1e-9)

    def test_random_drop_is_seeded(self, rng, tiny_encoder, tiny_params):
        b = bundle(rng)
        strategy = FusionStrategy("random_drop", 1)
        x, tx = forward(b, tiny_params, strategy, tiny_encoder, rng=np.random.default_rng(5))
        y, ty = forward(b, tiny_params, strategy, tiny_encoder, rng=np.random.default_rng(5))
        assert tx.dropped == ty.dropped
        assert np.array_equal(x.data, y.data)

    def test_drops_capped_at_survivor(self, rng, tiny_encoder, tiny_params):
        _, trace = forward(bundle(rng), tiny_params, FusionStrategy("score_drop", 3), tiny_encoder)
        assert [len(s.dropped) for s in trace.stages] == [3, 0]


class TestSubsets:
    def test_fifteen_subsets(self):
        assert len(all_subsets(MODS)) == 15

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_power_set_oracle(self, n):
        items = [f"m{i}" for i in range(n)]
        assert all_subsets(items) == power_set(items)

    def test_evaluate_all_subsets(self, small_data, tiny_params):
        cfg = EncoderConfig(num_classes=4, num_stages=2, channels_per_stage=(4, 8), stage_stride=2)
        params = init_params(cfg, seed=3)
        rows = evaluate_subsets(params, small_data, None, FusionStrategy(), cfg, batch_size=4)
        assert len(rows) == 15
        assert all(len(sub) >= 1 for sub, _ in rows)
        full = dict(rows)[MODS]
        std = evaluate(params, small_data, FusionStrategy(), cfg, batch_size=4)
        assert full.miou == std.miou
        assert np.array_equal(full.confusion, std.confusion)
        assert all(np.isfinite(r.miou) for _, r in rows)

    def test_unknown_modality(self, small_data):
        cfg = EncoderConfig(num_classes=4, num_stages=2, channels_per_stage=(4, 8))
        with pytest.raises(ConfigError):
            evaluate_subsets(init_params(cfg), small_data, [("rgb", "radar")], FusionStrategy(), cfg)

    def test_subset_order_normalised(self, small_data):
        cfg = EncoderConfig(num_classes=4, num_stages=2, channels_per_stage=(4, 8))
        rows = evaluate_subsets(init_params(cfg), small_data, [("lidar", "rgb")], FusionStrategy(), cfg)
        assert rows[0][0] == ("rgb", "lidar")


class TestPolyLr:
    cfg = TrainConfig(base_lr=1.0, epochs=10, warmup_epochs=2, warmup_factor=0.1)

    def test_warmup_value(self):
        assert poly_lr(0, 100, self.cfg) == pytest.approx(0.1)
        assert poly_lr(19, 100, self.cfg) == pytest.approx(0.1)

    def test_first_post_warmup_step(self):
        assert poly_lr(20, 100, self.cfg) == 1.0

    def test_final_step(self):
        assert poly_lr(100, 100, self.cfg) == 0.0

    def test_halfway(self):
        assert poly_lr(60, 100, self.cfg) == pytest.approx(0.5**0.9)
        assert 0.5**0.9 == pytest.approx(0.536, abs=1e-3)

    def test_non_increasing_after_warmup(self):
        lrs = [poly_lr(t, 100, self.cfg) for t in range(20, 101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            poly_lr(101, 100, self.cfg)


class TestEfficiency:
    def test_linear_parameter_count(self):
        # a linear map m -> n is a 1x1 conv on a 1x1 plane
        for m, n in [(1, 1), (3, 5), (16, 4)]:
            assert conv_param_count(m, n, 1) == m * n + n

    def test_pointwise_conv_flops(self):
        assert conv_macs(2, 4, 2, 2, 1) == 32
        assert conv_flops(2, 4, 2, 2, 1) == 64

    def test_score_drop_cheaper_than_average(self):
        cfg = EncoderConfig(num_classes=4)
        params = init_params(cfg)
        avg = count_efficiency(params, FusionStrategy.average(), (1, 3, 32, 32), cfg, 4)
        drop = count_efficiency(params, FusionStrategy("score_drop", 1), (1, 3, 32, 32), cfg, 4)
        assert drop.flops < avg.flops
        assert drop.param_count == avg.param_count == params.count()

    def test_monotone_in_drops(self):
        cfg = EncoderConfig(num_classes=4)
        params = init_params(cfg)
        flops = [count_efficiency(params, FusionStrategy("score_drop", k), (1, 3, 32, 32), cfg, 4).flops for k in range(4)]
        assert all(a >= b for a, b in zip(flops, flops[1:]))

    def test_average_fusion_encoder_cost(self):
        cfg = EncoderConfig(num_classes=2, num_stages=1, channels_per_stage=(4,), stage_stride=1)
        rep = count_efficiency(init_params(cfg), FusionStrategy.average(), (1, 3, 4, 4), cfg, 2)
        enc = 2 * (2 * 16 * 4 * 3 * 9 + 2 * 16 * 4 * 4 * 9)
        head = 2 * 16 * 2 * 4
        assert rep.flops == enc + head

    def test_batch_scales_linearly(self):
        cfg = EncoderConfig(num_classes=4)
        params = init_params(cfg)
        one = count_efficiency(params, FusionStrategy(), (1, 3, 32, 32), cfg, 4).flops
        three = count_efficiency(params, FusionStrategy(), (3, 3, 32, 32), cfg, 4).flops
        assert three == 3 * one
