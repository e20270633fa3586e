import math

import numpy as np
import pytest

from conftest import jittered_model
from oracles import direct_cross_entropy
from vidattr.data import UNKNOWN, LabeledTracklet, TrackletFeatures
from vidattr.errors import DataFormatError, NumericalError, SchemaMismatchError
from vidattr.model import ModelConfig, Variant, build_model
from vidattr.schema import bundled_schema, parse_schema_text
from vidattr.synthetic import SyntheticSpec, generate_tracklets
from vidattr.tensor import Tensor
from vidattr.training import (
    TrainConfig,
    encode_checkpoint,
    load_checkpoint,
    loss_and_grads,
    multitask_loss,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def synth():
    return generate_tracklets(SyntheticSpec(num_train=60, num_test=10, D_c=16, seed=3))


class TestMultitaskLoss:
    def test_uniform_two_binary_groups(self):
        logits = {"a": Tensor(np.zeros((3, 2))), "b": Tensor(np.zeros((3, 2)))}
        loss, _ = multitask_loss(logits, np.array([[0, 1], [1, 0], [1, 1]]))
        assert abs(loss.item() - 2 * math.log(2)) < 1e-6
        assert abs(loss.item() - 1.386294) < 1e-6

    def test_unknown_group_drops_out(self, rng):
        la, lb = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        ya = np.array([0, 2, 1, 1])
        labels = np.stack([ya, np.full(4, UNKNOWN)], 1)
        loss, comps = multitask_loss({"a": Tensor(la), "b": Tensor(lb)}, labels)
        only_a, _ = multitask_loss({"a": Tensor(la)}, ya[:, None])
        assert loss.item() == pytest.approx(only_a.item(), abs=1e-12)
        assert comps["b"] == 0.0

    def test_matches_loop_oracle(self, rng):
        for _ in range(20):
            B = 5
            la, lb = rng.normal(size=(B, 4)) * 3, rng.normal(size=(B, 3)) * 3
            labels = np.stack([rng.integers(0, 4, B), rng.integers(0, 3, B)], 1)
            labels[rng.random(labels.shape) < 0.2] = UNKNOWN
            if (labels < 0).all():
                continue
            loss, _ = multitask_loss({"a": Tensor(la), "b": Tensor(lb)}, labels)
            expected = sum(
                direct_cross_entropy(lg[i], labels[i, g])
                for i in range(B)
                for g, lg in enumerate((la, lb))
                if labels[i, g] >= 0
            ) / B
            assert loss.item() == pytest.approx(expected, abs=1e-5)

    def test_all_unknown_rejected(self):
        with pytest.raises(ValueError):
            multitask_loss({"a": Tensor(np.zeros((2, 2)))}, np.full((2, 1), UNKNOWN))

    def test_group_weights(self, rng):
        la = rng.normal(size=(3, 2))
        y = np.array([[0], [1], [0]])
        plain, _ = multitask_loss({"a": Tensor(la)}, y)
        weighted, _ = multitask_loss({"a": Tensor(la)}, y, group_weights={"a": 2.5})
        assert weighted.item() == pytest.approx(2.5 * plain.item())

    def test_masked_slot_has_no_gradient_influence(self, small_schema, tiny_batch):
        frames, labels = tiny_batch
        labels = labels.copy()
        labels[1, 2] = UNKNOWN
        model = jittered_model(small_schema, Variant.PROPOSED)
        mask = labels >= 0
        other = labels.copy()
        other[1, 2] = 3  # a real class, but masked
        _, _, g1 = loss_and_grads(model, frames, labels, mask)
        _, _, g2 = loss_and_grads(model, frames, other, mask)
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"K": 0}, {"n": 0}, {"lr": 0.0}, {"lr": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_documented_defaults(self):
        c = TrainConfig()
        assert (c.K, c.n, c.lr) == (64, 6, 3e-4)

    def test_variant_from_string(self):
        assert TrainConfig(variant="pool-sep").variant is Variant.TEMPORAL_POOLING_SEPARATED


class TestTrain:
    def test_loss_decreases(self, synth):
        _, log = train(synth.train, synth.schema, TrainConfig(K=16, steps=200, seed=0, d_a=16, lr=1e-3))
        losses = np.array(log.total_loss)
        assert len(losses) == 200 and np.isfinite(losses).all()
        avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert avg[-1] < avg[0]
        blocks = losses.reshape(10, 20).mean(1)
        assert (np.diff(blocks) < 0).all()

    def test_deterministic(self, synth, tmp_path):
        cfg = TrainConfig(K=8, steps=15, seed=5, d_a=8, checkpoint_every=10)
        m1, l1 = train(synth.train, synth.schema, cfg, tmp_path / "a")
        m2, l2 = train(synth.train, synth.schema, cfg, tmp_path / "b")
        assert l1.total_loss == l2.total_loss
        for name in ("checkpoint.tatr", "checkpoint_step000010.tatr", "train_log.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_log_records(self, synth, tmp_path):
        train(synth.train, synth.schema, TrainConfig(K=4, steps=3, d_a=4), tmp_path)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 3 and '"group_losses"' in lines[0]

    def test_batch_larger_than_dataset(self, synth):
        _, log = train(synth.train[:3], synth.schema, TrainConfig(K=10, steps=2, d_a=4))
        assert len(log.steps) == 2

    def test_empty_set(self, synth):
        with pytest.raises(ValueError):
            train([], synth.schema, TrainConfig(steps=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_group(self, small_schema):
        frames = np.zeros((6, 8, 2, 2), dtype=np.float32)
        frames[0, 0] = 3e38
        item = LabeledTracklet(TrackletFeatures("x", frames), np.array([0, 0, 0]))
        model = build_model(small_schema, ModelConfig(n=6, D_c=8, d_a=4), 0)
        model.params["channel.mp.weight"][...] = 1e3
        with pytest.raises(NumericalError, match="motion"):
            train([item], small_schema, TrainConfig(K=1, steps=1), init_model=model)

    def test_eval_snapshots(self, synth):
        _, log = train(synth.train, synth.schema, TrainConfig(K=4, steps=6, d_a=4),
                       eval_fn=lambda m: {"ok": 1}, eval_every=3)
        assert [s for s, _ in log.snapshots] == [3, 6]

    def test_frozen_attention_matches_pooling_separated(self, synth):
        cfg = dict(K=8, steps=50, seed=2, d_a=6, lr=1e-3, dtype="float64")
        # init draws differ between variants, so start both from the same shared weights
        start = build_model(synth.schema, ModelConfig(n=6, D_c=16, d_a=6), 11, dtype=np.float64)
        base = build_model(synth.schema, ModelConfig(n=6, D_c=16, d_a=6,
                                                     variant=Variant.TEMPORAL_POOLING_SEPARATED), 0,
                           dtype=np.float64)
        for k in base.names():
            base.params[k] = start.params[k].copy()
        pool, _ = train(synth.train, synth.schema,
                        TrainConfig(variant=Variant.TEMPORAL_POOLING_SEPARATED, **cfg), init_model=base)
        prop, _ = train(synth.train, synth.schema,
                        TrainConfig(variant=Variant.PROPOSED, freeze_attention=True, **cfg), init_model=start)
        worst = max(np.max(np.abs(pool.params[k] - prop.params[k])) for k in pool.names())
        assert worst < 1e-5

    def test_clip_norm_bounds_update(self, synth):
        m0 = build_model(synth.schema, ModelConfig(n=6, D_c=16, d_a=4), 0)
        m1, _ = train(synth.train, synth.schema, TrainConfig(K=4, steps=1, d_a=4, clip_norm=1e-3), init_model=m0)
        # Adam's first step moves each coordinate by ~lr regardless of scale
        delta = max(np.max(np.abs(m1.params[k] - m0.params[k])) for k in m0.names())
        assert delta <= 3e-4 * 1.01


class TestCheckpoint:
    def test_round_trip(self, small_schema, tmp_path):
        for variant in Variant:
            m = build_model(small_schema, ModelConfig(n=4, D_c=8, d_a=3, variant=variant), 7)
            save_checkpoint(m, tmp_path / "m.tatr")
            back = load_checkpoint(tmp_path / "m.tatr", small_schema)
            assert back.config == m.config
            for k in m.names():
                assert back.params[k].tobytes() == m.params[k].tobytes()

    def test_mars_round_trip(self, tmp_path):
        mars = bundled_schema("mars")
        m = build_model(mars, ModelConfig(n=6, D_c=16, d_a=8), 0)
        save_checkpoint(m, tmp_path / "m.tatr")
        back = load_checkpoint(tmp_path / "m.tatr", mars)
        assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.names())

    def test_schema_mismatch(self, small_schema, tmp_path):
        m = build_model(small_schema, ModelConfig(n=4, D_c=8, d_a=3), 0)
        save_checkpoint(m, tmp_path / "m.tatr")
        other = parse_schema_text("motion|mp|walk,stand\ngender|id|male,female\n")
        with pytest.raises(SchemaMismatchError, match="digest"):
            load_checkpoint(tmp_path / "m.tatr", other)

    def test_truncated(self, small_schema, tmp_path):
        blob = encode_checkpoint(build_model(small_schema, ModelConfig(n=4, D_c=8, d_a=3), 0))
        for cut in (10, len(blob) - 4):
            (tmp_path / "t.tatr").write_bytes(blob[:cut])
            with pytest.raises(DataFormatError):
                load_checkpoint(tmp_path / "t.tatr", small_schema)

    def test_bad_magic_and_version(self, small_schema, tmp_path):
        blob = bytearray(encode_checkpoint(build_model(small_schema, ModelConfig(n=4, D_c=8, d_a=3), 0)))
        bad = bytes(b"XXXX" + blob[4:])
        (tmp_path / "b.tatr").write_bytes(bad)
        with pytest.raises(DataFormatError, match="magic"):
            load_checkpoint(tmp_path / "b.tatr", small_schema)
        blob[4] = 9
        (tmp_path / "v.tatr").write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="version"):
            load_checkpoint(tmp_path / "v.tatr", small_schema)

    def test_missing(self, small_schema, tmp_path):
        with pytest.raises(DataFormatError):
            load_checkpoint(tmp_path / "nope.tatr", small_schema)
