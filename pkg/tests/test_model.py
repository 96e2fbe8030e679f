import math

import numpy as np
import pytest

from frustumbox import tensor as T
from frustumbox.checkpoint import CheckpointMismatch, load_checkpoint
from frustumbox.model import (
    AttentionTrace,
    BoxAnnotator,
    IndexOutOfRange,
    InvalidMode,
    ModelConfig,
    decode_prediction,
    direction_score,
    export_attention,
)
from frustumbox.geometry import DIRECTION_BACK, DIRECTION_FRONT


def tiny_config(**kw):
    base = dict(d=16, n_points=8, n_local_layers=1, n_global_layers=1,
                n_decoder_layers=1, heads=2, head_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def make_model(seed=0, **kw):
    return BoxAnnotator(tiny_config(**kw), rng=np.random.default_rng(seed))


def rand_points(rng, b, n):
    return rng.normal(size=(b, n, 3))


class TestConfig:
    def test_desk_preset(self):
        cfg = ModelConfig.desk()
        assert cfg.d == 64 and cfg.n_points == 128
        assert cfg.n_local_layers == 2 and cfg.n_global_layers == 1
        assert cfg.n_decoder_layers == 1

    def test_invalid_pos_mode(self):
        with pytest.raises(InvalidMode):
            ModelConfig(pos_mode="fourier")

    def test_head_divisibility(self):
        with pytest.raises(Exception):
            ModelConfig(d=10, heads=3)

    def test_roundtrip_dict(self):
        cfg = ModelConfig.desk(use_global=False, pos_mode="sine")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEmbedPoints:
    def test_shape(self):
        m = make_model()
        out = m.embed_points(np.zeros((1, 4, 3)))
        assert out.shape == (1, 4, 16)

    def test_duplicate_points_duplicate_rows(self):
        m = make_model()
        rng = np.random.default_rng(1)
        pts = rand_points(rng, 1, 6)
        pts[0, 3] = pts[0, 1]
        out = m.embed_points(pts).data
        assert (out[0, 3] == out[0, 1]).all()

    def test_permutation_equivariance(self):
        m = make_model()
        rng = np.random.default_rng(2)
        pts = rand_points(rng, 1, 6)
        perm = rng.permutation(6)
        out = m.embed_points(pts).data
        out_p = m.embed_points(pts[:, perm]).data
        np.testing.assert_array_equal(out[:, perm], out_p)


class TestPositionalEncoding:
    def test_mlp_mode_identical_coords(self):
        m = make_model(pos_mode="mlp")
        pts = np.zeros((1, 3, 3))
        pts[0, 0] = pts[0, 2] = [1.0, 2.0, 3.0]
        out = m.positional_encode(pts).data
        assert (out[0, 0] == out[0, 2]).all()

    def test_sine_mode_shape_and_determinism(self):
        m = make_model(pos_mode="sine")
        rng = np.random.default_rng(3)
        pts = rand_points(rng, 2, 5)
        a = m.positional_encode(pts).data
        b = m.positional_encode(pts).data
        assert a.shape == (2, 5, 16)
        assert (a == b).all()

    def test_none_mode_raises_on_direct_call(self):
        m = make_model(pos_mode="none")
        with pytest.raises(InvalidMode):
            m.positional_encode(np.zeros((1, 2, 3)))

    def test_none_mode_forward_ignores_positions(self):
        # without positional encoding the model is coordinate-MLP only; the
        # forward must still run and produce the contracted shapes
        m = make_model(pos_mode="none")
        out = m.forward(np.zeros((2, 8, 3)))
        assert out.boxes.shape == (2, 7)

    def test_pos_mode_gradient_reaches_encoder(self):
        m = make_model(pos_mode="mlp")
        rng = np.random.default_rng(4)
        pts = rand_points(rng, 2, 8)
        out = m.forward(pts)
        T.backward(out.boxes.sum())
        g = m.params["pos.l0.w"].grad
        assert g is not None and np.abs(g).max() > 0


class TestForwardLocal:
    def test_sequence_length(self):
        m = make_model()
        emb = m.embed_points(np.zeros((2, 8, 3)))
        out, _ = m.forward_local(emb)
        assert out.shape == (2, 15, 16)

    def test_point_permutation_moves_point_rows_fixes_tokens(self):
        m = make_model()
        rng = np.random.default_rng(5)
        pts = rand_points(rng, 1, 8)
        perm = rng.permutation(8)
        emb = m.embed_points(pts)
        emb_p = m.embed_points(pts[:, perm])
        out, _ = m.forward_local(emb)
        out_p, _ = m.forward_local(emb_p)
        np.testing.assert_allclose(out_p.data[:, :7], out.data[:, :7], atol=1e-9)
        np.testing.assert_allclose(out_p.data[:, 7:], out.data[:, 7 + perm], atol=1e-9)

    def test_zeroed_output_projections_residual_identity(self):
        m = make_model(n_local_layers=1)
        for name in ("local.0.attn.o.w", "local.0.attn.o.b",
                     "local.0.mlp.l2.w", "local.0.mlp.l2.b"):
            m.params[name].data[:] = 0.0
        rng = np.random.default_rng(6)
        emb = m.embed_points(rand_points(rng, 2, 8))
        seq = T.concat([m.box_token_sequence(2), emb], axis=1)
        out, _ = m.forward_local(emb)
        np.testing.assert_array_equal(out.data, seq.data)


class TestForwardGlobal:
    def test_single_object_attends_to_self(self):
        m = make_model()
        emb = m.embed_points(np.random.default_rng(7).normal(size=(1, 8, 3)))
        x, _ = m.forward_local(emb)
        _, traces = m.forward_global(x, capture=True)
        # capture=True returns weights shaped (S, H, B, B); B=1 forces 1.0
        out, traces = m.forward_global(x, capture=True)
        assert all((w.data == 1.0).all() for w in traces)
        assert out.shape == x.shape

    def test_batch_permutation_equivariance_bit_exact(self):
        m = make_model()
        rng = np.random.default_rng(8)
        pts = rand_points(rng, 5, 8)
        perm = rng.permutation(5)
        out = m.forward(pts)
        out_p = m.forward(pts[perm])
        assert (out.boxes.data[perm] == out_p.boxes.data).all()
        assert (out.direction_logits.data[perm] == out_p.direction_logits.data).all()

    def test_cross_object_information_flow(self):
        m = make_model(use_global=True)
        rng = np.random.default_rng(9)
        pts = rand_points(rng, 3, 8)
        base = m.forward(pts).boxes.data.copy()
        bumped = pts.copy()
        bumped[2] += 0.5
        moved = m.forward(bumped).boxes.data
        # object 0 must feel object 2's change through the global stage
        assert np.abs(moved[0] - base[0]).max() > 0

    def test_no_cross_object_flow_when_global_off(self):
        m = make_model(use_global=False)
        rng = np.random.default_rng(10)
        pts = rand_points(rng, 3, 8)
        base = m.forward(pts).boxes.data.copy()
        bumped = pts.copy()
        bumped[2] += 0.5
        moved = m.forward(bumped).boxes.data
        np.testing.assert_array_equal(moved[:2], base[:2])
        assert np.abs(moved[2] - base[2]).max() > 0


class TestForwardDecoder:
    def test_output_shape(self):
        m = make_model()
        rng = np.random.default_rng(11)
        x, _ = m.forward_local(m.embed_points(rand_points(rng, 2, 8)))
        q, _, _ = m.forward_decoder(x)
        assert q.shape == (2, 7, 16)

    def test_point_feature_permutation_invariance(self):
        m = make_model()
        rng = np.random.default_rng(12)
        x, _ = m.forward_local(m.embed_points(rand_points(rng, 1, 8)))
        data = x.data.copy()
        perm = rng.permutation(8)
        permuted = data.copy()
        permuted[:, 7:] = data[:, 7 + perm]
        q1, _, _ = m.forward_decoder(T.Tensor(data))
        q2, _, _ = m.forward_decoder(T.Tensor(permuted))
        np.testing.assert_allclose(q1.data, q2.data, atol=1e-9)

    def test_decoder_off_reads_encoder_tokens(self):
        m = make_model(use_decoder=False)
        assert not any(name.startswith("dec.") for name in m.params)
        out = m.forward(np.zeros((2, 8, 3)))
        assert out.boxes.shape == (2, 7)


class TestHeads:
    def test_shapes(self):
        m = make_model()
        rng = np.random.default_rng(13)
        decoded = T.Tensor(rng.normal(size=(3, 7, 16)))
        assert m.regress_box(decoded).shape == (3, 7)
        assert m.classify_direction(decoded).shape == (3, 2)

    def test_log_dimension_decoding(self):
        box = decode_prediction(np.zeros(7), np.array([1.0, 0.0]))
        assert box.width == box.length == box.height == pytest.approx(1.0)

    def test_direction_flip_adds_pi(self):
        front = decode_prediction(np.zeros(7), np.array([5.0, 0.0]))
        back = decode_prediction(np.zeros(7), np.array([0.0, 5.0]))
        assert front.yaw == pytest.approx(0.0)
        assert abs(back.yaw) == pytest.approx(math.pi)

    def test_yaw_wrapped_to_half_circle_before_flip(self):
        raw = np.zeros(7)
        raw[6] = 2.0  # outside [-pi/2, pi/2)
        box = decode_prediction(raw, np.array([5.0, 0.0]))
        assert -math.pi / 2 <= box.yaw < math.pi / 2

    def test_direction_score_is_max_softmax(self):
        assert direction_score(np.array([0.0, 0.0])) == pytest.approx(0.5)
        assert direction_score(np.array([10.0, 0.0])) == pytest.approx(1.0, abs=1e-4)


class TestForward:
    def test_output_shapes(self):
        m = make_model()
        out = m.forward(np.zeros((3, 8, 3)))
        assert out.boxes.shape == (3, 7)
        assert out.direction_logits.shape == (3, 2)
        assert out.attention is None

    @pytest.mark.parametrize(
        "toggles",
        [
            dict(use_global=False, use_decoder=False, pos_mode="none"),  # A
            dict(use_global=True, use_decoder=False, pos_mode="none"),   # B
            dict(use_global=True, use_decoder=True, pos_mode="none"),    # C
            dict(use_global=True, use_decoder=True, pos_mode="sine"),    # D
            dict(use_global=True, use_decoder=True, pos_mode="mlp"),     # full
        ],
    )
    def test_all_toggle_configurations_run(self, toggles):
        m = make_model(**toggles)
        rng = np.random.default_rng(14)
        out = m.forward(rand_points(rng, 2, 8))
        assert np.isfinite(out.boxes.data).all()
        assert np.isfinite(out.direction_logits.data).all()

    def test_determinism(self):
        rng = np.random.default_rng(15)
        pts = rand_points(rng, 2, 8)
        m = make_model(seed=3)
        a = m.forward(pts)
        b = m.forward(pts)
        assert (a.boxes.data == b.boxes.data).all()
        assert (a.direction_logits.data == b.direction_logits.data).all()

    def test_point_permutation_leaves_boxes_unchanged(self):
        m = make_model()
        rng = np.random.default_rng(16)
        pts = rand_points(rng, 2, 8)
        perm = rng.permutation(8)
        a = m.forward(pts)
        b = m.forward(pts[:, perm])
        np.testing.assert_allclose(a.boxes.data, b.boxes.data, atol=1e-9)
        np.testing.assert_allclose(
            a.direction_logits.data, b.direction_logits.data, atol=1e-9
        )

    def test_gradient_reaches_all_heads(self):
        from frustumbox.loss import total_loss
        from frustumbox.geometry import Box3D

        m = make_model()
        rng = np.random.default_rng(17)
        pts = rand_points(rng, 2, 8)
        gts = [Box3D(0.1, -0.2, 0.0, 1.5, 3.0, 1.4, 0.3),
               Box3D(-0.3, 0.4, 0.1, 1.6, 3.5, 1.5, -1.2)]
        out = m.forward(pts)
        breakdown = total_loss(out.boxes, out.direction_logits, gts)
        T.backward(breakdown.total)
        for head in ("loc", "dim", "yaw", "dir"):
            g = m.params[f"head.{head}.l2.w"].grad
            assert g is not None and np.abs(g).max() > 0, head


class TestAttentionExport:
    def _traced(self, n=8, b=2):
        m = make_model()
        rng = np.random.default_rng(18)
        out = m.forward(rand_points(rng, b, n), capture_attention=True)
        return m, out

    def test_full_permutation_when_topk_is_sequence(self):
        _, out = self._traced()
        exp = export_attention(out.attention, 0, 2, top_k=15)
        assert sorted(exp.indices.tolist()) == list(range(15))

    def test_scores_non_increasing(self):
        _, out = self._traced()
        exp = export_attention(out.attention, 1, 5, top_k=10)
        assert (np.diff(exp.scores) <= 0).all()

    def test_rows_sum_to_one(self):
        _, out = self._traced()
        exp = export_attention(out.attention, 0, 0, top_k=15)
        assert exp.full_row.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(exp.token_rows.sum(axis=1), 1.0, atol=1e-9)

    def test_token_reference(self):
        _, out = self._traced()
        exp = export_attention(out.attention, 0, 3, top_k=5, reference_is_token=True)
        assert len(exp.indices) == 5

    def test_index_errors(self):
        _, out = self._traced()
        with pytest.raises(IndexOutOfRange):
            export_attention(out.attention, 9, 0, top_k=5)
        with pytest.raises(IndexOutOfRange):
            export_attention(out.attention, 0, 99, top_k=5)
        with pytest.raises(IndexOutOfRange):
            export_attention(out.attention, 0, 0, top_k=99)
        with pytest.raises(IndexOutOfRange):
            export_attention(AttentionTrace(), 0, 0, top_k=1)


class TestPersistence:
    def test_checkpoint_roundtrip(self, tmp_path):
        m = make_model(seed=5)
        path = m.save(tmp_path / "model.ckpt", extras={"note": 1})
        loaded = BoxAnnotator.from_checkpoint(str(path))
        assert loaded.config == m.config
        for name, p in m.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, p.data)
        ckpt = load_checkpoint(path)
        assert ckpt.extras == {"note": 1}

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        a = make_model(seed=6).save(tmp_path / "a.ckpt")
        b = make_model(seed=6).save(tmp_path / "b.ckpt")
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_name_mismatch_fails_loudly(self, tmp_path):
        m = make_model(use_global=True)
        path = m.save(tmp_path / "model.ckpt")
        other = make_model(use_global=False)
        ckpt = load_checkpoint(path)
        with pytest.raises(CheckpointMismatch):
            other.load_state(ckpt.params)

    def test_shape_mismatch_fails_loudly(self):
        m = make_model()
        arrays = m.state_arrays()
        arrays["embed.l0.w"] = np.zeros((3, 99))
        with pytest.raises(CheckpointMismatch):
            m.load_state(arrays)

    def test_parameter_count_stable(self):
        a = make_model(seed=0).num_parameters()
        b = make_model(seed=9).num_parameters()
        assert a == b

    def test_full_scale_parameter_count_frozen(self):
        # regression pin for the full-scale configuration
        m = BoxAnnotator(ModelConfig(), rng=np.random.default_rng(0))
        assert m.num_parameters() == 35_496_965
