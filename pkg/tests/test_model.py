import math

import numpy as np
import pytest

from alignlm import model as M
from alignlm.errors import MissingAudioError, PoolError, SequenceTooLongError, ShapeError, VocabError
from alignlm.numeric import ParamSet, Tensor, forward_backward
from alignlm.synthetic import audio_latent, caption_for_latent, is_generated, text_latent

from conftest import grad_error


# independent reference transformer ------------------------------------------------------------
def _rms(x, g, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * g


def _silu(x):
    return x / (1.0 + np.exp(-x))


def reference_hidden(inputs, params, cfg):
    """Per-position, per-head loop over an unpadded ``(L, d)`` input-embedding matrix."""
    p = {k: np.asarray(v) for k, v in params.items()}
    length, d = inputs.shape
    heads, dh = cfg.llm_heads, d // cfg.llm_heads
    x = inputs + p["llm.pos"][:length]
    for layer in range(cfg.llm_layers):
        pre = f"llm.layers.{layer}."
        h = _rms(x, p[pre + "attn_norm"], cfg.norm_eps)
        q, k, v = h @ p[pre + "wq"], h @ p[pre + "wk"], h @ p[pre + "wv"]
        o = np.zeros_like(x)
        for t in range(length):
            for a in range(heads):
                cols = slice(a * dh, (a + 1) * dh)
                s = np.array([q[t, cols] @ k[j, cols] / math.sqrt(dh) for j in range(t + 1)])
                w = np.exp(s - s.max())
                w /= w.sum()
                o[t, cols] = sum(w[j] * v[j, cols] for j in range(t + 1))
        x = x + o @ p[pre + "wo"]
        h = _rms(x, p[pre + "ffn_norm"], cfg.norm_eps)
        x = x + (_silu(h @ p[pre + "w_gate"]) * (h @ p[pre + "w_val"])) @ p[pre + "w_out"]
    return _rms(x, p["llm.final_norm"], cfg.norm_eps)


def sequence_inputs(seq, params):
    """Input-embedding rows of an InputSequence: token rows from the table, audio rows verbatim."""
    audio = np.asarray(seq.audio.data if isinstance(seq.audio, Tensor) else seq.audio)
    table = params["llm.embed"]
    rows = [table[s] if isinstance(s, int) else audio[s[1]] for s in seq.slots]
    return np.stack(rows)


def random_audio(rng, cfg, m=None):
    return rng.normal(size=(m or cfg.audio_tokens, cfg.llm_dim))


# config -----------------------------------------------------------------------------------------
def test_full_scale_preset_widths():
    cfg = M.preset("full")
    assert (cfg.enc_dim, cfg.enc_rate, cfg.audio_tokens, cfg.llm_dim, cfg.proj_layers) == (768, 50, 100, 896, 3)
    assert cfg.n_frames == 500
    assert cfg.hidden_proj == 2 * 896


def test_desk_preset_defaults():
    cfg = M.preset("desk")
    assert (cfg.llm_dim, cfg.llm_layers, cfg.llm_heads, cfg.max_seq_len) == (32, 2, 4, 128)
    assert cfg.vocab_size == 256 + 4
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [
    dict(score_id=256),
    dict(eos_id=999),
    dict(llm_heads=5),
    dict(audio_tokens=0),
])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        M.preset("desk", **bad)


def test_unknown_preset():
    with pytest.raises(ValueError):
        M.preset("huge")


def test_tokenize_round_trip():
    text = "dog and rain, café"
    ids = M.tokenize(text)
    assert all(0 <= i < 256 for i in ids)
    assert M.detokenize(ids + [259]) == text


# encoder stand-in ----------------------------------------------------------------------------------
def test_encode_audio_deterministic():
    cfg = M.preset("desk")
    a = M.encode_audio("a0", cfg, seed=7)
    b = M.encode_audio("a0", cfg, seed=7)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert not np.array_equal(a.frames, M.encode_audio("a1", cfg, seed=7).frames)


def test_encode_audio_ten_seconds_gives_500_frames():
    feat = M.encode_audio("a0", M.preset("full"))
    assert feat.frames.shape == (500, 768)
    assert feat.frame_rate == 50


def test_feature_file_passthrough(tmp_path):
    cfg = M.preset("desk")
    frames = np.random.default_rng(0).normal(size=(40, 16)).astype(np.float32)
    M.write_features(tmp_path / "clip.feat", frames, 50.0)
    feat = M.encode_audio("clip.feat", cfg, data_root=tmp_path)
    assert feat.frames.shape == (40, 16)
    np.testing.assert_array_equal(feat.frames, frames.astype(np.float64))
    same = M.encode_audio(f"file:{tmp_path / 'clip.feat'}", cfg)
    np.testing.assert_array_equal(same.frames, feat.frames)


def test_feature_file_errors(tmp_path):
    cfg = M.preset("desk")
    M.write_features(tmp_path / "wide.feat", np.zeros((12, 20)), 50.0)
    with pytest.raises(ShapeError):
        M.encode_audio("wide.feat", cfg, data_root=tmp_path)
    with pytest.raises(MissingAudioError):
        M.encode_audio("absent.feat", cfg, data_root=tmp_path)
    with pytest.raises(MissingAudioError):
        M.encode_audio("", cfg)
    (tmp_path / "junk.feat").write_bytes(b"nope" * 10)
    with pytest.raises(MissingAudioError):
        M.encode_audio("junk.feat", cfg, data_root=tmp_path)


def test_generated_clips_share_latent_but_not_frames():
    cfg = M.preset("desk")
    assert is_generated("gen-7-f000001") and not is_generated("syn-7-f000001")
    a = M.encode_audio("syn-1-x", cfg).frames
    b = M.encode_audio("gen-1-x", cfg).frames
    assert a.shape == b.shape and not np.allclose(a, b)


def test_synthetic_caption_matches_latent():
    for i in range(50):
        u = audio_latent(f"syn-7-p{i:06d}")
        caption = caption_for_latent(u)
        v = text_latent(caption)
        assert set(np.flatnonzero(u)) == set(np.flatnonzero(v))
        assert 1 <= (u > 0).sum() <= 3


# pooling --------------------------------------------------------------------------------------------------
def test_pool_500_to_100_groups_of_five():
    assert M.pool_groups(500, 100) == [5] * 100
    frames = np.arange(500 * 3, dtype=float).reshape(500, 3)
    out = M.temporal_average_pool(frames, 100)
    np.testing.assert_array_equal(out[0], frames[:5].mean(axis=0))
    np.testing.assert_array_equal(out[99], frames[495:].mean(axis=0))


def test_pool_identity_and_remainder_rule():
    frames = np.random.default_rng(1).normal(size=(6, 4))
    np.testing.assert_array_equal(M.temporal_average_pool(frames, 6), frames)
    const = np.full((7, 3), 2.5)
    assert M.pool_groups(7, 2) == [4, 3]
    np.testing.assert_array_equal(M.temporal_average_pool(const, 2), np.full((2, 3), 2.5))


def test_pool_rejects_upsampling():
    with pytest.raises(PoolError):
        M.temporal_average_pool(np.zeros((3, 2)), 4)
    with pytest.raises(PoolError):
        M.pool_groups(3, 0)


def test_pool_mean_preserved_when_divisible():
    rng = np.random.default_rng(2)
    for _ in range(20):
        target = int(rng.integers(1, 12))
        frames = rng.normal(size=(target * int(rng.integers(1, 9)), 5))
        out = M.temporal_average_pool(frames, target)
        np.testing.assert_allclose(out.mean(axis=0), frames.mean(axis=0), atol=1e-12, rtol=0)


# projection -------------------------------------------------------------------------------------------------
def test_projection_zero_weights_give_zero():
    cfg = M.preset("micro")
    params = M.init_params(cfg, 0)
    for name in params.names():
        if name.startswith("proj."):
            params[name] = np.zeros_like(params[name])
    out = M.project_audio(np.random.default_rng(0).normal(size=(2, 3)), params)
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_projection_hand_computed_swiglu():
    p = ParamSet()
    p.add("proj.0.w_gate", [[1.0, 0.0], [0.0, -1.0]])
    p.add("proj.0.w_val", [[2.0, 1.0], [0.0, 1.0]])
    p.add("proj.0.w_out", [[1.0, 0.5], [-1.0, 0.0]])
    x = np.array([[1.0, 2.0]])
    # gate = [1, -2], value = [2, 3]
    silu1 = 1.0 / (1.0 + math.exp(-1.0))
    silu_m2 = -2.0 / (1.0 + math.exp(2.0))
    hidden = [silu1 * 2.0, silu_m2 * 3.0]
    expected = [hidden[0] - hidden[1], 0.5 * hidden[0]]
    out = M.project_audio(x, p)
    np.testing.assert_allclose(out.data[0], expected, rtol=0, atol=1e-15)


def test_projection_gradients(micro_cfg):
    pooled = np.random.default_rng(4).normal(size=(2, 3))
    for seed in range(5):
        params = M.init_params(micro_cfg, seed)
        params.freeze_all()
        params.set_trainable("proj.")
        assert grad_error(lambda t: M.project_audio(pooled, t).sum(), params) < 1e-5


def test_projection_shape_mismatch():
    params = M.init_params(M.preset("micro"), 0)
    with pytest.raises(ShapeError):
        M.project_audio(np.zeros((2, 5)), params)


# sequence layout --------------------------------------------------------------------------------------------
def test_assemble_layout_example():
    cfg = M.preset("desk")
    seq = M.assemble_sequence([5, 9], np.zeros((3, cfg.llm_dim)), cfg)
    assert seq.slots == [5, 9, 256, ("audio", 0), ("audio", 1), ("audio", 2), 257, 258]
    assert seq.positions == {"audio_start": 2, "audio_end": 6, "score": 7}
    assert len(seq) == 8


def test_assemble_empty_text():
    cfg = M.preset("desk")
    seq = M.assemble_sequence([], np.zeros((1, cfg.llm_dim)), cfg)
    assert seq.slots == [256, ("audio", 0), 257, 258]


def test_assemble_length_boundary():
    cfg = M.preset("desk")
    audio = np.zeros((10, cfg.llm_dim))
    fits = [1] * (cfg.max_seq_len - 13)
    assert len(M.assemble_sequence(fits, audio, cfg)) == cfg.max_seq_len
    with pytest.raises(SequenceTooLongError):
        M.assemble_sequence(fits + [1], audio, cfg)


def test_caption_layout():
    cfg = M.preset("desk")
    seq = M.caption_sequence(np.zeros((2, cfg.llm_dim)), [7, 8], cfg)
    assert seq.slots == [256, ("audio", 0), ("audio", 1), 257, 7, 8]


# transformer ----------------------------------------------------------------------------------------------------
@pytest.mark.parametrize("preset", ["micro", "desk"])
def test_lm_forward_matches_reference_loop(preset):
    cfg = M.preset(preset)
    rng = np.random.default_rng(5)
    params = M.init_params(cfg, 5)
    text = list(rng.integers(0, 8, size=6))
    seq = M.assemble_sequence(text, random_audio(rng, cfg), cfg)
    hidden = M.lm_forward(seq, params, cfg).data
    ref = reference_hidden(sequence_inputs(seq, params), params, cfg)
    np.testing.assert_allclose(hidden, ref, rtol=0, atol=1e-12)


def test_single_slot_hand_stepped_micro_transformer():
    # 1 layer, 1 head, width 2; one audio slot and nothing else
    cfg = M.ModelConfig(enc_dim=2, llm_dim=2, llm_layers=1, llm_heads=1, ffn_dim=1, vocab_size=4,
                        audio_start_id=0, audio_end_id=1, score_id=2, eos_id=3, max_seq_len=4, norm_eps=0.0)
    p = ParamSet()
    p.add("llm.embed", np.zeros((4, 2)))
    p.add("llm.pos", [[0.5, -0.5], [0, 0], [0, 0], [0, 0]])
    pre = "llm.layers.0."
    p.add(pre + "attn_norm", [1.0, 2.0])
    p.add(pre + "wq", [[1.0, 0.0], [0.0, 1.0]])
    p.add(pre + "wk", [[0.3, 0.1], [0.2, 0.4]])
    p.add(pre + "wv", [[1.0, 0.0], [1.0, 1.0]])
    p.add(pre + "wo", [[0.5, 0.0], [0.0, 0.5]])
    p.add(pre + "ffn_norm", [1.0, 1.0])
    p.add(pre + "w_gate", [[1.0], [0.0]])
    p.add(pre + "w_val", [[0.0], [1.0]])
    p.add(pre + "w_out", [[1.0, -1.0]])
    p.add("llm.final_norm", [1.0, 1.0])
    audio = np.array([[1.5, 0.5]])
    seq = M.InputSequence([], audio, [])
    out = M.lm_forward(seq, p, cfg).data[0]

    # by hand: x0 = [2, 0]; rms(x0) = sqrt(2); h = [sqrt2, 0]
    # attention over one slot has weight 1: o = h @ wv = [sqrt2, 0]; x1 = x0 + o/2
    s2 = math.sqrt(2.0)
    x1 = [2.0 + s2 / 2, 0.0]
    r1 = math.sqrt((x1[0] ** 2) / 2)
    h2 = [x1[0] / r1, 0.0]
    ffn = (h2[0] / (1 + math.exp(-h2[0]))) * h2[1]  # value path reads h2[1] = 0
    x2 = [x1[0] + ffn, x1[1] - ffn]
    r2 = math.sqrt((x2[0] ** 2 + x2[1] ** 2) / 2)
    np.testing.assert_allclose(out, [x2[0] / r2, x2[1] / r2], rtol=0, atol=1e-15)
    assert out[0] == pytest.approx(s2)


def test_zero_block_weights_leave_normalized_embedding_path():
    cfg = M.preset("micro")
    params = M.init_params(cfg, 6)
    for name in params.names():
        if ".layers." in name and not name.endswith("_norm"):
            params[name] = np.zeros_like(params[name])
    rng = np.random.default_rng(6)
    seq = M.assemble_sequence([1, 2, 3], random_audio(rng, cfg), cfg)
    x = sequence_inputs(seq, params) + params["llm.pos"][:len(seq)]
    expected = _rms(x, params["llm.final_norm"], cfg.norm_eps)
    np.testing.assert_allclose(M.lm_forward(seq, params, cfg).data, expected, rtol=0, atol=1e-14)


def test_causality_on_token_and_audio_perturbations():
    cfg = M.preset("desk")
    rng = np.random.default_rng(7)
    params = M.init_params(cfg, 7)
    for _ in range(10):
        text = list(rng.integers(0, 256, size=int(rng.integers(0, 12))))
        audio = random_audio(rng, cfg)
        seq = M.assemble_sequence(text, audio, cfg)
        base = M.lm_forward(seq, params, cfg).data
        t = int(rng.integers(0, len(seq) - 1))
        n_text = len(text)
        new_text = [int(rng.integers(0, 256)) if i > t else v for i, v in enumerate(text)]
        new_audio = audio.copy()
        for i in range(audio.shape[0]):
            if n_text + 1 + i > t:
                new_audio[i] = rng.normal(size=cfg.llm_dim)
        new = M.InputSequence(new_text + [cfg.audio_start_id], new_audio,
                              [int(rng.integers(0, 256)), cfg.score_id] if len(seq) - 2 > t else seq.suffix_ids)
        out = M.lm_forward(new, params, cfg).data
        assert out[:t + 1].tobytes() == base[:t + 1].tobytes()


def test_vocab_error():
    cfg = M.preset("micro")
    params = M.init_params(cfg, 0)
    seq = M.InputSequence([12], np.zeros((2, 4)), [cfg.score_id])
    with pytest.raises(VocabError):
        M.lm_forward(seq, params, cfg)


def test_left_padding_is_invisible():
    cfg = M.preset("micro")
    params = M.init_params(cfg, 1)
    rng = np.random.default_rng(1)
    audio = rng.normal(size=(2, 2, 4))
    prefix = [[1, 2, 3, 8], [5, 8]]
    suffix = [[9, 10], [9, 10]]
    hidden, pad = M.lm_hidden(prefix, audio, suffix, params, cfg)
    assert list(pad) == [0, 2]
    alone, _ = M.lm_hidden([prefix[1]], audio[1:], [suffix[1]], params, cfg)
    np.testing.assert_allclose(hidden.data[1, 2:], alone.data[0], rtol=0, atol=1e-13)


# scoring --------------------------------------------------------------------------------------------------------------
def test_zero_head_scores_bias_exactly():
    cfg = M.preset("desk")
    params = M.init_params(cfg, 0)
    M.add_score_head(params, cfg, 0, bias=0.3)
    params["score_head.weight"] = np.zeros(cfg.llm_dim)
    for ref, text in [("a0", "dog"), ("b7", "rain and wind"), ("c", "")]:
        assert M.predict_score(M.tokenize(text), ref, params, cfg).score == 0.3


def test_score_reads_the_score_slot(micro_cfg, micro_params):
    text = [1, 2, 3]
    out = M.predict_score(text, "a0", micro_params, micro_cfg)
    pooled = M.temporal_average_pool(M.encode_audio("a0", micro_cfg), micro_cfg.audio_tokens)
    seq = M.assemble_sequence(text, M.project_audio(pooled, micro_params), micro_cfg)
    hidden = M.lm_forward(seq, micro_params, micro_cfg).data
    assert seq.positions["score"] == len(seq) - 1
    np.testing.assert_array_equal(out.score_hidden, hidden[-1])
    expected = hidden[-1] @ micro_params["score_head.weight"] + micro_params["score_head.bias"]
    assert out.score == pytest.approx(float(expected), abs=1e-15)


def test_batched_scores_match_single(micro_cfg, micro_params):
    refs = ["a0", "a1", "a2"]
    texts = [[1], [2, 3, 4, 5], []]
    pooled = np.stack([M.temporal_average_pool(M.encode_audio(r, micro_cfg), 2) for r in refs])
    batch = M.score_batch(texts, pooled, micro_params, micro_cfg).data
    single = [M.predict_score(t, r, micro_params, micro_cfg).score for t, r in zip(texts, refs)]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-13)


def test_score_gradient_through_projection(micro_cfg, micro_params):
    pooled = M.temporal_average_pool(M.encode_audio("a3", micro_cfg), 2)
    micro_params.freeze_all()
    micro_params.set_trainable("proj.")
    err = grad_error(lambda t: M.predict_score_tensor([4, 5], pooled, t, micro_cfg), micro_params)
    assert err < 1e-4


def test_features_are_never_differentiated(micro_cfg, micro_params):
    feat = M.encode_audio("a3", micro_cfg)
    before = feat.frames.copy()
    pooled = M.temporal_average_pool(feat, 2)
    forward_backward(lambda t: M.predict_score_tensor([1], pooled, t, micro_cfg), micro_params)
    assert feat.frames.tobytes() == before.tobytes()


# captioning --------------------------------------------------------------------------------------------------------------
def test_generate_max_len_zero(micro_cfg, micro_params):
    assert M.generate_caption("a0", micro_params, micro_cfg, 0) == []


def _readout_model(cfg, seed=2):
    """Zero block weights and positions: the last hidden state is the normalised input row."""
    params = M.init_params(cfg, seed)
    for name in params.names():
        if (".layers." in name and not name.endswith("_norm")) or name == "llm.pos":
            params[name] = np.zeros_like(params[name])
    params["llm.lm_head"] = np.zeros_like(params["llm.lm_head"])
    params["llm.embed"][cfg.audio_end_id] = 1.0
    return params


def test_generate_ties_go_to_smallest_id(micro_cfg):
    params = _readout_model(micro_cfg)
    # tokens 3 and 5 read the same direction, so they tie for every step
    params["llm.lm_head"][:, 3] = 1.0
    params["llm.lm_head"][:, 5] = 1.0
    params["llm.embed"][3] = 1.0
    assert M.generate_caption("a0", params, micro_cfg, 4) == [3, 3, 3, 3]


def test_generate_all_zero_logits_pick_id_zero(micro_cfg):
    params = M.init_params(micro_cfg, 2)
    params["llm.final_norm"] = np.zeros_like(params["llm.final_norm"])
    assert M.generate_caption("a0", params, micro_cfg, 3) == [0, 0, 0]


def test_generate_immediate_eos_gives_empty_caption(micro_cfg):
    params = _readout_model(micro_cfg)
    params["llm.lm_head"][:, micro_cfg.eos_id] = 1.0
    assert M.generate_caption("a0", params, micro_cfg, 5) == []


def test_generate_stops_at_eos(micro_cfg):
    params = _readout_model(micro_cfg)
    params["llm.lm_head"][:, 4] = 1.0
    params["llm.embed"][4] = -1.0
    params["llm.lm_head"][:, micro_cfg.eos_id] = -1.0
    assert M.generate_caption("a0", params, micro_cfg, 5) == [4]


def test_generate_respects_sequence_budget(micro_cfg):
    params = M.init_params(micro_cfg, 2)
    params["llm.final_norm"] = np.zeros_like(params["llm.final_norm"])
    out = M.generate_caption("a0", params, micro_cfg, 100)
    # the last token is emitted from a full-length context and never fed back
    assert len(out) == micro_cfg.max_seq_len - micro_cfg.audio_tokens - 2 + 1
