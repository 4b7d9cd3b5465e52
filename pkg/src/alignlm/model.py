"""Audio-text scoring network.

Pipeline for one example::

    encode_audio -> temporal_average_pool -> project_audio (SwiGLU MLP)
        -> assemble_sequence -> lm_forward (causal transformer)
        -> linear head on the <|SCORE|> hidden state

The same transformer also carries a language-model head for caption
pretraining and greedy caption decoding.

Parameter names are grouped by prefix: ``proj.`` (audio projection),
``llm.`` (transformer including its embeddings and LM head) and
``score_head.``.
"""

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MissingAudioError,
    PoolError,
    SequenceTooLongError,
    ShapeError,
    VocabError,
)
from .numeric import ParamSet, Tensor, as_tensor, concat, embedding, getitem, rms_norm, silu, softmax
from .rng import stream
from .synthetic import synthetic_frames

GROUPS = {"projection": "proj.", "llm": "llm.", "score_head": "score_head."}


@dataclass(frozen=True)
class ModelConfig:
    enc_dim: int = 16
    enc_rate: int = 50
    clip_seconds: float = 1.0
    audio_tokens: int = 10
    llm_dim: int = 32
    llm_layers: int = 2
    llm_heads: int = 4
    ffn_dim: int = 64
    proj_layers: int = 3
    proj_hidden: int = 0  # 0 means 2 * llm_dim
    vocab_size: int = 260
    audio_start_id: int = 256
    audio_end_id: int = 257
    score_id: int = 258
    eos_id: int = 259
    max_seq_len: int = 128
    norm_eps: float = 1e-6
    encoder_seed: int = 7
    frame_noise: float = 0.1
    positions: str = "learned-absolute"

    def __post_init__(self):
        specials = (self.audio_start_id, self.audio_end_id, self.score_id, self.eos_id)
        if len(set(specials)) != len(specials):
            raise ValueError("special token ids must be distinct")
        if any(not 0 <= s < self.vocab_size for s in specials):
            raise ValueError("special token ids must be < vocab_size")
        if self.llm_dim % self.llm_heads:
            raise ValueError("llm_dim must be divisible by llm_heads")
        if self.audio_tokens < 1:
            raise ValueError("audio_tokens must be >= 1")
        if self.proj_layers < 1:
            raise ValueError("proj_layers must be >= 1")

    @property
    def n_frames(self):
        return int(round(self.clip_seconds * self.enc_rate))

    @property
    def hidden_proj(self):
        return self.proj_hidden or 2 * self.llm_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Widths from the reference system: 768-dim encoder at 50 frames/s over
# 10 s clips, 100 audio tokens, 3-layer projection into an 896-dim LM.  The
# remaining LM geometry follows the public Qwen2.5-0.5B configuration.
PRESETS = {
    "desk": ModelConfig(),
    "full": ModelConfig(
        enc_dim=768, enc_rate=50, clip_seconds=10.0, audio_tokens=100,
        llm_dim=896, llm_layers=24, llm_heads=14, ffn_dim=4864, proj_layers=3,
        vocab_size=151936 + 4, audio_start_id=151936, audio_end_id=151937,
        score_id=151938, eos_id=151939, max_seq_len=32768,
    ),
    # tiny geometry used by gradient checks
    "micro": ModelConfig(
        enc_dim=3, enc_rate=50, clip_seconds=0.08, audio_tokens=2, llm_dim=4,
        llm_layers=1, llm_heads=2, ffn_dim=6, proj_layers=2, proj_hidden=5,
        vocab_size=12, audio_start_id=8, audio_end_id=9, score_id=10, eos_id=11,
        max_seq_len=16,
    ),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}") from None
    return ModelConfig(**{**base.to_dict(), **overrides})


# text ------------------------------------------------------------------------------
def tokenize(text):
    """Byte-level tokens of a UTF-8 string."""
    return list(text.encode("utf-8"))


def detokenize(ids):
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


# audio -----------------------------------------------------------------------------
@dataclass
class AudioFeatureSeq:
    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError(f"features must be 2-D (frames x channels), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ShapeError("features contain non-finite values")

    @property
    def n_frames(self):
        return self.frames.shape[0]


FEATURE_MAGIC = b"ALFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIf")


def write_features(path, frames, frame_rate):
    """Feature file: header (magic, version, T, channels, frame rate) + float32 LE rows."""
    frames = np.asarray(frames, dtype="<f4")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1], frame_rate)
    Path(path).write_bytes(header + frames.tobytes())


def read_features(path):
    blob = Path(path).read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise MissingAudioError(f"{path}: truncated feature file")
    magic, version, n, c, rate = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise MissingAudioError(f"{path}: not a feature file")
    if version != FEATURE_VERSION:
        raise MissingAudioError(f"{path}: unsupported feature file version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size)
    if data.size != n * c:
        raise ShapeError(f"{path}: payload has {data.size} values, header says {n}x{c}")
    return AudioFeatureSeq(data.reshape(n, c).astype(np.float64), float(rate))


def is_file_ref(audio_ref):
    return audio_ref.startswith("file:") or audio_ref.endswith(".feat")


def encode_audio(audio_ref, cfg, seed=None, data_root=None):
    """Frozen encoder stand-in.

    ``file:<path>`` or ``*.feat`` references load a stored feature matrix
    (relative paths resolve against ``data_root``).  Any other non-empty
    string is a synthetic id whose frames come from a seeded projection of
    its planted latent.
    """
    if not audio_ref:
        raise MissingAudioError("empty audio reference")
    if is_file_ref(audio_ref):
        rel = audio_ref[5:] if audio_ref.startswith("file:") else audio_ref
        path = Path(rel)
        if not path.is_absolute() and data_root is not None:
            path = Path(data_root) / path
        if not path.exists():
            raise MissingAudioError(f"feature file not found: {path}")
        feat = read_features(path)
        if feat.frames.shape[1] != cfg.enc_dim:
            raise ShapeError(f"{path}: {feat.frames.shape[1]} channels, model expects {cfg.enc_dim}")
        return feat
    seed = cfg.encoder_seed if seed is None else seed
    frames = synthetic_frames(audio_ref, cfg.n_frames, cfg.enc_dim, seed, cfg.frame_noise)
    return AudioFeatureSeq(frames, float(cfg.enc_rate))


def pool_groups(n_frames, target):
    """Group sizes for pooling ``n_frames`` into ``target`` groups; earlier groups take the remainder."""
    if target < 1 or target > n_frames:
        raise PoolError(f"cannot pool {n_frames} frames into {target} groups")
    base, rem = divmod(n_frames, target)
    return [base + 1] * rem + [base] * (target - rem)


def temporal_average_pool(feat, target):
    frames = feat.frames if isinstance(feat, AudioFeatureSeq) else np.asarray(feat, dtype=np.float64)
    n = frames.shape[0]
    sizes = pool_groups(n, target)
    if n % target == 0:
        return frames.reshape(target, n // target, -1).mean(axis=1)
    bounds = np.cumsum([0] + sizes)
    return np.stack([frames[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])


# parameters --------------------------------------------------------------------------
def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


def init_params(cfg, seed, dtype=np.float64):
    """Fresh projection + transformer parameters (no score head)."""
    rng = stream(seed, "init-params")
    p = ParamSet()
    d, hid = cfg.llm_dim, cfg.hidden_proj
    fan_in = cfg.enc_dim
    for i in range(cfg.proj_layers):
        out = d
        p.add(f"proj.{i}.w_gate", _normal(rng, (fan_in, hid), fan_in ** -0.5).astype(dtype))
        p.add(f"proj.{i}.w_val", _normal(rng, (fan_in, hid), fan_in ** -0.5).astype(dtype))
        p.add(f"proj.{i}.w_out", _normal(rng, (hid, out), hid ** -0.5).astype(dtype))
        fan_in = out
    p.add("llm.embed", _normal(rng, (cfg.vocab_size, d), 1.0).astype(dtype))
    p.add("llm.pos", _normal(rng, (cfg.max_seq_len, d), 0.1).astype(dtype))
    resid = (2 * cfg.llm_layers) ** -0.5
    for layer in range(cfg.llm_layers):
        pre = f"llm.layers.{layer}."
        p.add(pre + "attn_norm", np.ones(d, dtype=dtype))
        for w in ("wq", "wk", "wv"):
            p.add(pre + w, _normal(rng, (d, d), d ** -0.5).astype(dtype))
        p.add(pre + "wo", _normal(rng, (d, d), resid * d ** -0.5).astype(dtype))
        p.add(pre + "ffn_norm", np.ones(d, dtype=dtype))
        p.add(pre + "w_gate", _normal(rng, (d, cfg.ffn_dim), d ** -0.5).astype(dtype))
        p.add(pre + "w_val", _normal(rng, (d, cfg.ffn_dim), d ** -0.5).astype(dtype))
        p.add(pre + "w_out", _normal(rng, (cfg.ffn_dim, d), resid * cfg.ffn_dim ** -0.5).astype(dtype))
    p.add("llm.final_norm", np.ones(d, dtype=dtype))
    p.add("llm.lm_head", _normal(rng, (d, cfg.vocab_size), d ** -0.5).astype(dtype))
    return p


def add_score_head(params, cfg, seed, bias=0.0, std=0.02):
    """Attach ``score_head.weight ~ N(0, std)`` and ``score_head.bias = bias`` if absent."""
    if "score_head.weight" in params:
        return params
    dtype = params["llm.final_norm"].dtype
    rng = stream(seed, "score-head")
    params.add("score_head.weight", _normal(rng, (cfg.llm_dim,), std).astype(dtype))
    params.add("score_head.bias", np.asarray(bias, dtype=dtype))
    return params


def _tensors(params):
    if isinstance(params, ParamSet):
        return {k: Tensor(v, name=k) for k, v in params.items()}
    return params


# projection ---------------------------------------------------------------------------
def swiglu(x, w_gate, w_val, w_out):
    return (silu(x @ w_gate) * (x @ w_val)) @ w_out


def project_audio(pooled, params, n_layers=None):
    """Per-token SwiGLU MLP from encoder channels to the LM width.

    ``pooled`` is ``(tokens, enc_dim)`` or batched ``(B, tokens, enc_dim)``.
    """
    p = _tensors(params)
    if n_layers is None:
        n_layers = sum(1 for k in p if k.startswith("proj.") and k.endswith(".w_gate"))
    x = as_tensor(pooled)
    for i in range(n_layers):
        wg, wv, wo = p[f"proj.{i}.w_gate"], p[f"proj.{i}.w_val"], p[f"proj.{i}.w_out"]
        if x.shape[-1] != wg.shape[0]:
            raise ShapeError(f"proj.{i}: input width {x.shape[-1]} != {wg.shape[0]}")
        x = swiglu(x, wg, wv, wo)
    return x


# sequences ---------------------------------------------------------------------------------
@dataclass
class InputSequence:
    """Token ids before the audio block, the audio embeddings, token ids after it."""

    prefix_ids: list
    audio: object  # (tokens, llm_dim) Tensor or ndarray
    suffix_ids: list
    specials: dict = field(default_factory=dict)

    @property
    def n_audio(self):
        return self.audio.shape[0]

    def __len__(self):
        return len(self.prefix_ids) + self.n_audio + len(self.suffix_ids)

    @property
    def slots(self):
        """Slot list: ints for vocabulary tokens, ``("audio", i)`` for injected embeddings."""
        return list(self.prefix_ids) + [("audio", i) for i in range(self.n_audio)] + list(self.suffix_ids)

    @property
    def positions(self):
        return dict(self.specials)


def assemble_sequence(text_ids, audio_embeds, cfg):
    """Scoring layout: ``text, AUDIO_START, audio..., AUDIO_END, SCORE``."""
    text_ids = [int(t) for t in text_ids]
    m = audio_embeds.shape[0]
    length = len(text_ids) + m + 3
    if length > cfg.max_seq_len:
        raise SequenceTooLongError(f"sequence of {length} slots exceeds max_seq_len={cfg.max_seq_len}")
    n = len(text_ids)
    specials = {"audio_start": n, "audio_end": n + 1 + m, "score": n + 2 + m}
    return InputSequence(text_ids + [cfg.audio_start_id], audio_embeds, [cfg.audio_end_id, cfg.score_id], specials)


def caption_sequence(audio_embeds, caption_ids, cfg):
    """Captioning layout: ``AUDIO_START, audio..., AUDIO_END, caption...``."""
    caption_ids = [int(t) for t in caption_ids]
    m = audio_embeds.shape[0]
    length = m + 2 + len(caption_ids)
    if length > cfg.max_seq_len:
        raise SequenceTooLongError(f"sequence of {length} slots exceeds max_seq_len={cfg.max_seq_len}")
    specials = {"audio_start": 0, "audio_end": m + 1}
    return InputSequence([cfg.audio_start_id], audio_embeds, [cfg.audio_end_id] + caption_ids, specials)


# transformer --------------------------------------------------------------------------
def _check_vocab(ids, cfg):
    for row in ids:
        for t in row:
            if not 0 <= t < cfg.vocab_size:
                raise VocabError(f"token id {t} outside vocabulary of size {cfg.vocab_size}")


def lm_hidden(prefix_ids, audio, suffix_ids, params, cfg):
    """Batched transformer over ``prefix | audio | suffix`` sequences.

    ``prefix_ids`` rows are left-padded and ``suffix_ids`` rows right-padded
    to common lengths, so the audio block sits at the same positions in every
    row.  Left padding is masked out of attention and positions count from
    each row's first real slot, which makes a padded row compute the same
    function as the unpadded sequence.  Right padding needs no mask: under
    causal attention it cannot influence earlier positions.

    ``audio`` is ``(B, tokens, llm_dim)``.  Returns ``(hidden, n_left_pad)``
    with hidden ``(B, L, llm_dim)``.
    """
    p = _tensors(params)
    audio = as_tensor(audio)
    b, m, d = audio.shape
    _check_vocab(prefix_ids, cfg)
    _check_vocab(suffix_ids, cfg)
    lp = max(len(r) for r in prefix_ids)
    ls = max(len(r) for r in suffix_ids)
    length = lp + m + ls
    if length > cfg.max_seq_len:
        raise SequenceTooLongError(f"sequence of {length} slots exceeds max_seq_len={cfg.max_seq_len}")
    n_pad = np.array([lp - len(r) for r in prefix_ids])
    pre = np.zeros((b, lp), dtype=np.int64)
    suf = np.zeros((b, ls), dtype=np.int64)
    for i, (r, s) in enumerate(zip(prefix_ids, suffix_ids)):
        pre[i, n_pad[i]:] = r
        suf[i, :len(s)] = s
    pos = np.maximum(np.arange(length)[None, :] - n_pad[:, None], 0)

    parts = []
    if lp:
        parts.append(embedding(p["llm.embed"], pre))
    parts.append(audio)
    if ls:
        parts.append(embedding(p["llm.embed"], suf))
    x = concat(parts, axis=1) if len(parts) > 1 else parts[0]
    x = x + embedding(p["llm.pos"], pos)

    key_valid = np.arange(length)[None, :] >= n_pad[:, None]
    causal = np.tril(np.ones((length, length), dtype=bool))
    mask = causal[None] & (key_valid[:, None, :] | np.eye(length, dtype=bool)[None])
    mask = mask[:, None, :, :]

    h_count = cfg.llm_heads
    dh = d // h_count
    scale = 1.0 / math.sqrt(dh)
    eps = cfg.norm_eps
    for layer in range(cfg.llm_layers):
        pre_name = f"llm.layers.{layer}."
        h = rms_norm(x, p[pre_name + "attn_norm"], eps)
        q = (h @ p[pre_name + "wq"]).reshape(b, length, h_count, dh).transpose(0, 2, 1, 3)
        k = (h @ p[pre_name + "wk"]).reshape(b, length, h_count, dh).transpose(0, 2, 3, 1)
        v = (h @ p[pre_name + "wv"]).reshape(b, length, h_count, dh).transpose(0, 2, 1, 3)
        att = softmax((q @ k) * scale, axis=-1, mask=mask)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
        x = x + o @ p[pre_name + "wo"]
        h = rms_norm(x, p[pre_name + "ffn_norm"], eps)
        x = x + swiglu(h, p[pre_name + "w_gate"], p[pre_name + "w_val"], p[pre_name + "w_out"])
    return rms_norm(x, p["llm.final_norm"], eps), n_pad


def lm_forward(seq, params, cfg):
    """Hidden states ``(len, llm_dim)`` for a single sequence."""
    audio = as_tensor(seq.audio)
    hidden, _ = lm_hidden([seq.prefix_ids], audio.reshape(1, *audio.shape), [seq.suffix_ids], params, cfg)
    return hidden.reshape(hidden.shape[1], hidden.shape[2])


# scoring ---------------------------------------------------------------------------------
@dataclass
class ScoreOutput:
    score: float
    score_hidden: np.ndarray


def score_head(hidden_last, params):
    p = _tensors(params)
    return hidden_last @ p["score_head.weight"] + p["score_head.bias"]


def score_batch(text_ids, pooled, params, cfg):
    """Scores ``(B,)`` for captions ``text_ids`` against pooled features ``(B, tokens, enc_dim)``."""
    p = _tensors(params)
    audio = project_audio(pooled, p, cfg.proj_layers)
    prefix = [list(t) + [cfg.audio_start_id] for t in text_ids]
    suffix = [[cfg.audio_end_id, cfg.score_id]] * len(prefix)
    hidden, _ = lm_hidden(prefix, audio, suffix, p, cfg)
    last = getitem(hidden, (slice(None), -1, slice(None)))
    return score_head(last, p)


def predict_score(text_ids, audio_ref, params, cfg, data_root=None, features=None):
    """Score one (caption tokens, audio) pair; ``features`` overrides ``encode_audio``."""
    feat = features if features is not None else encode_audio(audio_ref, cfg, data_root=data_root)
    pooled = temporal_average_pool(feat, cfg.audio_tokens)
    p = _tensors(params)
    audio = project_audio(pooled, p, cfg.proj_layers)
    seq = assemble_sequence(text_ids, audio, cfg)
    hidden = lm_forward(seq, p, cfg)
    h_score = getitem(hidden, seq.specials["score"])
    score = score_head(h_score, p)
    return ScoreOutput(float(score.data), np.array(h_score.data))


def predict_score_tensor(text_ids, pooled, params, cfg):
    """Differentiable single-example score (scalar Tensor) from pooled features."""
    p = _tensors(params)
    audio = project_audio(pooled, p, cfg.proj_layers)
    seq = assemble_sequence(text_ids, audio, cfg)
    hidden = lm_forward(seq, p, cfg)
    return score_head(getitem(hidden, seq.specials["score"]), p)


# captioning ----------------------------------------------------------------------------------
def caption_batch(pooled, captions, params, cfg):
    """LM logits and next-token targets for the captioning layout.

    Returns ``(logits, targets, loss_mask)``; the mask covers every caption
    token plus the end-of-sequence token that follows it.
    """
    p = _tensors(params)
    audio = project_audio(pooled, p, cfg.proj_layers)
    m = audio.shape[1]
    prefix = [[cfg.audio_start_id]] * len(captions)
    suffix = [[cfg.audio_end_id] + list(c) for c in captions]
    hidden, _ = lm_hidden(prefix, audio, suffix, p, cfg)
    logits = hidden @ p["llm.lm_head"]
    b, length = logits.shape[0], logits.shape[1]
    targets = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    start = m + 1  # position of AUDIO_END predicts the first caption token
    for i, c in enumerate(captions):
        seq = list(c) + [cfg.eos_id]
        targets[i, start:start + len(seq)] = seq
        mask[i, start:start + len(seq)] = True
    return logits, targets, mask


def generate_caption(audio_ref, params, cfg, max_len, data_root=None, features=None):
    """Greedy decoding after ``AUDIO_START, audio, AUDIO_END``; ties go to the smallest id."""
    if max_len <= 0:
        return []
    feat = features if features is not None else encode_audio(audio_ref, cfg, data_root=data_root)
    p = _tensors(params)
    audio = project_audio(temporal_average_pool(feat, cfg.audio_tokens), p, cfg.proj_layers)
    out = []
    while len(out) < max_len and audio.shape[0] + 2 + len(out) <= cfg.max_seq_len:
        seq = caption_sequence(audio, out, cfg)
        hidden = lm_forward(seq, p, cfg)
        logits = hidden.data[-1] @ p["llm.lm_head"].data
        nxt = int(np.argmax(logits))  # first maximum, i.e. smallest id on ties
        if nxt == cfg.eos_id:
            break
        out.append(nxt)
    return out
