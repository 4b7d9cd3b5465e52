"""A planted audio/text world for desk-scale experiments.

Each synthetic audio id hashes to a latent vector over a small set of sound
concepts (1 to 3 active concepts with intensities in [0.5, 1.5]).  The
matched caption names the active concepts in order of decreasing intensity,
e.g. ``"siren and dog"``.  The text side of a caption maps back to a latent
by looking up the concept words it contains, weighting the first-mentioned
concept highest.

Audio latents depend only on the id string, so the stub encoder, the
caption generator and the planted teacher all agree on them.
"""

import re

import numpy as np

from .rng import stream, string_key

CONCEPTS = ("dog", "rain", "siren", "bird", "engine", "music", "knock", "wind")
LATENT_DIM = len(CONCEPTS)
# weight of the i-th mentioned concept on the text side
MENTION_WEIGHTS = (1.0, 0.8, 0.6)
_WORD = re.compile(r"[a-z]+")


def audio_latent(audio_ref):
    """Concept-intensity vector of a synthetic audio id."""
    rng = stream(string_key(audio_ref), "audio-latent")
    n_active = 1 + int(rng.integers(0, 3))
    active = rng.choice(LATENT_DIM, size=n_active, replace=False)
    u = np.zeros(LATENT_DIM)
    u[active] = rng.uniform(0.5, 1.5, size=n_active)
    return u


def caption_for_latent(u):
    """Matched caption: active concepts, strongest first, joined by ' and '."""
    active = [int(i) for i in np.argsort(-u, kind="stable") if u[i] > 0]
    return " and ".join(CONCEPTS[i] for i in active)


def text_latent(caption):
    """Concept vector of a caption; repeated or unknown words are ignored."""
    v = np.zeros(LATENT_DIM)
    rank = 0
    for word in _WORD.findall(caption.lower()):
        if word in CONCEPTS:
            k = CONCEPTS.index(word)
            if v[k] == 0 and rank < len(MENTION_WEIGHTS):
                v[k] = MENTION_WEIGHTS[rank]
                rank += 1
    return v


def encoder_projection(seed, enc_dim):
    """Fixed latent-to-channel projection of the stub encoder."""
    return stream(seed, "encoder-projection").standard_normal((LATENT_DIM, enc_dim))


GENERATED_PREFIX = "gen-"
GENERATED_SHIFT = 0.6
GENERATED_NOISE = 0.2


def is_generated(audio_ref):
    """Ids starting with ``gen-`` stand for generated (text-to-audio) clips."""
    return audio_ref.startswith(GENERATED_PREFIX)


def synthetic_frames(audio_ref, n_frames, enc_dim, seed, noise=0.1):
    """Frames ``(u * envelope_t) @ P + noise`` for a synthetic id.

    Each concept gets a slow sinusoidal envelope (random frequency/phase per
    id), so frames vary over time while their mean tracks the latent.
    Generated clips see the same latent through a perturbed projection
    ``P + GENERATED_SHIFT * D`` with extra noise, i.e. a shifted acoustic
    domain.
    """
    u = audio_latent(audio_ref)
    proj = encoder_projection(seed, enc_dim)
    if is_generated(audio_ref):
        proj = proj + GENERATED_SHIFT * stream(seed, "generated-projection").standard_normal(proj.shape)
        noise = max(noise, GENERATED_NOISE)
    rng = stream(seed, "encoder-frames", string_key(audio_ref))
    freq = rng.uniform(0.5, 3.0, size=LATENT_DIM)
    phase = rng.uniform(0.0, 2 * np.pi, size=LATENT_DIM)
    t = np.arange(n_frames)[:, None] / max(n_frames, 1)
    env = 1.0 + 0.3 * np.sin(2 * np.pi * freq[None, :] * t + phase[None, :])
    frames = (u[None, :] * env) @ proj
    return frames + noise * rng.standard_normal((n_frames, enc_dim))
