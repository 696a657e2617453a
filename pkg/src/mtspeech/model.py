"""Convolutional feature encoder, span masking, Transformer context encoder,
Gumbel-softmax quantizer and representation mixing.

All operations work on one utterance at a time: waveforms are 1-D arrays,
frame sequences are (T, D) tensors.  Parameters live in a flat
``{name: Tensor}`` dict so optimizers and checkpoints can treat them
uniformly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BASE_STRIDES = (5, 2, 2, 2, 2, 2, 2)
BASE_KERNELS = (10, 3, 3, 3, 3, 2, 2)


@dataclass(frozen=True)
class EncoderConfig:
    conv_channels: tuple = (64,) * 7
    strides: tuple = BASE_STRIDES
    kernels: tuple = BASE_KERNELS
    blocks: int = 2
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4
    sample_rate: int = 16000

    def __post_init__(self):
        if len(self.strides) != len(self.kernels) or len(self.strides) != len(self.conv_channels):
            raise ValueError("conv_channels, strides and kernels must have equal length")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % self.pos_conv_groups:
            raise ValueError(f"dim {self.dim} not divisible by pos_conv_groups {self.pos_conv_groups}")

    @property
    def latent_dim(self):
        return self.conv_channels[-1]

    @property
    def receptive_field(self):
        rf, hop = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * hop
            hop *= s
        return rf

    @property
    def hop(self):
        return int(np.prod(self.strides))

    def num_frames(self, num_samples):
        """Chained valid-convolution length: floor((L - k) / s) + 1 per block."""
        length = num_samples
        for k, s in zip(self.kernels, self.strides):
            if length < k:
                return 0
            length = (length - k) // s + 1
        return length


@dataclass(frozen=True)
class QuantizerConfig:
    groups: int = 2
    entries: int = 16
    entry_dim: int | None = None
    tau: float = 0.5
    tau_floor: float = 0.5
    tau_decay: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    def temperature(self, step=0):
        """Geometric anneal max(floor, tau * decay**step); constant when decay == 1."""
        if self.tau_decay == 1.0:
            return self.tau
        return max(self.tau_floor, self.tau * self.tau_decay ** step)

    @property
    def num_codewords(self):
        return self.entries ** self.groups


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)


PRESETS = {
    "desk": ModelConfig(),
    "base": ModelConfig(
        EncoderConfig(conv_channels=(512,) * 7, blocks=12, dim=768, heads=8, ffn_dim=3072,
                      pos_conv_kernel=128, pos_conv_groups=16),
        QuantizerConfig(groups=2, entries=320),
    ),
    "large": ModelConfig(
        EncoderConfig(conv_channels=(512,) * 7, blocks=24, dim=1024, heads=16, ffn_dim=4096,
                      pos_conv_kernel=128, pos_conv_groups=16),
        QuantizerConfig(groups=2, entries=320),
    ),
}


@dataclass
class Utterance:
    """Waveform in [-1, 1] plus optional phoneme ids (blank-free) and language tag."""

    samples: np.ndarray
    labels: np.ndarray | None = None
    language: str | None = None
    frame_labels: np.ndarray | None = None
    sample_rate: int = 16000
    uid: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("utterance samples must be a non-empty 1-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if np.any(self.labels == 0):
                raise ValueError("labels must not contain the blank id 0")


@dataclass
class MaskSpec:
    mask_prob: float = 0.05
    span_length: int = 10
    flags: np.ndarray | None = None

    @property
    def indices(self):
        return np.flatnonzero(self.flags)


@dataclass
class QuantizeResult:
    q: Tensor
    indices: np.ndarray  # (T, G) hard selections
    probs: Tensor  # (T, G, V) noise-perturbed Gumbel-softmax probabilities
    avg_probs: Tensor  # (G, V) noiseless softmax averaged over frames
    logits: Tensor  # (T, G, V)
    noise: np.ndarray  # (T, G, V)

    def codeword_ids(self, entries):
        """Composite codeword id with codebook 0 as the most significant digit."""
        ids = np.zeros(self.indices.shape[0], dtype=np.int64)
        for g in range(self.indices.shape[1]):
            ids = ids * entries + self.indices[:, g]
        return ids


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


def _rng_for(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(cfg: ModelConfig, vocab_size: int, seed: int = 0, dtype=np.float32):
    """Initialise all parameters; ``vocab_size`` counts phoneme tokens, the
    CTC head gets one extra output for the blank.

    Each tensor draws from its own stream keyed by (seed, name), so models
    that differ only in which modules they contain share identical values
    for the modules they have in common.
    """
    enc, qc = cfg.encoder, cfg.quantizer
    specs = {}

    c_in = 1
    for i, (c_out, k) in enumerate(zip(enc.conv_channels, enc.kernels)):
        specs[f"fe.conv{i}.w"] = ("normal", (c_out, c_in, k), np.sqrt(2.0 / (c_in * k)))
        specs[f"fe.conv{i}.b"] = ("zeros", (c_out,))
        specs[f"fe.ln{i}.g"] = ("ones", (c_out,))
        specs[f"fe.ln{i}.b"] = ("zeros", (c_out,))
        c_in = c_out

    d, zd = enc.dim, enc.latent_dim
    specs.update(_context_specs(enc))

    de = qc.entry_dim or d // qc.groups
    specs["q.logits.w"] = ("normal", (zd, qc.groups * qc.entries), 1.0 / np.sqrt(zd))
    specs["q.logits.b"] = ("zeros", (qc.groups * qc.entries,))
    specs["q.entries"] = ("normal", (qc.groups, qc.entries, de), 1.0)
    specs["q.proj.w"] = ("normal", (qc.groups * de, d), 1.0 / np.sqrt(qc.groups * de))
    specs["q.proj.b"] = ("zeros", (d,))

    specs.update(head_specs(d, vocab_size))
    return {name: _make(name, spec, seed, dtype) for name, spec in specs.items()}


def _context_specs(enc):
    d, zd = enc.dim, enc.latent_dim
    specs = {
        "ce.mask_emb": ("uniform", (zd,), 1.0),
        "ce.in_ln.g": ("ones", (zd,)),
        "ce.in_ln.b": ("zeros", (zd,)),
        "ce.in_proj.w": ("normal", (zd, d), 1.0 / np.sqrt(zd)),
        "ce.in_proj.b": ("zeros", (d,)),
        "ce.pos_conv.w": ("normal", (d, d // enc.pos_conv_groups, enc.pos_conv_kernel),
                          np.sqrt(4.0 / (enc.pos_conv_kernel * d))),
        "ce.pos_conv.b": ("zeros", (d,)),
        "ce.final_ln.g": ("ones", (d,)),
        "ce.final_ln.b": ("zeros", (d,)),
    }
    for i in range(enc.blocks):
        p = f"ce.block{i}."
        specs[p + "ln1.g"] = ("ones", (d,))
        specs[p + "ln1.b"] = ("zeros", (d,))
        specs[p + "qkv.w"] = ("normal", (d, 3 * d), 1.0 / np.sqrt(d))
        specs[p + "qkv.b"] = ("zeros", (3 * d,))
        specs[p + "out.w"] = ("normal", (d, d), 1.0 / np.sqrt(d))
        specs[p + "out.b"] = ("zeros", (d,))
        specs[p + "ln2.g"] = ("ones", (d,))
        specs[p + "ln2.b"] = ("zeros", (d,))
        specs[p + "ff1.w"] = ("normal", (d, enc.ffn_dim), 1.0 / np.sqrt(d))
        specs[p + "ff1.b"] = ("zeros", (enc.ffn_dim,))
        specs[p + "ff2.w"] = ("normal", (enc.ffn_dim, d), 1.0 / np.sqrt(enc.ffn_dim))
        specs[p + "ff2.b"] = ("zeros", (d,))
    return specs


def head_specs(dim, vocab_size):
    return {
        "head.w": ("normal", (dim, vocab_size + 1), 1.0 / np.sqrt(dim)),
        "head.b": ("zeros", (vocab_size + 1,)),
    }


def _make(name, spec, seed, dtype):
    kind, shape = spec[0], spec[1]
    if kind == "zeros":
        value = np.zeros(shape)
    elif kind == "ones":
        value = np.ones(shape)
    elif kind == "normal":
        value = _rng_for(seed, name).normal(0.0, spec[2], size=shape)
    elif kind == "uniform":
        value = _rng_for(seed, name).uniform(0.0, spec[2], size=shape)
    else:
        raise ValueError(kind)
    return Tensor(value.astype(dtype), requires_grad=True, name=name)


def new_head(params, vocab_size, seed, dtype=None):
    """Replace the CTC head with a freshly initialised one of size vocab_size + 1."""
    dim = params["head.w"].shape[0]
    dtype = dtype or params["head.w"].dtype
    out = {k: v for k, v in params.items() if not k.startswith("head.")}
    for name, spec in head_specs(dim, vocab_size).items():
        out[name] = _make(name + f".ft{vocab_size}", spec, seed, dtype)
        out[name].name = name
    return out


def is_feature_encoder(name):
    return name.startswith("fe.")


# ----------------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------------


def feature_encode(samples, params, cfg: EncoderConfig):
    """Raw waveform (L,) -> latent frames z of shape (T, C).

    Each block is a valid convolution followed by layer normalisation over
    channels and GELU.
    """
    samples = np.asarray(samples)
    if samples.ndim != 1 or samples.size == 0:
        raise ValueError("samples must be a non-empty 1-D array")
    if samples.size < cfg.receptive_field:
        raise ValueError(
            f"waveform of {samples.size} samples is shorter than the encoder receptive field "
            f"({cfg.receptive_field} samples)")
    dtype = params["fe.conv0.w"].dtype
    x = Tensor(samples.astype(dtype)[:, None])
    for i, s in enumerate(cfg.strides):
        x = ad.conv1d(x, params[f"fe.conv{i}.w"], params[f"fe.conv{i}.b"], stride=s)
        x = ad.layer_norm(x, params[f"fe.ln{i}.g"], params[f"fe.ln{i}.b"])
        x = ad.gelu(x)
    return x


def sample_span_mask(num_frames, mask_prob, span_length, rng):
    """Every index starts a span independently with probability ``mask_prob``;
    spans are truncated at the sequence end."""
    starts = np.flatnonzero(rng.random(num_frames) < mask_prob)
    flags = np.zeros(num_frames, dtype=bool)
    for s in starts:
        flags[s:s + span_length] = True
    return flags


def apply_span_mask(z, mask_emb, spec: MaskSpec, rng=None):
    """Replace masked frames by the learned mask embedding.

    Uses ``spec.flags`` when already set (frozen draws), otherwise samples
    new flags from ``rng``.  Returns the masked sequence and a MaskSpec
    carrying the flags.
    """
    T = z.shape[0]
    if spec.flags is None:
        if rng is None:
            raise ValueError("apply_span_mask needs either spec.flags or an rng")
        flags = sample_span_mask(T, spec.mask_prob, spec.span_length, rng)
    else:
        flags = np.asarray(spec.flags, dtype=bool)
        if flags.shape != (T,):
            raise ad.ShapeError("apply_span_mask", f"flags {flags.shape} vs {T} frames")
    out_spec = replace(spec, flags=flags)
    if not flags.any():
        return z, out_spec
    return ad.where(flags[:, None], mask_emb, z), out_spec


def positional_conv(x, params, cfg: EncoderConfig):
    k = cfg.pos_conv_kernel
    pos = ad.conv1d(x, params["ce.pos_conv.w"], params["ce.pos_conv.b"], padding=k // 2,
                    groups=cfg.pos_conv_groups)
    if k % 2 == 0:
        pos = pos[:-1]
    return ad.gelu(pos)


def _attention(h, params, prefix, heads):
    T, d = h.shape
    dh = d // heads
    qkv = ad.linear(h, params[prefix + "qkv.w"], params[prefix + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (T, 3, heads, dh)), (1, 2, 0, 3))  # (3, H, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    o = ad.matmul(att, v)  # (H, T, dh)
    o = ad.reshape(ad.transpose(o, (1, 0, 2)), (T, d))
    return ad.linear(o, params[prefix + "out.w"], params[prefix + "out.b"])


def project_input(z, params):
    h = ad.layer_norm(z, params["ce.in_ln.g"], params["ce.in_ln.b"])
    return ad.linear(h, params["ce.in_proj.w"], params["ce.in_proj.b"])


def context_encode(z, params, cfg: EncoderConfig):
    """(T, C) latents -> (T, dim) contexts.

    The input is layer-normalised and projected to the model dimension.
    With at least one block, a grouped positional convolution is added
    before the pre-norm Transformer blocks and a final layer norm closes
    the stack; a zero-block config returns the projected input as is.
    """
    x = project_input(z, params)
    if cfg.blocks == 0:
        return x
    x = x + positional_conv(x, params, cfg)
    for i in range(cfg.blocks):
        p = f"ce.block{i}."
        h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + _attention(h, params, p, cfg.heads)
        h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = ad.gelu(ad.linear(h, params[p + "ff1.w"], params[p + "ff1.b"]))
        x = x + ad.linear(h, params[p + "ff2.w"], params[p + "ff2.b"])
    return ad.layer_norm(x, params["ce.final_ln.g"], params["ce.final_ln.b"])


def gumbel_noise(rng, shape, dtype=np.float64):
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype)


def quantize(z, params, cfg: QuantizerConfig, rng=None, noise=None, hard=True, tau=None,
             anchor=None):
    """Gumbel-softmax vector quantisation of unmasked latents z (T, C).

    Forward: per codebook the entry with the largest noise-perturbed logit is
    selected (one-hot), entries are concatenated over codebooks and linearly
    projected to the model dimension.  Backward (``hard=True``): gradients
    reach the logits through the soft Gumbel-softmax probabilities via a
    straight-through node.  ``hard=False`` uses the soft probabilities in the
    forward pass too.

    Noise comes from ``noise`` if given, else is drawn from ``rng``, else is
    zero (deterministic argmax, used for evaluation).

    ``anchor`` (a previous QuantizeResult) replaces the straight-through node
    by the plain expression ``hard0 + soft - soft0`` with hard0/soft0 frozen
    from the anchor; its ordinary derivative equals the straight-through
    gradient at the anchor point, which makes it a finite-difference target.
    """
    tau = cfg.tau if tau is None else tau
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    T = z.shape[0]
    G, V = cfg.groups, cfg.entries
    logits = ad.reshape(ad.linear(z, params["q.logits.w"], params["q.logits.b"]), (T, G, V))
    dtype = logits.dtype
    if noise is None:
        noise = gumbel_noise(rng, (T, G, V), dtype) if rng is not None else np.zeros((T, G, V), dtype)
    noise = np.asarray(noise, dtype=dtype)
    if noise.shape != (T, G, V):
        raise ad.ShapeError("quantize", f"noise {noise.shape} vs logits {(T, G, V)}")
    probs = ad.softmax((logits + noise) * (1.0 / tau), axis=-1)
    indices = np.argmax(logits.data + noise, axis=-1)
    onehot = ad.one_hot(indices, V, dtype=dtype).data
    if not hard:
        sel = probs
    elif anchor is None:
        sel = ad.straight_through(onehot, probs)
    else:
        sel = (probs + ad.one_hot(anchor.indices, V, dtype=dtype).data) - anchor.probs.data
    # (G, T, V) @ (G, V, De) -> (G, T, De) -> (T, G*De)
    vecs = ad.matmul(ad.transpose(sel, (1, 0, 2)), params["q.entries"])
    vecs = ad.reshape(ad.transpose(vecs, (1, 0, 2)), (T, -1))
    q = ad.linear(vecs, params["q.proj.w"], params["q.proj.b"])
    avg_probs = ad.mean(ad.softmax(logits, axis=-1), axis=0)
    return QuantizeResult(q=q, indices=indices, probs=probs, avg_probs=avg_probs, logits=logits,
                          noise=noise)


def sample_mix_flags(num_frames, replace_prob, rng):
    if not 0.0 <= replace_prob <= 1.0:
        raise ValueError(f"replace probability must lie in [0, 1], got {replace_prob}")
    if replace_prob == 0.0:
        return np.zeros(num_frames, dtype=bool)
    if replace_prob == 1.0:
        return np.ones(num_frames, dtype=bool)
    return rng.random(num_frames) < replace_prob


def mix_representations(c, q, replace_prob, rng=None, flags=None):
    """Per frame, take q_t with probability ``replace_prob`` else c_t.

    Returns the mixed sequence and the boolean draws.
    """
    if not 0.0 <= replace_prob <= 1.0:
        raise ValueError(f"replace probability must lie in [0, 1], got {replace_prob}")
    if c.shape != q.shape:
        raise ad.ShapeError("mix_representations", f"c {c.shape} vs q {q.shape}")
    T = c.shape[0]
    if flags is None:
        flags = sample_mix_flags(T, replace_prob, rng)
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return c, flags
    return ad.where(flags[:, None], q, c), flags


def ctc_log_probs(c, params):
    return ad.log_softmax(ad.linear(c, params["head.w"], params["head.b"]), axis=-1)
