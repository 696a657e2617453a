"""Optimisation machinery and the pretrain / fine-tune drivers.

Randomness is stateless per step: every draw made at optimizer step ``s``
comes from generators seeded with ``(seed, s, ...)``, so a run resumed from
a checkpoint continues exactly like an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .analysis import greedy_decode, per_rate
from .autodiff import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "mtspeech-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Loss or gradient became non-finite; a checkpoint was written first."""


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: OptimizerState, lr):
    """One bias-corrected Adam update in place.  ``grads`` maps names to arrays;
    names absent from ``grads`` are left untouched (frozen)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ad.ShapeError("adam_step", f"gradient for {name} has shape {g.shape}, "
                                             f"parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
    return grads, total


# ----------------------------------------------------------------------------
# learning-rate schedules
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    kind: str  # warmup | constant | linear-decay
    length: int
    start: float
    end: float


@dataclass(frozen=True)
class Schedule:
    phases: tuple

    def __post_init__(self):
        prev = 0.0
        for ph in self.phases:
            if ph.kind not in ("warmup", "constant", "linear-decay"):
                raise ValueError(f"unknown phase kind {ph.kind!r}")
            if ph.length < 0 or ph.start < 0 or ph.end < 0:
                raise ValueError("phase lengths and learning rates must be non-negative")
            if not np.isclose(ph.start, prev):
                raise ValueError(f"discontinuous schedule at {ph.kind} phase ({prev} -> {ph.start})")
            prev = ph.end

    @property
    def total_steps(self):
        return sum(ph.length for ph in self.phases)


def warmup_decay(peak, total, warmup_frac=0.1):
    """Linear warm-up over the first ``warmup_frac`` of updates, then linear decay to 0."""
    w = int(round(total * warmup_frac))
    return Schedule((Phase("warmup", w, 0.0, peak), Phase("linear-decay", total - w, peak, 0.0)))


def tri_stage(peak, warmup, hold, decay):
    return Schedule((Phase("warmup", warmup, 0.0, peak), Phase("constant", hold, peak, peak),
                     Phase("linear-decay", decay, peak, 0.0)))


def base_pretrain_schedule(large=False):
    return warmup_decay(1e-3 if large else 5e-4, 250_000, 0.1)


def base_finetune_schedule():
    return tri_stage(2e-5, 2000, 8000, 10_000)


def lr_at(schedule: Schedule, step):
    """Piecewise-linear learning rate after ``step`` updates; 0 past the end."""
    if step < 0:
        raise ValueError("step must be non-negative")
    offset = 0
    for ph in schedule.phases:
        if step <= offset + ph.length and ph.length > 0:
            frac = (step - offset) / ph.length
            return ph.start + (ph.end - ph.start) * frac
        offset += ph.length
    return 0.0


# ----------------------------------------------------------------------------
# language sampling
# ----------------------------------------------------------------------------


@dataclass
class CorpusWeights:
    hours: dict
    exponent: float = 0.5
    languages: list = field(init=False)
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        kept = {}
        for lang, h in self.hours.items():
            if h <= 0:
                warnings.warn(f"language {lang!r} has no data and is excluded", stacklevel=2)
            else:
                kept[lang] = float(h)
        if not kept:
            raise ValueError("need at least one language with positive hours")
        total = sum(kept.values())
        w = np.array([(h / total) ** self.exponent for h in kept.values()])
        self.languages = list(kept)
        self.probs = w / w.sum()

    def as_dict(self):
        return dict(zip(self.languages, self.probs.tolist()))


def language_sampler(weights: CorpusWeights, rng, size=None):
    """Draw language id(s) from the multinomial (n_l / N) ** exponent."""
    idx = rng.choice(len(weights.languages), p=weights.probs, size=size)
    if size is None:
        return weights.languages[int(idx)]
    return [weights.languages[int(i)] for i in idx]


# ----------------------------------------------------------------------------
# configuration, checkpoints, metrics
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 8
    peak_lr: float = 2e-3
    warmup_frac: float = 0.1
    hold_frac: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 0.0
    seed: int = 0
    max_samples: int = 32000
    dtype: str = "float32"
    language_exponent: float = 0.5
    mask_during_finetune: bool = False
    checkpoint_every: int = 0

    def schedule(self):
        w = int(round(self.steps * self.warmup_frac))
        h = int(round(self.steps * self.hold_frac))
        return tri_stage(self.peak_lr, w, h, self.steps - w - h)


DESK_FINETUNE = TrainConfig(steps=300, batch_size=8, peak_lr=1e-3, warmup_frac=0.1, hold_frac=0.4)


def config_to_dict(mcfg: M.ModelConfig, lcfg: L.LossConfig, tcfg: TrainConfig, **extra):
    d = {"model": asdict(mcfg), "loss": asdict(lcfg), "train": asdict(tcfg)}
    d.update(extra)
    return json.loads(json.dumps(d))


def config_from_dict(d):
    enc = d["model"]["encoder"]
    enc = M.EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()})
    mcfg = M.ModelConfig(enc, M.QuantizerConfig(**d["model"]["quantizer"]))
    return mcfg, L.LossConfig(**d["loss"]), TrainConfig(**d["train"])


def config_digest(cfg: dict):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    params: dict
    config: dict
    step: int = 0
    optimizer: OptimizerState | None = None
    vocab_size: int | None = None


def save_checkpoint(path, ckpt: Checkpoint):
    """Text header followed by the raw little-endian payload of every tensor."""
    arrays = [("param/" + k, v.data) for k, v in ckpt.params.items()]
    opt = ckpt.optimizer
    if opt is not None:
        arrays += [("adam_m/" + k, v) for k, v in opt.m.items()]
        arrays += [("adam_v/" + k, v) for k, v in opt.v.items()]
    header = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
              f"config_digest {config_digest(ckpt.config)}",
              f"config {json.dumps(ckpt.config, sort_keys=True)}",
              f"step {ckpt.step}",
              f"vocab_size {ckpt.vocab_size if ckpt.vocab_size is not None else -1}"]
    if opt is not None:
        header.append(f"adam {opt.beta1!r} {opt.beta2!r} {opt.eps!r} {opt.step}")
    for name, a in arrays:
        dt = np.dtype(a.dtype).newbyteorder("<").str
        header.append(f"tensor {name} {dt} {','.join(str(s) for s in a.shape) or '-'}")
    header.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype=np.dtype(a.dtype).newbyteorder("<")).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if cut < 0 or not blob.startswith(CHECKPOINT_MAGIC.encode()):
        raise ValueError(f"{path}: not a checkpoint file")
    lines = blob[:cut].decode("utf-8").split("\n")
    payload = memoryview(blob)[cut + len(marker):]
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta, tensors = {}, []
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "tensor":
            name, dt, shape = rest.split(" ")
            shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            tensors.append((name, np.dtype(dt), shape))
        else:
            meta[key] = rest
    config = json.loads(meta["config"])
    if config_digest(config) != meta["config_digest"]:
        raise ValueError(f"{path}: config digest mismatch")
    offset, params, m, v = 0, {}, {}, {}
    for name, dt, shape in tensors:
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(payload[offset:offset + n], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        offset += n
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = Tensor(arr.copy(), requires_grad=True, name=key)
        elif kind == "adam_m":
            m[key] = arr.copy()
        elif kind == "adam_v":
            v[key] = arr.copy()
    opt = None
    if "adam" in meta:
        b1, b2, eps, st = meta["adam"].split()
        opt = OptimizerState(float(b1), float(b2), float(eps), int(st), m, v)
    vs = int(meta.get("vocab_size", -1))
    return Checkpoint(params=params, config=config, step=int(meta["step"]), optimizer=opt,
                      vocab_size=None if vs < 0 else vs)


def param_digest(params, names=None):
    h = hashlib.sha256()
    for k in sorted(names if names is not None else params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


class MetricsWriter:
    """Line-delimited JSON: a header record with the run config, then one record per step."""

    FIELDS = ("step", "lr", "loss_total", "loss_ctc", "loss_contrastive", "loss_diversity",
              "active_codewords")

    def __init__(self, path=None, config=None, append=False):
        self.records = []
        self.path = Path(path) if path else None
        if self.path and not append:
            with open(self.path, "w") as f:
                f.write(json.dumps({"config": config, "config_digest": config_digest(config or {})},
                                   sort_keys=True) + "\n")

    def write(self, record):
        rec = {k: record.get(k) for k in self.FIELDS}
        rec.update({k: v for k, v in record.items() if k not in rec})
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec) + "\n")


def read_metrics(path):
    lines = Path(path).read_text().splitlines()
    return json.loads(lines[0]), [json.loads(ln) for ln in lines[1:]]


# ----------------------------------------------------------------------------
# drivers
# ----------------------------------------------------------------------------


def _step_rng(seed, step, *keys):
    return np.random.default_rng([seed, step, *keys])


def _crop(utt, max_samples, rng):
    if utt.labels is not None or not max_samples or utt.samples.size <= max_samples:
        return utt
    start = int(rng.integers(0, utt.samples.size - max_samples + 1))
    return M.Utterance(utt.samples[start:start + max_samples], language=utt.language,
                       sample_rate=utt.sample_rate, uid=utt.uid)


class BatchSampler:
    """Seeded per-step batch selection, language-balanced when a corpus mixes languages."""

    def __init__(self, corpus, batch_size, exponent=0.5, hours=None):
        self.corpus = list(corpus)
        self.batch_size = batch_size
        by_lang = {}
        for i, u in enumerate(self.corpus):
            by_lang.setdefault(u.language, []).append(i)
        self.by_lang = {k: np.array(v) for k, v in by_lang.items()}
        if hours is None:
            hours = {k: float(sum(self.corpus[i].samples.size for i in v)) for k, v in by_lang.items()}
        self.weights = CorpusWeights(hours, exponent) if len(by_lang) > 1 else None

    def batch(self, rng):
        if not self.corpus:
            return []
        if self.weights is None:
            n = len(self.corpus)
            idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
        else:
            langs = language_sampler(self.weights, rng, size=self.batch_size)
            idx = [int(rng.choice(self.by_lang[lg])) for lg in langs]
        return [self.corpus[int(i)] for i in idx]


def _cast(params, dtype):
    for p in params.values():
        if p.data.dtype != dtype:
            p.data = p.data.astype(dtype)
    return params


def pretrain(mcfg, lcfg, tcfg, labeled, unlabeled=(), vocab_size=None, out_dir=None, resume=None,
             on_step=None):
    """Multitask pretraining over labeled corpus L and unlabeled corpus M.

    Each step draws one labeled batch and (when M is non-empty) one
    unlabeled batch and takes a single Adam step on their summed objective.
    Returns the final Checkpoint; metrics are kept on ``checkpoint.metrics``
    and, with ``out_dir``, written to ``metrics.jsonl`` / ``checkpoint.bin``.
    """
    if not labeled:
        raise ValueError("labeled corpus L must not be empty")
    if vocab_size is None:
        vocab_size = int(max(max(u.labels) for u in labeled))
    config = config_to_dict(mcfg, lcfg, tcfg, vocab_size=vocab_size, stage="pretrain")
    dtype = np.dtype(tcfg.dtype)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        params, opt, start = _cast(ckpt.params, dtype), ckpt.optimizer, ckpt.step
    else:
        params = M.init_params(mcfg, vocab_size, seed=tcfg.seed, dtype=dtype)
        opt, start = OptimizerState(tcfg.beta1, tcfg.beta2, tcfg.eps), 0
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl" if out else None, config, append=resume is not None)
    lab_sampler = BatchSampler(labeled, tcfg.batch_size, tcfg.language_exponent)
    unl_sampler = BatchSampler(unlabeled, tcfg.batch_size, tcfg.language_exponent)
    schedule = tcfg.schedule()
    names = list(params)
    for step in range(start + 1, tcfg.steps + 1):
        lab = lab_sampler.batch(_step_rng(tcfg.seed, step, 0))
        crop_rng = _step_rng(tcfg.seed, step, 2)
        unl = [_crop(u, tcfg.max_samples, crop_rng) for u in unl_sampler.batch(_step_rng(tcfg.seed, step, 1))]
        rngs = [_step_rng(tcfg.seed, step, 3, j) for j in range(len(lab) + len(unl))]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", L.DegenerateBatchWarning)
                total, bd, _ = L.multitask_loss(params, mcfg, lcfg, lab, unl, rngs=rngs,
                                                tau=mcfg.quantizer.temperature(step - 1))
            if not np.isfinite(total.item()):
                raise DivergenceError(f"non-finite loss at step {step}")
            grads = dict(zip(names, ad.grad(total, [params[n] for n in names])))
            grads, _ = clip_grad_norm(grads, tcfg.grad_clip)
            lr = lr_at(schedule, step)
            adam_step(params, grads, opt, lr)
        except (DivergenceError, ad.NonFiniteError) as exc:
            if out:
                save_checkpoint(out / "checkpoint.diverged.bin",
                                Checkpoint(params, config, step - 1, opt, vocab_size))
            raise DivergenceError(f"step {step}: {exc}") from exc
        record = {"step": step, "lr": lr, **bd}
        writer.write(record)
        if on_step:
            on_step(record)
        if out and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint.step{step}.bin",
                            Checkpoint(params, config, step, opt, vocab_size))
    ckpt = Checkpoint(params, config, max(start, tcfg.steps), opt, vocab_size)
    if out:
        save_checkpoint(out / "checkpoint.bin", ckpt)
    ckpt.metrics = writer.records
    return ckpt


def ctc_train(mcfg, lcfg, tcfg, labeled, vocab_size):
    """Plain supervised CTC training of the same network (no quantizer).

    Draws the same batches and span masks as ``pretrain`` for a given seed,
    so with alpha=1 and replace_prob=0 both produce the same loss curve.
    """
    dtype = np.dtype(tcfg.dtype)
    full = M.init_params(mcfg, vocab_size, seed=tcfg.seed, dtype=dtype)
    params = {k: v for k, v in full.items() if not k.startswith("q.")}
    opt = OptimizerState(tcfg.beta1, tcfg.beta2, tcfg.eps)
    sampler = BatchSampler(labeled, tcfg.batch_size, tcfg.language_exponent)
    schedule = tcfg.schedule()
    names = list(params)
    losses = []
    for step in range(1, tcfg.steps + 1):
        lab = sampler.batch(_step_rng(tcfg.seed, step, 0))
        total = None
        for j, utt in enumerate(lab):
            r_mask = _step_rng(tcfg.seed, step, 3, j).spawn(4)[0]
            z = M.feature_encode(utt.samples, params, mcfg.encoder)
            zm, _ = M.apply_span_mask(z, params["ce.mask_emb"], lcfg.mask_spec(), r_mask)
            c = M.context_encode(zm, params, mcfg.encoder)
            loss = L.ctc_loss(M.ctc_log_probs(c, params), utt.labels, lcfg.allow_empty_targets)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(lab))
        grads = dict(zip(names, ad.grad(total, [params[n] for n in names])))
        grads, _ = clip_grad_norm(grads, tcfg.grad_clip)
        adam_step(params, grads, opt, lr_at(schedule, step))
        losses.append(total.item())
    return params, losses


def _frozen(params, names):
    return {k: (Tensor(v.data, name=k) if k in names else v) for k, v in params.items()}


def finetune(checkpoint, mcfg, lcfg, tcfg, labeled, vocab_size, out_dir=None, on_step=None):
    """Replace the CTC head by a fresh one over ``vocab_size`` tokens and train
    the Transformer part with CTC; the feature encoder stays frozen and the
    quantiser is not used."""
    if not labeled:
        raise ValueError("fine-tuning corpus must not be empty")
    for u in labeled:
        if u.labels is None:
            raise ValueError(f"fine-tuning utterance {u.uid} has no labels")
        if u.labels.max() > vocab_size:
            raise ValueError(f"utterance {u.uid} uses token id {u.labels.max()} outside the "
                             f"target vocabulary of {vocab_size} tokens")
    dtype = np.dtype(tcfg.dtype)
    base = checkpoint.params if isinstance(checkpoint, Checkpoint) else checkpoint
    params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in base.items()}
    params = M.new_head(params, vocab_size, seed=tcfg.seed)
    frozen = {k for k in params if M.is_feature_encoder(k)}
    trainable = [k for k in params if k.startswith(("ce.", "head."))]
    fixed = _frozen(params, frozen)
    cache = {}
    for i, u in enumerate(labeled):
        cache[i] = M.feature_encode(u.samples, fixed, mcfg.encoder).data
    config = config_to_dict(mcfg, lcfg, tcfg, vocab_size=vocab_size, stage="finetune")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl" if out else None, config)
    opt = OptimizerState(tcfg.beta1, tcfg.beta2, tcfg.eps)
    schedule = tcfg.schedule()
    n = len(labeled)
    for step in range(1, tcfg.steps + 1):
        rng = _step_rng(tcfg.seed, step, 0)
        idx = rng.choice(n, size=min(tcfg.batch_size, n), replace=False)
        total = None
        for j, i in enumerate(idx):
            z = Tensor(cache[int(i)])
            if tcfg.mask_during_finetune:
                z, _ = M.apply_span_mask(z, params["ce.mask_emb"], lcfg.mask_spec(),
                                         _step_rng(tcfg.seed, step, 3, j))
            c = M.context_encode(z, params, mcfg.encoder)
            loss = L.ctc_loss(M.ctc_log_probs(c, params), labeled[int(i)].labels)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(idx))
        grads = dict(zip(trainable, ad.grad(total, [params[k] for k in trainable])))
        grads, _ = clip_grad_norm(grads, tcfg.grad_clip)
        lr = lr_at(schedule, step)
        adam_step(params, grads, opt, lr)
        record = {"step": step, "lr": lr, "loss_total": total.item(), "loss_ctc": total.item(),
                  "loss_contrastive": None, "loss_diversity": None, "active_codewords": None}
        writer.write(record)
        if on_step:
            on_step(record)
    ckpt = Checkpoint(params, config, tcfg.steps, opt, vocab_size)
    if out:
        save_checkpoint(out / "checkpoint.bin", ckpt)
    ckpt.metrics = writer.records
    return ckpt


def from_scratch(mcfg, lcfg, tcfg, labeled, vocab_size, out_dir=None):
    """Baseline with the fine-tuning protocol applied to a randomly initialised model."""
    params = M.init_params(mcfg, vocab_size, seed=tcfg.seed, dtype=np.dtype(tcfg.dtype))
    return finetune(params, mcfg, lcfg, tcfg, labeled, vocab_size, out_dir=out_dir)


def transcribe(params, mcfg, utt):
    fixed = {k: Tensor(v.data) for k, v in params.items()}
    z = M.feature_encode(utt.samples, fixed, mcfg.encoder)
    c = M.context_encode(z, fixed, mcfg.encoder)
    return greedy_decode(M.ctc_log_probs(c, fixed).data)


def evaluate(params, mcfg, corpus):
    """Phone error rate of greedy CTC decoding over a labeled corpus."""
    hyps = [transcribe(params, mcfg, u) for u in corpus]
    refs = [list(u.labels) for u in corpus]
    return per_rate(hyps, refs)
