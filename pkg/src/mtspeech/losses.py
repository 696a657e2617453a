"""Training objectives.

* ``ctc_loss`` -- CTC negative log-likelihood via log-space forward/backward,
  registered as an autodiff primitive; ``ctc_brute_force`` is the
  enumeration oracle.
* ``contrastive_loss`` -- identify the true quantised target among K
  distractors by cosine similarity.
* ``diversity_loss`` -- scaled negative entropy of averaged codebook usage.
* ``self_supervised_loss`` = contrastive + weight * diversity.
* ``multitask_loss`` -- alpha * CTC(mixed) + (1 - alpha) * self-supervised on
  labeled data, self-supervised only on unlabeled data.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor

BLANK = 0


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the given number of frames."""


class DegenerateBatchWarning(UserWarning):
    """No masked frames were available for the contrastive term."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    replace_prob: float = 0.5
    mask_prob: float = 0.05
    mask_span: int = 10
    distractors: int = 100
    kappa: float = 0.1
    diversity_weight: float = 0.1
    allow_empty_targets: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.replace_prob <= 1.0:
            raise ValueError(f"replace_prob must lie in [0, 1], got {self.replace_prob}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.distractors < 1:
            raise ValueError("distractors must be a positive integer")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    def mask_spec(self):
        return M.MaskSpec(mask_prob=self.mask_prob, span_length=self.mask_span)


# ----------------------------------------------------------------------------
# CTC
# ----------------------------------------------------------------------------


@dataclass
class CtcLattice:
    extended: np.ndarray  # (S,) labels with blanks interleaved
    log_alpha: np.ndarray  # (T, S), emissions included
    log_beta: np.ndarray  # (T, S), emissions included
    log_likelihood: float

    @property
    def forward_total(self):
        return float(np.logaddexp.reduce(self.log_alpha[-1, -2:]))

    @property
    def backward_total(self):
        return float(np.logaddexp.reduce(self.log_beta[0, :2]))


def min_frames(target):
    """Shortest input a CTC alignment of ``target`` needs (repeats need a blank)."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _check_target(target, num_frames, num_classes, allow_empty):
    target = np.asarray(target, dtype=np.int64)
    if target.ndim != 1:
        raise ValueError("target must be a 1-D label sequence")
    if target.size == 0 and not allow_empty:
        raise ValueError("empty target sequence (enable allow_empty_targets to admit it)")
    if np.any(target == BLANK):
        raise ValueError("target contains the blank id")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ValueError(f"target ids out of range for {num_classes} classes")
    need = min_frames(target)
    if num_frames < need:
        raise CTCInfeasibleError(
            f"target of length {target.size} needs at least {need} frames, got {num_frames}")
    return target


def ctc_lattice(log_probs, target, allow_empty=False):
    """Log-space forward and backward tables for a (T, C) log-probability matrix."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    target = _check_target(target, T, C, allow_empty)
    S = 2 * target.size + 1
    ext = np.zeros(S, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    ll = float(np.logaddexp.reduce(alpha[-1, -2:])) if S > 1 else float(alpha[-1, 0])
    return CtcLattice(extended=ext, log_alpha=alpha, log_beta=beta, log_likelihood=ll)


def ctc_loss(log_probs, target, allow_empty=False):
    """CTC negative log-likelihood of ``target`` under (T, |V|+1) log-probs.

    Differentiable with respect to ``log_probs`` (a Tensor).  The blank is
    id 0.  Raises CTCInfeasibleError when the target cannot fit.
    """
    if not isinstance(log_probs, Tensor):
        log_probs = Tensor(log_probs)
    lat = ctc_lattice(log_probs.data, target, allow_empty)
    if not np.isfinite(lat.log_likelihood):
        raise ad.NonFiniteError("ctc_loss", "log-likelihood")
    T, C = log_probs.shape
    dtype = log_probs.dtype

    def back(g):
        lp = np.asarray(log_probs.data, dtype=np.float64)
        occ = np.exp(lat.log_alpha + lat.log_beta - lp[:, lat.extended] - lat.log_likelihood)
        post = np.zeros((T, C))
        np.add.at(post.T, lat.extended, occ.T)
        return ((-g * post).astype(dtype),)

    return ad._record("ctc_loss", np.asarray(-lat.log_likelihood, dtype=dtype), (log_probs,), back)


@lru_cache(maxsize=64)
def _enumerate_paths(T, C):
    paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64).reshape(-1, T)
    groups = {}
    for i, p in enumerate(paths):
        out, prev = [], None
        for s in p:
            if s != prev and s != BLANK:
                out.append(int(s))
            prev = s
        groups.setdefault(tuple(out), []).append(i)
    return paths, {k: np.array(v) for k, v in groups.items()}


def ctc_brute_force(log_probs, target, allow_empty=False):
    """Exact CTC loss by enumerating every frame-level path (T <= 8, |V| <= 5)."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, C = lp.shape
    if T > 8 or C - 1 > 5:
        raise ValueError(f"brute-force CTC limited to T <= 8 and |V| <= 5, got T={T}, |V|={C - 1}")
    target = _check_target(target, T, C, allow_empty)
    paths, groups = _enumerate_paths(T, C)
    hits = groups.get(tuple(int(t) for t in target))
    if hits is None:
        raise CTCInfeasibleError("no path collapses to the target")
    scores = lp[np.arange(T), paths[hits]].sum(axis=1)
    return float(-np.logaddexp.reduce(scores))


# ----------------------------------------------------------------------------
# self-supervised terms
# ----------------------------------------------------------------------------


def sample_distractors(num_frames, masked, k, rng):
    """(M, k) distractor time indices for each masked step.

    Uniform without replacement from the other masked steps; falls back to
    all other steps when fewer than k masked ones exist, and to sampling
    with replacement when even those are too few.
    """
    masked = np.asarray(masked, dtype=np.int64)
    if num_frames < 2:
        raise ValueError("need at least two frames to draw distractors")
    out = np.empty((masked.size, k), dtype=np.int64)
    masked_set = masked
    for row, t in enumerate(masked):
        pool = masked_set[masked_set != t]
        if pool.size < k:
            pool = np.delete(np.arange(num_frames), t)
        if pool.size >= k:
            out[row] = rng.choice(pool, size=k, replace=False)
        else:
            out[row] = rng.choice(pool, size=k, replace=True)
    return out


def contrastive_loss(c, result, mask, cfg: LossConfig, rng=None, distractors=None, reduction="mean"):
    """Mean over masked steps t of -log softmax_j(sim(c_t, cand_j) / kappa)[true].

    ``result`` is a QuantizeResult or a (T, D) tensor of quantised targets.
    Distractors are drawn from ``rng`` unless given as an (M, K) array.
    With no masked frames the loss is a constant zero and a
    DegenerateBatchWarning is emitted.
    """
    q = result.q if isinstance(result, M.QuantizeResult) else result
    flags = mask.flags if isinstance(mask, M.MaskSpec) else np.asarray(mask, dtype=bool)
    masked = np.flatnonzero(flags)
    if masked.size == 0:
        warnings.warn("no masked frames; contrastive loss set to zero", DegenerateBatchWarning,
                      stacklevel=2)
        return Tensor(np.zeros((), dtype=c.dtype))
    T = c.shape[0]
    if distractors is None:
        distractors = sample_distractors(T, masked, cfg.distractors, rng)
    distractors = np.asarray(distractors, dtype=np.int64)
    cand = np.concatenate([masked[:, None], distractors], axis=1)  # (M, K+1); positive first
    m, kp1 = cand.shape
    q_cand = ad.reshape(ad.take(q, cand.reshape(-1)), (m, kp1, q.shape[-1]))
    c_m = ad.reshape(ad.take(c, masked), (m, 1, c.shape[-1]))
    sims = ad.cosine_similarity(c_m, q_cand) * (1.0 / cfg.kappa)
    nll = -ad.log_softmax(sims, axis=-1)[:, 0]
    total = ad.sum(nll)
    if reduction == "sum":
        return total
    return total * (1.0 / m)


def diversity_loss(avg_probs, atol=1e-6):
    """(1 / GV) * sum_{g,v} p log p over averaged codebook probabilities (G, V)."""
    p = avg_probs if isinstance(avg_probs, Tensor) else Tensor(avg_probs)
    if p.ndim != 2:
        raise ad.ShapeError("diversity_loss", f"expected (G, V) probabilities, got {p.shape}")
    rows = p.data.sum(axis=-1)
    if not np.allclose(rows, 1.0, atol=atol) or np.any(p.data < 0):
        raise ValueError(f"codebook probability rows must sum to 1, got {rows}")
    G, V = p.shape
    return ad.sum(ad.xlogx(p)) * (1.0 / (G * V))


def self_supervised_loss(c, result, mask, cfg: LossConfig, rng=None, distractors=None):
    lc = contrastive_loss(c, result, mask, cfg, rng=rng, distractors=distractors)
    avg = result.avg_probs if isinstance(result, M.QuantizeResult) else result
    return lc + cfg.diversity_weight * diversity_loss(avg)


# ----------------------------------------------------------------------------
# multitask objective
# ----------------------------------------------------------------------------


@dataclass
class UtteranceDraws:
    """Random choices made for one utterance in one step; any field left
    as None is sampled."""

    mask: np.ndarray | None = None
    noise: np.ndarray | None = None
    distractors: np.ndarray | None = None
    mix: np.ndarray | None = None


@dataclass
class UtteranceTerms:
    ctc: Tensor | None
    contrastive_sum: Tensor
    num_masked: int
    avg_probs: Tensor
    num_frames: int
    quant: M.QuantizeResult
    draws: UtteranceDraws


def utterance_terms(params, mcfg: M.ModelConfig, lcfg: LossConfig, utt, rng=None, draws=None,
                    anchor=None, with_ctc=True, tau=None):
    """Single masked forward pass of one utterance and its loss terms.

    The Transformer sees the span-masked latents, the quantiser the
    unmasked ones.  When ``with_ctc`` is set the CTC head reads the mixed
    sequence (q_t replaces c_t with probability replace_prob).
    """
    draws = draws or UtteranceDraws()
    rng = rng if rng is not None else np.random.default_rng(0)
    r_mask, r_noise, r_dis, r_mix = rng.spawn(4) if hasattr(rng, "spawn") else (rng,) * 4
    enc = mcfg.encoder
    z = M.feature_encode(utt.samples, params, enc)
    spec = lcfg.mask_spec()
    spec.flags = draws.mask
    z_masked, spec = M.apply_span_mask(z, params["ce.mask_emb"], spec, r_mask)
    c = M.context_encode(z_masked, params, enc)
    qres = M.quantize(z, params, mcfg.quantizer, rng=r_noise, noise=draws.noise, tau=tau,
                      anchor=anchor)
    masked = spec.indices
    dis = draws.distractors
    if dis is None and masked.size:
        dis = sample_distractors(z.shape[0], masked, lcfg.distractors, r_dis)
    if masked.size:
        lc_sum = contrastive_loss(c, qres, spec, lcfg, distractors=dis, reduction="sum")
    else:
        lc_sum = Tensor(np.zeros((), dtype=c.dtype))
    ctc = None
    mix = draws.mix
    if with_ctc:
        if utt.labels is None:
            raise ValueError("labeled utterance has no labels")
        c_mix, mix = M.mix_representations(c, qres.q, lcfg.replace_prob, rng=r_mix, flags=mix)
        ctc = ctc_loss(M.ctc_log_probs(c_mix, params), utt.labels, lcfg.allow_empty_targets)
    new_draws = UtteranceDraws(mask=spec.flags, noise=qres.noise, distractors=dis, mix=mix)
    return UtteranceTerms(ctc=ctc, contrastive_sum=lc_sum, num_masked=int(masked.size),
                          avg_probs=qres.avg_probs, num_frames=z.shape[0], quant=qres,
                          draws=new_draws)


def _self_terms(terms, lcfg):
    n_masked = sum(t.num_masked for t in terms)
    if n_masked:
        lc = terms[0].contrastive_sum
        for t in terms[1:]:
            lc = lc + t.contrastive_sum
        lc = lc * (1.0 / n_masked)
    else:
        warnings.warn("no masked frames in batch; contrastive loss set to zero",
                      DegenerateBatchWarning, stacklevel=3)
        lc = Tensor(np.zeros((), dtype=terms[0].avg_probs.dtype))
    frames = sum(t.num_frames for t in terms)
    avg = terms[0].avg_probs * (terms[0].num_frames / frames)
    for t in terms[1:]:
        avg = avg + t.avg_probs * (t.num_frames / frames)
    ld = diversity_loss(avg, atol=1e-4)
    return lc, ld


def multitask_loss(params, mcfg, lcfg, labeled, unlabeled=(), rngs=None, draws=None, anchors=None,
                   tau=None):
    """Batch objective and its per-term breakdown.

    labeled:   alpha * mean CTC(mixed) + (1 - alpha) * (L_c + w * L_d)
    unlabeled: L_c + w * L_d
    L_c is the mean over all masked steps of the batch, L_d uses codebook
    probabilities averaged over every frame of the batch.  ``rngs``,
    ``draws`` and ``anchors`` are per-utterance lists (labeled first).

    Returns (total, breakdown, per-utterance terms).
    """
    labeled, unlabeled = list(labeled), list(unlabeled)
    if not labeled and not unlabeled:
        raise ValueError("empty batch")
    n = len(labeled) + len(unlabeled)
    rngs = rngs or [None] * n
    draws = draws or [None] * n
    anchors = anchors or [None] * n
    terms = []
    for i, utt in enumerate(labeled + unlabeled):
        is_lab = i < len(labeled)
        if is_lab and utt.labels is None:
            raise ValueError(f"labeled utterance {i} has no labels")
        terms.append(utterance_terms(params, mcfg, lcfg, utt, rng=rngs[i], draws=draws[i],
                                     anchor=anchors[i], with_ctc=is_lab, tau=tau))
    lab_terms, unl_terms = terms[:len(labeled)], terms[len(labeled):]
    total = None
    lc_values, ld_values, ctc_value = [], [], None
    if lab_terms:
        ctc = lab_terms[0].ctc
        for t in lab_terms[1:]:
            ctc = ctc + t.ctc
        ctc = ctc * (1.0 / len(lab_terms))
        lc, ld = _self_terms(lab_terms, lcfg)
        total = lcfg.alpha * ctc + (1.0 - lcfg.alpha) * (lc + lcfg.diversity_weight * ld)
        ctc_value = ctc.item()
        lc_values.append((lc.item(), sum(t.num_masked for t in lab_terms)))
        ld_values.append(ld.item())
    if unl_terms:
        lc, ld = _self_terms(unl_terms, lcfg)
        self_loss = lc + lcfg.diversity_weight * ld
        total = self_loss if total is None else total + self_loss
        lc_values.append((lc.item(), sum(t.num_masked for t in unl_terms)))
        ld_values.append(ld.item())
    n_masked = sum(k for _, k in lc_values)
    ids = np.concatenate([t.quant.codeword_ids(mcfg.quantizer.entries) for t in terms])
    breakdown = {
        "loss_total": total.item(),
        "loss_ctc": ctc_value,
        "loss_contrastive": (sum(v * k for v, k in lc_values) / n_masked) if n_masked else 0.0,
        "loss_diversity": float(np.mean(ld_values)),
        "active_codewords": int(np.unique(ids).size),
    }
    return total, breakdown, terms
