"""Decoding, error rates and codebook diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

BLANK = 0


def greedy_decode(log_probs, blank=BLANK):
    """Best-path CTC decoding: per-frame argmax, merge runs, drop blanks."""
    best = np.argmax(np.asarray(log_probs), axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def edit_distance(hyp, ref):
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    hyp, ref = list(hyp), list(ref)
    prev = np.arange(len(ref) + 1)
    for i, h in enumerate(hyp, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return int(prev[-1])


def per_rate(hyps, refs):
    """Total edit distance over total reference length."""
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    total = sum(len(r) for r in refs)
    if not refs or total == 0:
        raise ValueError("per_rate needs a non-empty reference set")
    return sum(edit_distance(h, r) for h, r in zip(hyps, refs)) / total


@dataclass
class Cooccurrence:
    """Counts of (composite codeword, phoneme) pairs.

    Only codewords that were selected at least once get a row; ``codewords``
    holds their ids in ascending order.
    """

    codewords: np.ndarray  # (Q,)
    counts: np.ndarray  # (Q, P)
    num_codewords: int
    phonemes: int

    @classmethod
    def from_pairs(cls, codeword_ids, phoneme_ids, num_codewords, phonemes=None):
        codeword_ids = np.asarray(codeword_ids, dtype=np.int64)
        phoneme_ids = np.asarray(phoneme_ids, dtype=np.int64)
        if codeword_ids.shape != phoneme_ids.shape:
            raise ValueError(f"{codeword_ids.size} codeword ids vs {phoneme_ids.size} phoneme labels")
        if codeword_ids.size and (codeword_ids.min() < 0 or codeword_ids.max() >= num_codewords):
            raise ValueError("codeword id out of range")
        P = int(phonemes if phonemes is not None else (phoneme_ids.max() + 1 if phoneme_ids.size else 0))
        used, inverse = np.unique(codeword_ids, return_inverse=True)
        counts = np.zeros((used.size, P), dtype=np.int64)
        np.add.at(counts, (inverse.ravel(), phoneme_ids), 1)
        return cls(used, counts, num_codewords, P)

    @property
    def usage(self):
        return self.counts.sum(axis=1)

    @property
    def conditional(self):
        """p(phoneme | codeword) for every used codeword."""
        return self.counts / self.usage[:, None]

    def merge(self, other):
        if (self.num_codewords, self.phonemes) != (other.num_codewords, other.phonemes):
            raise ValueError("cannot merge co-occurrence tables of different shapes")
        ids = np.concatenate([np.repeat(self.codewords, self.phonemes),
                              np.repeat(other.codewords, other.phonemes)])
        ph = np.concatenate([np.tile(np.arange(self.phonemes), self.codewords.size),
                             np.tile(np.arange(other.phonemes), other.codewords.size)])
        w = np.concatenate([self.counts.ravel(), other.counts.ravel()])
        return Cooccurrence.from_pairs(np.repeat(ids, w), np.repeat(ph, w), self.num_codewords,
                                       self.phonemes)


def codebook_cooccurrence(params, mcfg, corpus, phonemes=None):
    """Pair the noise-free hard codeword of every frame with its frame label."""
    from . import model as M
    from .autodiff import Tensor

    fixed = {k: Tensor(v.data) for k, v in params.items()}
    ids, labels = [], []
    for utt in corpus:
        if utt.frame_labels is None:
            raise ValueError(f"utterance {utt.uid} has no frame labels")
        z = M.feature_encode(utt.samples, fixed, mcfg.encoder)
        if z.shape[0] != len(utt.frame_labels):
            raise ValueError(f"utterance {utt.uid}: {z.shape[0]} frames but "
                             f"{len(utt.frame_labels)} frame labels")
        res = M.quantize(z, fixed, mcfg.quantizer)
        ids.append(res.codeword_ids(mcfg.quantizer.entries))
        labels.append(np.asarray(utt.frame_labels))
    ids = np.concatenate(ids) if ids else np.zeros(0, np.int64)
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return Cooccurrence.from_pairs(ids, labels, mcfg.quantizer.num_codewords, phonemes)


def active_codewords(cooc: Cooccurrence):
    return int(np.count_nonzero(cooc.usage))


def alignment_entropy(cooc: Cooccurrence):
    """Mean over active codewords of H(phoneme | codeword), natural log."""
    active = cooc.usage > 0
    if not active.any():
        raise ValueError("no active codewords")
    p = cooc.conditional[active]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(np.mean(-plogp.sum(axis=1)))


def write_cooccurrence_csv(path, cooc: Cooccurrence):
    cond = cooc.conditional
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["codeword_id", "phoneme_id", "count", "conditional_prob"])
        for row, q in enumerate(cooc.codewords):
            for ph in np.flatnonzero(cooc.counts[row]):
                w.writerow([int(q), int(ph), int(cooc.counts[row, ph]), repr(float(cond[row, ph]))])


def summary(cooc: Cooccurrence, per=None):
    return {"active_codewords": active_codewords(cooc),
            "alignment_entropy": alignment_entropy(cooc),
            "per": per}


def write_summary(path, record):
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
