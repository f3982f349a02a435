"""Greedy and beam-search caption generation.

Decoders only need a *scorer*: an object with ``vocab_size``, ``max_len``,
``encode(images) -> memory`` and ``step_logprobs(memory, prefixes) -> (R, V)``
log-probabilities, where row ``r`` of ``prefixes`` is decoded against row ``r`` of
``memory``. :class:`kreplay.model.Model` is one; tests plug in table-driven mocks.

Both decoders process a list of images together so that every step is a single
scorer call. ``max_len`` counts BOS and EOS; a hypothesis that reaches
``max_len - 1`` tokens can only be extended with EOS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .text import BOS, EOS, PAD

BANNED = (PAD, BOS)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    complete: bool = True

    @property
    def generated(self) -> int:
        return len(self.tokens) - 1


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    max_len: int = 16
    length_normalization: float = 0.0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.length_normalization < 0:
            raise ValueError("length_normalization must be >= 0")


@dataclass(frozen=True)
class BeamResult:
    best: Hypothesis
    beam: tuple[Hypothesis, ...]


def _take(memory, rows):
    if isinstance(memory, torch.Tensor):
        return memory[torch.as_tensor(rows, dtype=torch.long)]
    return np.asarray(memory)[np.asarray(rows)]


def _masked(logp: np.ndarray, at_limit: bool, banned) -> np.ndarray:
    out = logp.copy()
    if at_limit:
        keep = out[..., EOS].copy()
        out[...] = -np.inf
        out[..., EOS] = keep
    else:
        out[..., list(banned)] = -np.inf
    return out


def greedy_decode_batch(scorer, images, max_len: int | None = None, banned=BANNED) -> list[Hypothesis]:
    max_len = scorer.max_len if max_len is None else max_len
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    memory = scorer.encode(images)
    n = len(memory)
    tokens = [[BOS] for _ in range(n)]
    logprob = [0.0] * n
    live = list(range(n))
    while live:
        prefixes = np.array([tokens[i] for i in live])
        at_limit = prefixes.shape[1] >= max_len - 1
        logp = scorer.step_logprobs(_take(memory, live), prefixes)
        choice = np.argmax(_masked(logp, at_limit, banned), axis=1)
        still = []
        for row, i in enumerate(live):
            tok = int(choice[row])
            tokens[i].append(tok)
            logprob[i] += float(logp[row, tok])
            if tok != EOS:
                still.append(i)
        live = still
    return [Hypothesis(tuple(t), lp) for t, lp in zip(tokens, logprob)]


def greedy_decode(scorer, image, max_len: int | None = None) -> Hypothesis:
    return greedy_decode_batch(scorer, [image], max_len)[0]


def _score(logprob, generated, alpha):
    return logprob if alpha == 0 else logprob / generated**alpha


def _rank_key(score, logprob, tokens):
    return (-score, -logprob, tokens)


def beam_decode_batch(scorer, images, config: BeamConfig, banned=BANNED) -> list[BeamResult]:
    b, alpha, max_len = config.width, config.length_normalization, config.max_len
    memory = scorer.encode(images)
    n = len(memory)
    live = [[((BOS,), 0.0)] for _ in range(n)]
    finished: list[list[tuple]] = [[] for _ in range(n)]
    active = list(range(n))
    length = 1
    while active:
        rows, owners = [], []
        for i in active:
            for tokens, _ in live[i]:
                rows.append(tokens)
                owners.append(i)
        logp_all = scorer.step_logprobs(_take(memory, owners), np.array(rows))
        at_limit = length >= max_len - 1
        logp_all = _masked(logp_all, at_limit, banned)
        next_active = []
        offset = 0
        for i in active:
            parents = live[i]
            k = len(parents)
            block = logp_all[offset : offset + k]
            offset += k
            cand = block + np.array([lp for _, lp in parents])[:, None]
            scores = _score(cand, length, alpha)
            flat = scores.ravel()
            finite = np.isfinite(flat)
            n_finite = int(finite.sum())
            if n_finite == 0:
                live[i] = []
                continue
            if n_finite > b:
                cutoff = np.partition(flat[finite], n_finite - b)[n_finite - b]
                pick = np.flatnonzero(finite & (flat >= cutoff))
            else:
                pick = np.flatnonzero(finite)
            vsize = block.shape[1]
            ranked = sorted(
                (
                    _rank_key(float(flat[j]), float(cand.flat[j]), parents[j // vsize][0] + (int(j % vsize),))
                    for j in pick
                )
            )[:b]
            new_live = []
            for neg_score, neg_lp, tokens in ranked:
                if tokens[-1] == EOS:
                    finished[i].append((-neg_score, -neg_lp, tokens))
                else:
                    new_live.append((tokens, -neg_lp))
            live[i] = new_live
            if not new_live:
                continue
            if finished[i]:
                best_done = max(s for s, _, _ in finished[i])
                denom = 1.0 if alpha == 0 else (max_len - 1) ** alpha
                bound = max(lp for _, lp in new_live) / denom
                if best_done >= bound:
                    continue
            next_active.append(i)
        active = next_active
        length += 1
    results = []
    for i in range(n):
        done = sorted(_rank_key(s, lp, t) for s, lp, t in finished[i])
        beam = [Hypothesis(t, -nlp, True) for _, nlp, t in done]
        beam += [Hypothesis(t, lp, False) for t, lp in live[i]]
        results.append(BeamResult(beam[0], tuple(beam)))
    return results


def beam_decode(scorer, image, config: BeamConfig) -> BeamResult:
    return beam_decode_batch(scorer, [image], config)[0]


def decode_batch(scorer, images, method: str = "beam", width: int = 5, max_len: int | None = None) -> list[Hypothesis]:
    """Best hypothesis per image with either decoder."""
    max_len = scorer.max_len if max_len is None else max_len
    if method == "greedy":
        return greedy_decode_batch(scorer, images, max_len)
    if method == "beam":
        return [r.best for r in beam_decode_batch(scorer, images, BeamConfig(width, max_len))]
    raise ValueError(f"unknown decoding method {method!r}")


def sequence_logprob(scorer, image, tokens) -> float:
    """Re-score a token sequence one step at a time (independent of the decoders)."""
    memory = scorer.encode([image])
    total = 0.0
    for t in range(1, len(tokens)):
        logp = scorer.step_logprobs(memory, np.array([tokens[:t]]))
        total += float(logp[0, tokens[t]])
    return total
