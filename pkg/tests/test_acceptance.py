"""Acceptance suite: the desk-scale pipeline plus the oracle and property checks.

Every test records its outcome in ``conftest.CRITERIA`` before asserting, so the
terminal summary shows one PASS/FAIL line per criterion even when some fail.
The pipeline tests share module-scoped runs on three seeds of ``configs/desk.conf``
and take several minutes on one CPU core.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import CRITERIA
from kreplay.decode import BeamConfig, beam_decode, decode_batch, greedy_decode
from kreplay.evaluation import bleu, cider, contains_phrase, rouge_l
from kreplay.losses import (
    LossWeights, caption_ce, coverage_loss, distill_loss, keyword_probs, kpred_loss, repetition_penalty, total_loss,
)
from kreplay.model import ModelConfig, backward, clone_frozen, forward, init_model
from kreplay.pipeline import SeedRun, run
from kreplay.text import BOS, EOS
from kreplay.train import SchedulerState, cosine_lr

from mocks import RandomScorer, brute_force_best, total_logprob
from oracles import bleu_oracle, cider_oracle, finite_difference, random_corpus, relative_error, rouge_oracle

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"
SEEDS = (0, 1, 2)
GRID = [(k, d) for k in (0.1, 0.5, 1.0) for d in (0.1, 0.5, 1.0)]


def record(number, passed, detail):
    CRITERIA.append((number, bool(passed), detail))
    assert passed, f"criterion {number}: {detail}"


def lam_name(k, d, decode="beam"):
    return f"kreplay_k{k}_d{d}_{decode}"


# -- shared pipeline runs ---------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs, seconds = {}, {}
    for seed in SEEDS:
        start = time.perf_counter()
        runs[seed] = SeedRun(root / f"seed{seed}", DESK, seed).base()
        seconds[seed] = time.perf_counter() - start
    return runs, seconds


@pytest.fixture(scope="module")
def sweep(desk):
    """Replay over the weight grid on seed 0; the best pair is picked on validation."""
    runs, _ = desk
    base = runs[0]
    for k, d in GRID:
        base.replay(lam_name(k, d), (f"lambda_k={k}", f"lambda_d={d}"))
    scored = {(k, d): base.best_meta(lam_name(k, d)) for k, d in GRID}
    best = max(GRID, key=lambda kd: (scored[kd]["rec"], scored[kd]["cider"]))
    return best, scored


@pytest.fixture(scope="module")
def paired(desk, sweep):
    """Beam and greedy pseudo-caption runs at the chosen weights on every seed."""
    runs, _ = desk
    (k, d), _ = sweep
    weights = (f"lambda_k={k}", f"lambda_d={d}")
    out = {}
    for seed in SEEDS:
        r = runs[seed]
        beam = r.reports.get(lam_name(k, d)) or r.replay(lam_name(k, d), weights)
        greedy = r.replay(lam_name(k, d, "greedy"), (*weights, "pseudo_decode=greedy"))
        out[seed] = (beam, greedy)
    return out


def test_forgetting_is_observable(desk):
    runs, seconds = desk
    rows, ok = [], seconds[0] <= 600
    for seed in SEEDS:
        pre, ft = runs[seed].reports["pretrain_val"], runs[seed].reports["finetune_val"]
        rec_pre, rec_ft = pre["concept"]["rec"], ft["concept"]["rec"]
        good = rec_pre >= 0.80 and rec_pre - rec_ft >= 0.25 and ft["generic"]["cider"] > pre["generic"]["cider"]
        ok = ok and good
        rows.append(f"s{seed}: rec {rec_pre:.3f}->{rec_ft:.3f} cider {pre['generic']['cider']:.3f}->"
                    f"{ft['generic']['cider']:.3f}")
    record(1, ok, "; ".join(rows) + f"; base pipeline {seconds[0]:.0f}s")


def test_replay_restores_seen_concepts(desk, sweep):
    runs, _ = desk
    (k, d), _ = sweep
    base = runs[0]
    ft, kr = base.reports["finetune"], base.reports[lam_name(k, d)]
    gain = kr["seen"]["rec"] - ft["seen"]["rec"]
    ratio = kr["generic"]["cider"] / ft["generic"]["cider"]
    ok = gain >= 0.10 and ratio >= 0.95
    record(2, ok, f"best lambda=({k},{d}) seen rec {ft['seen']['rec']:.3f}->{kr['seen']['rec']:.3f}, "
                  f"generic cider {ft['generic']['cider']:.3f}->{kr['generic']['cider']:.3f} ({ratio:.3f}x)")


def test_beam_pseudo_captions_not_worse_than_greedy(paired):
    diffs = {s: beam["seen"]["rec"] - greedy["seen"]["rec"] for s, (beam, greedy) in paired.items()}
    ok = all(x >= 0 for x in diffs.values()) and sum(x == 0 for x in diffs.values()) <= 1
    detail = ", ".join(f"s{s}: beam {b['seen']['rec']:.3f} greedy {g['seen']['rec']:.3f}"
                       for s, (b, g) in paired.items())
    record(3, ok, detail)


def test_unseen_block_reported_and_improved(desk, paired):
    runs, _ = desk
    wins, rows, populated = 0, [], True
    for seed in SEEDS:
        ft, kr = runs[seed].reports["finetune"], paired[seed][0]
        populated = populated and kr["unseen"]["count"] > 0 and kr["unseen"]["rec"] is not None
        wins += kr["unseen"]["rec"] > ft["unseen"]["rec"]
        rows.append(f"s{seed}: {ft['unseen']['rec']:.3f}->{kr['unseen']['rec']:.3f}")
    record(4, populated and wins >= 2, f"unseen rec {', '.join(rows)}; improved on {wins}/3")


# -- gradients and losses ---------------------------------------------------------------


def test_loss_gradients_match_finite_differences():
    start = time.perf_counter()
    cfg = ModelConfig(vocab_size=10, d_model=8, n_heads=2, d_ff=12, max_len=6, grid_h=2, grid_w=2, d_patch=4)
    student, teacher = init_model(cfg, 1), clone_frozen(init_model(cfg, 2))
    rng = np.random.default_rng(0)
    image, replay_image = rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 4))
    caption, pseudo, keyword = [BOS, 4, 7, 5, EOS], [BOS, 6, 8, EOS], [8, 9]
    weights = LossWeights(0.5, 0.3)
    z_teacher = forward(teacher, replay_image, pseudo).detach()

    def losses():
        ce = caption_ce(forward(student, image, caption), caption, 0.1)
        z = forward(student, replay_image, pseudo)
        probs = keyword_probs(z, keyword)
        cov, rep = coverage_loss(probs), repetition_penalty(probs)
        dist = distill_loss(z_teacher, z, 16.0)
        return [ce, cov, rep, cov + rep, dist, total_loss(ce, cov + rep, dist, weights)]

    names = ["ce", "coverage", "repetition", "kpred", "distill", "total"]
    analytic = [backward(student, losses()[i]) for i in range(len(names))]
    numeric = finite_difference(losses, student.param_dict())
    worst = {n: max(relative_error(a[p], g[p]) for p in a) for n, a, g in zip(names, analytic, numeric)}
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed <= 60
    record(5, ok, ", ".join(f"{n} {e:.1e}" for n, e in worst.items()) + f"; {elapsed:.1f}s")


def test_loss_closed_forms():
    checks = {
        "ce uniform": (float(caption_ce(torch.zeros(2, 4, dtype=torch.float64), [1, 2, 3], 0.1, None)),
                       math.log(4)),
        "coverage p=0": (float(coverage_loss([0.0])), math.log(2)),
        "coverage p=1": (float(coverage_loss([1.0])), 0.313262),
        "kl": (float(distill_loss(torch.tensor([[0.0, 0.0]], dtype=torch.float64),
                                  torch.tensor([[math.log(3), 0.0]], dtype=torch.float64), 1.0)), 0.143841),
        "rep p=1": (float(repetition_penalty([1.0, 1.0])), 0.0),
        "rep p=0.5": (float(repetition_penalty([0.5])), 0.25),
        "rep p=0": (float(repetition_penalty([0.0, 0.0])), 2.0),
        "kpred p=0": (float(kpred_loss([0.0])), math.log(2) + 1),
    }
    bad = [k for k, (got, want) in checks.items() if abs(got - want) > 1e-6]
    record(6, not bad, f"{len(checks) - len(bad)}/{len(checks)} fixtures" + (f", failed {bad}" if bad else ""))


# -- decoding and metrics -------------------------------------------------------------------


def test_decoding_oracles():
    width_one = sum(
        beam_decode(m, s, BeamConfig(width=1, max_len=7)).best.tokens == greedy_decode(m, s).tokens
        for s in range(100) for m in [RandomScorer(s, vocab_size=6, max_len=7)]
    )
    exhaustive, total = 0, 0
    for vocab_size in (3, 4, 5):
        for max_len in (2, 3, 4):
            for s in range(5):
                m = RandomScorer(s, vocab_size=vocab_size, max_len=max_len)
                best = beam_decode(m, s, BeamConfig(width=vocab_size**max_len, max_len=max_len)).best
                lp, seq = brute_force_best(m, s)
                exhaustive += best.tokens == seq and abs(best.logprob - lp) < 1e-9
                total += 1
    drift = max(abs(h.logprob - total_logprob(m, s, h.tokens))
                for s in range(50) for method in ("beam", "greedy")
                for m in [RandomScorer(s, vocab_size=5, max_len=6)]
                for h in decode_batch(m, [s], method, 1 + s % 5))
    ok = width_one == 100 and exhaustive == total and drift <= 1e-6
    record(7, ok, f"b=1 vs greedy {width_one}/100, exhaustive {exhaustive}/{total}, logprob drift {drift:.1e}")


def test_metric_oracles():
    worst = 0.0
    for seed in range(200):
        cands, refs = random_corpus(np.random.default_rng(seed))
        pairs = [(bleu(cands, refs, n), bleu_oracle(cands, refs, n)) for n in range(1, 5)]
        pairs += [(rouge_l(cands, refs), rouge_oracle(cands, refs)), (cider(cands, refs), cider_oracle(cands, refs))]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    refs = {0: ["red car on road"], 1: ["blue bird in tree"]}
    ident = {k: v[0] for k, v in refs.items()}
    fixtures = [
        abs(bleu({0: "the cat sat"}, {0: ["the cat sat down"]}, 1) - 0.7165) < 1e-4,
        abs(rouge_l({0: "a b c d"}, {0: ["a c b d"]}) - 0.75) < 1e-12,
        abs(bleu(ident, refs, 4) - 1.0) < 1e-12 and abs(rouge_l(ident, refs) - 1.0) < 1e-12,
        abs(cider(ident, refs) - 10.0) < 1e-9,
        contains_phrase("a mcdonalds breakfast sandwich with scrambled eggs and hash browns", "mcdonalds"),
        not contains_phrase("a close up of a fast food meal in a box", "mcdonalds"),
        contains_phrase("a view of the golden gate bridge from a boat", "golden gate bridge"),
    ]
    ok = worst <= 1e-6 and all(fixtures)
    record(8, ok, f"200 corpora max |diff| {worst:.1e}, fixtures {sum(fixtures)}/{len(fixtures)}")


# -- schedule and determinism -------------------------------------------------------------------


def test_scheduler_exact_and_logged_lr_monotone(desk, sweep):
    runs, _ = desk
    hi, lo, total = 3e-3, 3e-5, 1000
    errs = [abs(cosine_lr(SchedulerState(hi, lo, total, 0)) - hi),
            abs(cosine_lr(SchedulerState(hi, lo, total, total)) - lo),
            abs(cosine_lr(SchedulerState(hi, lo, total, total // 2)) - (hi + lo) / 2)]
    (k, d), _ = sweep
    logs = [runs[0].root / name / "loss_log.csv" for name in ("pretrain", "finetune", lam_name(k, d))]
    monotone = True
    for path in logs:
        lrs = [float(row["lr"]) for row in csv.DictReader(open(path))]
        monotone = monotone and all(b <= a for a, b in zip(lrs, lrs[1:]))
    ok = max(errs) <= 1e-12 and monotone
    record(9, ok, f"closed-form error {max(errs):.1e}, {len(logs)} logs non-increasing: {monotone}")


def _chain(root, conf):
    common = (f"data={root / 'data'}",)
    run("gen-data", root / "data", conf)
    run("pretrain", root / "pre", conf, common)
    run("finetune", root / "ft", conf, (*common, f"init={root / 'pre'}"))
    run("kreplay-train", root / "kr", conf, (*common, f"init={root / 'pre'}", f"teacher={root / 'ft'}"))
    run("eval", root / "eval", conf, (*common, f"checkpoint={root / 'kr'}"))
    run("decode", root / "decode", conf, (*common, f"checkpoint={root / 'kr'}"))
    return ["data", "pre", "ft", "kr", "eval", "decode"]


def test_every_command_is_byte_deterministic(tiny_conf, tmp_path):
    dirs = _chain(tmp_path / "a", tiny_conf)
    _chain(tmp_path / "b", tiny_conf)
    compared, mismatched = 0, []
    for d in dirs:
        a, b = tmp_path / "a" / d, tmp_path / "b" / d
        names = sorted(p.name for p in a.iterdir() if p.name not in ("run.log", "run.json"))
        assert names == sorted(p.name for p in b.iterdir() if p.name not in ("run.log", "run.json"))
        for name in names:
            compared += 1
            if (a / name).read_bytes() != (b / name).read_bytes():
                mismatched.append(f"{d}/{name}")
        # run.json embeds the (different) output paths; its output digests must agree
        if json.loads((a / "run.json").read_text())["outputs"] != json.loads((b / "run.json").read_text())["outputs"]:
            mismatched.append(f"{d}/run.json outputs")
    record(10, not mismatched, f"{compared} files across {len(dirs)} commands, mismatched {mismatched or 'none'}")
