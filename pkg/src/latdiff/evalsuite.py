"""Sample-quality metrics: n-gram perplexity, diversity, memorization.

The reference scorer is an interpolated Kneser-Ney model (orders 1 to 3,
absolute discount 0.75) fit on the training ids. The top order uses raw
counts; every lower order uses continuation counts, and the unigram floor is
add-0.5 smoothed over the whole id space so any decoded row gets a finite
score. Position 0 of a row is treated as pure context and never scored;
scoring then always conditions on the longest context the order allows.

Also hosts the time-conditioning diagnostic for the free-flow kind: cosine
similarity of the interior mean field between distinct times. A net that
ignores its time input produces cosines pinned near one.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import END_ID, PAD_ID
from .errors import NumericalError, UnsupportedPolicyError
from .forward import NfdmForward

KN_DISCOUNT = 0.75


def strip_ids(row) -> tuple:
    """Trim one decoded row: keep position 0, stop after END or at PAD."""
    out = [int(row[0])]
    for tok in row[1:]:
        tok = int(tok)
        if tok == PAD_ID:
            break
        out.append(tok)
        if tok == END_ID:
            break
    return tuple(out)


def ngrams(seq, n):
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


class NGramOracle:
    """Interpolated Kneser-Ney scorer over integer ids."""

    def __init__(self, order: int, vocab_size: int):
        if not 1 <= order <= 3:
            raise ValueError(f"order must be 1..3, got {order}")
        self.order = order
        self.vocab_size = vocab_size
        # per level n: ngram counts, context totals, distinct continuations
        self._counts = {n: Counter() for n in range(1, order + 1)}
        self._ctx_total = {n: Counter() for n in range(2, order + 1)}
        self._ctx_distinct = {n: Counter() for n in range(2, order + 1)}
        self._uni_total = 0.0

    @classmethod
    def fit(cls, sequences, order: int, vocab_size: int) -> "NGramOracle":
        self = cls(order, vocab_size)
        raw = {n: Counter() for n in range(1, order + 2)}
        for seq in sequences:
            seq = tuple(int(t) for t in seq)
            for n in range(1, order + 1):
                raw[n].update(ngrams(seq, n))
        self._counts[order] = raw[order]
        for n in range(1, order):
            # lower levels count distinct left extensions, not occurrences
            seen = defaultdict(set)
            for gram in raw[n + 1]:
                seen[gram[1:]].add(gram[0])
            self._counts[n] = Counter({g: len(s) for g, s in seen.items()})
        for n in range(2, order + 1):
            for gram, c in self._counts[n].items():
                self._ctx_total[n][gram[:-1]] += c
                self._ctx_distinct[n][gram[:-1]] += 1
        self._uni_total = float(sum(self._counts[1].values()))
        return self

    @classmethod
    def uniform(cls, vocab_size: int) -> "NGramOracle":
        return cls.fit([], order=1, vocab_size=vocab_size)

    def prob(self, token: int, context=()) -> float:
        context = tuple(context)[-(self.order - 1) :] if self.order > 1 else ()
        return self._prob(token, context)

    def _prob(self, w, ctx):
        if not ctx:
            c = self._counts[1].get((w,), 0)
            return (c + 0.5) / (self._uni_total + 0.5 * self.vocab_size)
        n = len(ctx) + 1
        tot = self._ctx_total[n].get(ctx, 0)
        if tot == 0:
            return self._prob(w, ctx[1:])
        c = self._counts[n].get(ctx + (w,), 0)
        lam = KN_DISCOUNT * self._ctx_distinct[n][ctx] / tot
        return max(c - KN_DISCOUNT, 0.0) / tot + lam * self._prob(w, ctx[1:])

    def logprob(self, seq) -> tuple[float, int]:
        """Total log-prob (nats) and scored-token count for one stripped row."""
        seq = tuple(int(t) for t in seq)
        total = 0.0
        for j in range(1, len(seq)):
            ctx = seq[max(0, j - self.order + 1) : j]
            total += np.log(self._prob(seq[j], ctx))
        return total, len(seq) - 1


def corpus_ppl(oracle: NGramOracle, rows) -> tuple[float, float]:
    """Token-pooled PPL over decoded rows, with a delta-method standard error.

    Rows whose stripped form has no scorable token are skipped.
    """
    per_seq = []
    nats = tok = 0
    for row in rows:
        seq = strip_ids(row)
        if len(seq) < 2:
            continue
        lp, n = oracle.logprob(seq)
        per_seq.append(-lp / n)
        nats -= lp
        tok += n
    if tok == 0:
        raise NumericalError("no scorable tokens in any row")
    ppl = float(np.exp(nats / tok))
    se = 0.0
    if len(per_seq) > 1:
        se = ppl * float(np.std(per_seq, ddof=1) / np.sqrt(len(per_seq)))
    return ppl, se


def diversity(rows) -> float:
    """Product over n=2..4 of (unique n-grams / total n-grams), pooled.

    Computed on the stripped rows without the position-0 token. Needs at
    least two rows and at least one 4-gram, else the statistic is undefined.
    """
    if len(rows) < 2:
        raise NumericalError("diversity needs at least two rows")
    bodies = [strip_ids(r)[1:] for r in rows]
    score = 1.0
    for n in (2, 3, 4):
        pooled = [g for b in bodies for g in ngrams(b, n)]
        if not pooled:
            raise NumericalError(f"no {n}-grams; rows too short for diversity")
        score *= len(set(pooled)) / len(pooled)
    return score


def train_fourgrams(sequences) -> set:
    out = set()
    for seq in sequences:
        out.update(ngrams(tuple(int(t) for t in seq), 4))
    return out


def memorization(rows, train_grams: set) -> float:
    """Fraction of sampled 4-grams that occur verbatim in the training set."""
    pooled = [g for r in rows for g in ngrams(strip_ids(r)[1:], 4)]
    if not pooled:
        return 0.0
    return sum(g in train_grams for g in pooled) / len(pooled)


def pairwise_path_cosines(model, emb, times=None):
    """Per-sequence cosines between interior mean fields at each time pair.

    Returns (times, cos) with cos shaped [n_pairs over i<j, batch]; only the
    free-flow kind has an interior mean net, other kinds have no analogue.
    """
    if not isinstance(model.process, NfdmForward):
        raise UnsupportedPolicyError("path cosine needs the nfdm forward kind")
    if times is None:
        times = np.linspace(0.1, 0.9, 9)
    times = np.asarray(times, dtype=np.float64)
    b = emb.shape[0]
    with torch.no_grad():
        flats = []
        for t in times:
            tv = torch.full((b,), float(t), dtype=emb.dtype)
            flats.append(model.process.mu_bar(emb, tv).reshape(b, -1).double())
    cos = torch.nn.functional.cosine_similarity
    rows = [cos(flats[i], flats[j], dim=1).numpy()
            for i in range(len(flats)) for j in range(i + 1, len(flats))]
    return times, np.stack(rows)


def mean_path_cosine(model, emb, times=None) -> tuple[float, float]:
    """Pooled mean and sd of the pairwise time cosines; near one with sd near
    zero flags a mean field that ignores its time input."""
    _, vals = pairwise_path_cosines(model, emb, times)
    return float(vals.mean()), float(vals.std(ddof=1))


@dataclass(frozen=True)
class PolicyRow:
    """One ablation-table line: a sampler policy and its sample metrics."""

    method: str
    steps: int
    knob: str
    ppl: float
    ppl_se: float
    diversity: float
    memorization: float
    seed_count: int


def evaluate_policy(model, cfgs, count, oracle, train_grams) -> PolicyRow:
    """Sample under each seed's config and pool metrics; PPL se across seeds
    when several are given, else the single-run delta-method se."""
    from .sampler import generate

    ppls, rows_all = [], []
    for cfg in cfgs:
        batch = generate(model, cfg, count)
        rows = list(batch.ids)
        ppls.append(corpus_ppl(oracle, rows))
        rows_all.extend(rows)
    if len(ppls) > 1:
        vals = [p for p, _ in ppls]
        ppl = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    else:
        ppl, se = ppls[0]
    c = cfgs[0]
    knob = "" if c.method in ("star", "ode") else str(c.noise_mix if c.method == "chain" else c.tau)
    return PolicyRow(c.method, c.steps, knob, ppl, se, diversity(rows_all),
                     memorization(rows_all, train_grams), len(cfgs))
