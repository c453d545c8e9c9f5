"""Report quality metrics: BLEU 1-4, ROUGE-L, and exact-match METEOR.

All functions take pre-tokenized candidates/references and return scores in
[0, 1]. BLEU is corpus-level with clipped n-gram precisions and the
corpus brevity penalty; per-example BLEU display values use add-epsilon
smoothing. ROUGE-L is the LCS F-measure with the conventional
recall-weighted beta. METEOR runs exact-match alignment only (no stemming
or synonym resources) and zeroes the fragmentation penalty for a perfectly
contiguous (single chunk) alignment, so identical sequences score 1.
"""

import math
from collections import Counter
from dataclasses import dataclass, field

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n.

    Clipped n-gram matches and candidate n-gram totals are accumulated over
    the corpus; BLEU-n is the geometric mean of precisions 1..n times the
    brevity penalty exp(1 - r/c) applied when c < r. A zero precision at any
    order sends that order (and higher) to 0.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    matched = [0] * max_n
    possible = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand, n)
            ref_counts = ngram_counts(ref, n)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
            possible[n - 1] += max(0, len(cand) - n + 1)
    if cand_len == 0:
        return [0.0] * max_n
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    precisions = [m / p if p > 0 else 0.0 for m, p in zip(matched, possible)]
    scores = []
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(p) for p in precisions[:n]) / n
        scores.append(brevity * math.exp(log_mean))
    return scores


def bleu_example(candidate, reference, max_n=4, eps=1e-9):
    """Single-pair BLEU with epsilon-smoothed precisions, for display only."""
    if not candidate:
        return [0.0] * max_n
    brevity = 1.0 if len(candidate) > len(reference) else math.exp(1.0 - len(reference) / len(candidate))
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        counts = ngram_counts(candidate, n)
        ref_counts = ngram_counts(reference, n)
        m = sum(min(c, ref_counts[g]) for g, c in counts.items())
        p = max(0, len(candidate) - n + 1)
        log_sum += math.log(max(m / p if p > 0 else 0.0, eps))
        scores.append(brevity * math.exp(log_sum / n))
    return scores


def lcs_length(a, b):
    """Longest common subsequence length via the classic DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta=ROUGE_BETA):
    """LCS-based F-measure with recall weighting ``beta``."""
    if not reference:
        raise ValueError("ROUGE-L requires a non-empty reference")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return ((1 + beta**2) * precision * recall) / (recall + beta**2 * precision)


def _align(candidate, reference):
    """Exact-match alignment: each candidate token maps to one unused
    reference position of the same surface form, preferring the position
    that continues the current run. Returns ordered (cand_idx, ref_idx)
    pairs."""
    positions = {}
    for j, token in enumerate(reference):
        positions.setdefault(token, []).append(j)
    used = set()
    pairs = []
    prev_ref = None
    for i, token in enumerate(candidate):
        free = [j for j in positions.get(token, ()) if j not in used]
        if not free:
            continue
        if prev_ref is not None and prev_ref + 1 in free:
            j = prev_ref + 1
        else:
            j = free[0]
        used.add(j)
        pairs.append((i, j))
        prev_ref = j
    return pairs


def meteor(candidate, reference, alpha=METEOR_ALPHA, gamma=METEOR_GAMMA, theta=METEOR_THETA):
    """Exact-match METEOR-style score.

    Harmonic mean of precision and recall (recall-weighted by ``alpha``)
    scaled by a fragmentation penalty on the number of alignment chunks
    beyond one, so a fully contiguous match is penalty-free.
    """
    if not reference:
        raise ValueError("METEOR requires a non-empty reference")
    if not candidate:
        return 0.0
    pairs = _align(candidate, reference)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    chunks = 1
    for (pi, pj), (ci, cj) in zip(pairs, pairs[1:]):
        if ci != pi + 1 or cj != pj + 1:
            chunks += 1
    penalty = gamma * ((chunks - 1) / matches) ** theta
    return f_mean * (1.0 - penalty)


@dataclass
class ScoreReport:
    """Corpus-level metric aggregates plus per-example rows."""

    bleu: list
    rouge_l: float
    meteor: float
    per_example: list = field(default_factory=list)

    METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR")

    def values(self):
        return [*self.bleu, self.rouge_l, self.meteor]

    def to_dict(self):
        return {
            "bleu_1": self.bleu[0],
            "bleu_2": self.bleu[1],
            "bleu_3": self.bleu[2],
            "bleu_4": self.bleu[3],
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "per_example": self.per_example,
        }

    def format_table(self):
        lines = [f"{name:<8} {value:.4f}" for name, value in zip(self.METRIC_NAMES, self.values())]
        return "\n".join(lines) + "\n"


def score_corpus(candidates, references, example_ids=None):
    """Full metric suite over paired token lists."""
    if not candidates:
        raise ValueError("no examples to score")
    corpus_bleu = bleu(candidates, references)
    rouge_scores = [rouge_l(c, r) for c, r in zip(candidates, references)]
    meteor_scores = [meteor(c, r) for c, r in zip(candidates, references)]
    per_example = []
    for idx, (cand, ref) in enumerate(zip(candidates, references)):
        row = {
            "bleu": bleu_example(cand, ref),
            "rouge_l": rouge_scores[idx],
            "meteor": meteor_scores[idx],
        }
        if example_ids is not None:
            row["id"] = example_ids[idx]
        per_example.append(row)
    return ScoreReport(
        bleu=corpus_bleu,
        rouge_l=sum(rouge_scores) / len(rouge_scores),
        meteor=sum(meteor_scores) / len(meteor_scores),
        per_example=per_example,
    )
