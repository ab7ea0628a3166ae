"""
Recognition and translation scores.

WER comes from a unit-cost Levenshtein table whose traceback prefers
match > substitution > deletion > insertion, so the operation counts are
reproducible. BLEU is corpus-level with clipped n-gram precision, a brevity
penalty and no smoothing (computed by ``sacrebleu`` on pre-tokenized input).
ROUGE-L is the mean LCS F-measure over pairs.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from sacrebleu.metrics import BLEU


@dataclass
class WerBreakdown:
    wer: float
    n_sub: int
    n_ins: int
    n_del: int
    n_ref: int

    @property
    def n_errors(self) -> int:
        return self.n_sub + self.n_ins + self.n_del


def edit_table(ref: Sequence, hyp: Sequence) -> List[List[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def wer(ref: Sequence, hyp: Sequence) -> WerBreakdown:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    d = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    n_sub = n_ins = n_del = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + 1:
            n_sub += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            n_del += 1
            i -= 1
        else:
            n_ins += 1
            j -= 1
    return WerBreakdown((n_sub + n_ins + n_del) / len(ref), n_sub, n_ins, n_del, len(ref))


def bleu(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]], max_n: int = 4) -> List[float]:
    """Corpus BLEU-1..max_n on a 0-100 scale, one reference per hypothesis."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references for {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("BLEU of an empty corpus")
    sys_lines = [" ".join(h) for h in hyps]
    ref_lines = [[" ".join(r) for r in refs]]
    scores = []
    for n in range(1, max_n + 1):
        metric = BLEU(max_ngram_order=n, smooth_method="none", tokenize="none", effective_order=False)
        scores.append(float(metric.corpus_score(sys_lines, ref_lines).score))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(ref: Sequence, hyp: Sequence, beta: float = 1.0) -> float:
    if len(ref) == 0:
        raise ValueError("ROUGE-L is undefined for an empty reference")
    if len(hyp) == 0:
        return 0.0
    lcs = lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    r, p = lcs / len(ref), lcs / len(hyp)
    return (1 + beta ** 2) * r * p / (r + beta ** 2 * p)


def rouge_l(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]], beta: float = 1.0) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references for {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("ROUGE-L of an empty corpus")
    return sum(rouge_l_pair(r, h, beta) for r, h in zip(refs, hyps)) / len(refs)


@dataclass
class ClipScore:
    clip_id: str
    gloss_ref: List[str]
    gloss_hyp: List[str]
    text_ref: Optional[List[str]] = None
    text_hyp: Optional[List[str]] = None

    def to_json(self) -> str:
        return json.dumps({"clip_id": self.clip_id, "gloss_hyp": self.gloss_hyp, "gloss_ref": self.gloss_ref,
                           "text_hyp": self.text_hyp, "text_ref": self.text_ref})


@dataclass
class ScoreReport:
    split: str
    wer: float
    wer_breakdown: Dict[str, int]
    wer_macro: float
    n_clips: int
    bleu: Optional[List[float]] = None
    rouge_l: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        return cls(**json.loads(text))


def aggregate(rows: Sequence[ClipScore], split: str = "dev") -> ScoreReport:
    """Micro-averaged WER over the split, corpus BLEU and mean ROUGE-L when text hypotheses exist."""
    if not rows:
        raise ValueError("cannot aggregate an empty split")
    per_clip = [wer(r.gloss_ref, r.gloss_hyp) for r in rows]
    n_ref = sum(b.n_ref for b in per_clip)
    totals = {
        "n_sub": sum(b.n_sub for b in per_clip),
        "n_ins": sum(b.n_ins for b in per_clip),
        "n_del": sum(b.n_del for b in per_clip),
        "n_ref": n_ref,
    }
    micro = (totals["n_sub"] + totals["n_ins"] + totals["n_del"]) / n_ref
    macro = sum(b.wer for b in per_clip) / len(per_clip)
    report = ScoreReport(split=split, wer=micro, wer_breakdown=totals, wer_macro=macro, n_clips=len(rows))
    if all(r.text_hyp is not None and r.text_ref is not None for r in rows):
        report.bleu = bleu([r.text_ref for r in rows], [r.text_hyp for r in rows])
        report.rouge_l = rouge_l([r.text_ref for r in rows], [r.text_hyp for r in rows])
    return report
