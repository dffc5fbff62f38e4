"""Task-specific evaluation: BLEU / ROUGE-L for open answers, accuracy and
macro-F1 for choice answers. All scores on a 0-100 scale."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

from .lm import normalize

log = logging.getLogger(__name__)

OPEN_TASKS = ("understanding", "decision")
CLOSED_TASKS = ("perception", "reasoning")


def _tokens(text):
    return normalize(text).split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference):
    """Single-reference BLEU-4 with add-one smoothed modified precisions."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand:
        log.info("bleu: empty candidate, scoring 0")
        return 0.0
    log_precision = 0.0
    for n in range(1, 5):
        cand_ngrams = _ngrams(cand, n)
        ref_ngrams = _ngrams(ref, n)
        matched = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
        total = sum(cand_ngrams.values())
        if n == 1:
            if matched == 0:
                return 0.0  # no lexical overlap at all
            log_precision += math.log(matched / total)
        else:
            log_precision += math.log((matched + 1) / (total + 1))
    brevity = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return 100.0 * brevity * math.exp(log_precision / 4)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    """LCS-based F1, beta = 1."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand or not ref:
        if not cand and not ref:
            log.info("rouge_l: both sequences empty, scoring 0")
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 100.0 * 2 * p * r / (p + r)


def extract_choice(answer, choice_set):
    """First standalone or quoted letter from the choice set; 'invalid' if none."""
    for tok in _tokens(answer):
        bare = tok[1:-1] if len(tok) == 3 and tok[0] == tok[-1] == '"' else tok
        if bare in choice_set:
            return bare
    return "invalid"


def choice_accuracy_f1(predictions, gold, classes):
    """Exact-match accuracy and unweighted macro-F1 over `classes`."""
    if not predictions or len(predictions) != len(gold):
        raise ValueError(
            f"need equal non-empty prediction/gold lists, got {len(predictions)}/{len(gold)}"
        )
    for p in predictions:
        if p not in classes:
            log.info("unknown prediction letter %r counted as wrong", p)
    correct = sum(p == g for p, g in zip(predictions, gold))
    accuracy = 100.0 * correct / len(gold)
    f1_sum = 0.0
    for cls in classes:
        tp = sum(p == cls and g == cls for p, g in zip(predictions, gold))
        fp = sum(p == cls and g != cls for p, g in zip(predictions, gold))
        fn = sum(p != cls and g == cls for p, g in zip(predictions, gold))
        f1_sum += 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return accuracy, 100.0 * f1_sum / len(classes)


@dataclass
class EvalReport:
    tables: dict = field(default_factory=dict)  # task -> {metric: value}
    counts: dict = field(default_factory=dict)  # task -> record count

    def to_json(self):
        return json.dumps({"metrics": self.tables, "counts": self.counts},
                          sort_keys=True, indent=2)

    def to_table(self):
        header = f"{'Task':<14} {'Rouge-L':>8} {'BLEU':>8} {'Accuracy':>9} {'F1':>8} {'N':>6}"
        lines = [header, "-" * len(header)]
        for task in ("understanding", "perception", "reasoning", "decision"):
            if task not in self.tables:
                continue
            m = self.tables[task]

            def cell(key):
                return f"{m[key]:.2f}" if key in m else "-"

            lines.append(
                f"{task:<14} {cell('rouge_l'):>8} {cell('bleu'):>8} "
                f"{cell('accuracy'):>9} {cell('f1'):>8} {self.counts[task]:>6}"
            )
        return "\n".join(lines)


def evaluate(model, records, data_root, max_answer_len=40, progress=None):
    """Greedy decoding for open tasks, likelihood ranking over the choice set
    for closed tasks."""
    report = EvalReport()
    by_task = {}
    for rec in records:
        by_task.setdefault(rec.task, []).append(rec)
    done = 0
    for task, recs in sorted(by_task.items()):
        if task in CLOSED_TASKS:
            preds, gold = [], []
            classes = sorted(recs[0].choices)
            for rec in recs:
                preds.append(model.rank_choices(rec, data_root))
                gold.append(extract_choice(rec.answer, set(classes)))
                done += 1
                if progress:
                    progress(done)
            acc, f1 = choice_accuracy_f1(preds, gold, classes)
            report.tables[task] = {"accuracy": acc, "f1": f1}
        else:
            bleu_total, rouge_total = 0.0, 0.0
            for rec in recs:
                decoded = model.answer_greedy(rec, data_root, max_len=max_answer_len)
                bleu_total += bleu(decoded, rec.answer)
                rouge_total += rouge_l(decoded, rec.answer)
                done += 1
                if progress:
                    progress(done)
            report.tables[task] = {
                "rouge_l": rouge_total / len(recs),
                "bleu": bleu_total / len(recs),
            }
        report.counts[task] = len(recs)
    return report
