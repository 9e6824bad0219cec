"""Caption, detection and grounding metrics.

All scores lie in ``[0, 1]``. Detection is scored as a set: predictions are
matched greedily in parse order to the best unmatched same-class truth box
with IoU >= 0.5.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Hashable, Sequence
from dataclasses import asdict, dataclass

from diffscene.core.errors import DiffSceneError
from diffscene.vocab.tokens import Box, Vocabulary, box_iou, decode_box

MATCH_IOU = 0.5
DUPLICATE_IOU = 0.9
BLEU_ORDER = 4

Detection = tuple[int, Box]


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for two zero-area boxes."""
    return box_iou(a, b)


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> float:
    """Sentence BLEU with uniform 1..4-gram weights and a brevity penalty.

    A higher-order precision with no matches is smoothed to ``1 / (total + 1)``
    provided the candidate has at least one unigram match; an empty candidate
    or one without unigram matches scores 0.
    """
    cand, ref = list(candidate), list(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, BLEU_ORDER + 1):
        c_grams, r_grams = _ngrams(cand, n), _ngrams(ref, n)
        total = sum(c_grams.values())
        matched = sum(min(count, r_grams[g]) for g, count in c_grams.items())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        elif matched == 0:
            p = 1.0 / (total + 1)
        else:
            p = matched / total
        log_sum += math.log(p) / BLEU_ORDER
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return min(1.0, bp * math.exp(log_sum))


def token_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Position-wise agreement over the length of *truth*."""
    if not truth:
        return 1.0
    hits = sum(1 for i, t in enumerate(truth) if i < len(pred) and pred[i] == t)
    return hits / len(truth)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionResult:
    predicted: tuple[Detection, ...] = ()
    malformed_spans: int = 0

    @property
    def n_spans(self) -> int:
        return len(self.predicted) + self.malformed_spans


def parse_detection(tokens: Sequence[int], v: Vocabulary) -> DetectionResult:
    """Scan *tokens* for ``[class, x1, y1, x2, y2]`` spans.

    ``[PAD]`` ends the scan. Anything that does not form a complete span
    counts as one malformed span and scanning resumes at the next class token.
    """
    ids = [int(t) for t in tokens]
    n = len(ids)
    found: list[Detection] = []
    malformed = 0

    def valid(token_id: int) -> bool:
        return 0 <= token_id < len(v)

    i = 0
    while i < n and ids[i] != v.pad_id:
        head = ids[i]
        span = ids[i + 1 : i + 5]
        if (
            valid(head)
            and v.is_class(head)
            and len(span) == 4
            and all(valid(t) and v.is_coord(t) for t in span)
        ):
            found.append((v.class_index(head), decode_box(v, span)))
            i += 5
            continue
        malformed += 1
        i += 1
        while i < n and ids[i] != v.pad_id and not (valid(ids[i]) and v.is_class(ids[i])):
            i += 1
    return DetectionResult(tuple(found), malformed)


@dataclass(frozen=True)
class DetectionScores:
    set_f1_at_05: float
    precision: float
    recall: float
    duplicate_rate: float
    matches: int = 0
    n_pred: int = 0
    n_truth: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def duplicate_rate(predicted: Sequence[Detection]) -> float:
    """Share of predictions with IoU >= 0.9 to an earlier same-class prediction."""
    if not predicted:
        return 0.0
    dups = 0
    for j, (cls, box) in enumerate(predicted):
        if any(c == cls and iou(b, box) >= DUPLICATE_IOU for c, b in predicted[:j]):
            dups += 1
    return dups / len(predicted)


def detection_scores(
    pred: DetectionResult | Sequence[Detection], truth: Sequence[Detection]
) -> DetectionScores:
    """Greedy one-to-one set matching at IoU >= 0.5.

    Empty prediction against empty truth is a perfect score; with empty truth,
    recall is 1 and any prediction drives precision to 0.
    """
    predicted = list(pred.predicted if isinstance(pred, DetectionResult) else pred)
    truth = list(truth)
    used = [False] * len(truth)
    matches = 0
    for cls, box in predicted:
        best, best_iou = -1, MATCH_IOU
        for j, (t_cls, t_box) in enumerate(truth):
            if used[j] or t_cls != cls:
                continue
            score = iou(box, t_box)
            if score >= best_iou and (best < 0 or score > best_iou):
                best, best_iou = j, score
        if best >= 0:
            used[best] = True
            matches += 1

    if predicted:
        precision = matches / len(predicted)
    else:
        precision = 1.0 if not truth else 0.0
    recall = matches / len(truth) if truth else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return DetectionScores(
        set_f1_at_05=f1,
        precision=precision,
        recall=recall,
        duplicate_rate=duplicate_rate(predicted),
        matches=matches,
        n_pred=len(predicted),
        n_truth=len(truth),
    )


# ---------------------------------------------------------------------------
# Grounding
# ---------------------------------------------------------------------------


def grounding_acc(pred_tokens: Sequence[int], truth_box: Box, v: Vocabulary) -> int:
    """1 if the first four tokens are coordinates of a box with IoU >= 0.5 to *truth_box*."""
    head = [int(t) for t in pred_tokens[:4]]
    if len(head) < 4 or not all(0 <= t < len(v) and v.is_coord(t) for t in head):
        return 0
    try:
        box = decode_box(v, head)
    except DiffSceneError:
        return 0
    return int(iou(box, truth_box) >= MATCH_IOU)


@dataclass
class CaptionScores:
    exact_match: float
    token_accuracy: float
    bleu4: float


def caption_scores(pred: Sequence[int], truth: Sequence[int], pad_id: int) -> CaptionScores:
    stripped_pred = [int(t) for t in pred if int(t) != pad_id]
    stripped_truth = [int(t) for t in truth if int(t) != pad_id]
    return CaptionScores(
        exact_match=float(stripped_pred == stripped_truth),
        token_accuracy=token_accuracy([int(t) for t in pred], [int(t) for t in truth]),
        bleu4=bleu4(stripped_pred, stripped_truth),
    )
