"""Answer-grammar parsing and exact-match record F1."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .taskgen import GeneratorSpec, TAG_ARITY, PAD, BOS, EOS


@dataclass(frozen=True)
class Grammar:
    """Token classes of the closed answer vocabulary."""
    types: frozenset
    specials: frozenset

    @staticmethod
    def from_spec(spec: GeneratorSpec) -> "Grammar":
        return Grammar(types=frozenset(spec.type_tokens()),
                       specials=frozenset([PAD, BOS, EOS]))

    def parse(self, tokens: list[str]) -> tuple[list[tuple], int]:
        """Parse the grammar-valid prefix into records.

        Records are a tag followed by a type token and tag-specific span
        slots. The first malformation stops the scan; the dropped tail is
        reported as a count of leftover tokens. Total on any input.
        """
        records: list[tuple] = []
        i = 0
        n = len(tokens)
        while i < n:
            tag = tokens[i]
            arity = TAG_ARITY.get(tag)
            if arity is None:
                break
            slots = tokens[i + 1:i + 1 + arity]
            if len(slots) < arity:
                break
            if slots[0] not in self.types:
                break
            if any(s in TAG_ARITY or s in self.specials or s in self.types
                   for s in slots[1:]):
                break
            records.append((tag, *slots))
            i += 1 + arity
        return records, n - i


def serialize_records(records: list[tuple]) -> list[str]:
    return [tok for rec in records for tok in rec]


def f1_scores(pred: list[tuple], gold: list[tuple]) -> dict[str, float]:
    """Micro precision/recall/F1 over exact-match records (multiset)."""
    pred_c, gold_c = Counter(pred), Counter(gold)
    tp = sum((pred_c & gold_c).values())
    return _prf(tp, sum(pred_c.values()) - tp, sum(gold_c.values()) - tp)


def aggregate_f1(pairs: list[tuple[list[tuple], list[tuple]]]) -> dict[str, float]:
    """Micro P/R/F1 accumulated over (pred, gold) record lists."""
    tp = fp = fn = 0
    for pred, gold in pairs:
        pred_c, gold_c = Counter(pred), Counter(gold)
        hit = sum((pred_c & gold_c).values())
        tp += hit
        fp += sum(pred_c.values()) - hit
        fn += sum(gold_c.values()) - hit
    return _prf(tp, fp, fn)


def _prf(tp: int, fp: int, fn: int) -> dict[str, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "fp": fp, "fn": fn}
