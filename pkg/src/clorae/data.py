"""Vocabulary, batching and padding for the instruction extractor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taskgen import BOS, EOS, PAD

Array = np.ndarray


class TruncationError(ValueError):
    """A sample exceeds the configured length budget (never silently cut)."""


class Vocab:
    def __init__(self, tokens: list[str]):
        if tokens[:3] != [PAD, BOS, EOS]:
            raise ValueError("vocabulary must start with pad/bos/eos")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.pad_id, self.bos_id, self.eos_id = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks: list[str]) -> list[int]:
        return [self.ids[t] for t in toks]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class Batch:
    task_id: int
    dataset_id: str
    text_ids: Array          # [B, T_text] padded token ids
    visual: Array            # [B, T_vis, d_model]
    enc_token_mask: Array    # [B, T_vis + T_text] bool, True on real positions
    dec_in: Array            # [B, T_dec] bos + answer, padded
    dec_target: Array        # [B, T_dec] answer + eos, pad elsewhere
    dec_token_mask: Array    # [B, T_dec] bool

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]


def collate(samples: list[dict], vocab: Vocab, max_text_len: int,
            max_answer_len: int, visual_len: int) -> Batch:
    """Pad a task-homogeneous group of samples into one batch."""
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    task_ids = {s["task"] for s in samples}
    if len(task_ids) != 1:
        raise ValueError(f"batch mixes task ids {sorted(task_ids)}")
    dataset_ids = {s["dataset"] for s in samples}
    dataset_id = dataset_ids.pop() if len(dataset_ids) == 1 else "mixed"

    text_rows, ans_rows = [], []
    for s in samples:
        toks = list(s["instruction"]) + list(s["text"])
        if len(toks) > max_text_len:
            raise TruncationError(
                f"sample {s['id']} has {len(toks)} text tokens, budget is "
                f"{max_text_len}")
        ans = list(s["answer"])
        if len(ans) + 1 > max_answer_len:
            raise TruncationError(
                f"sample {s['id']} answer needs {len(ans) + 1} positions, "
                f"budget is {max_answer_len}")
        text_rows.append(vocab.encode(toks))
        ans_rows.append(vocab.encode(ans))

    b = len(samples)
    t_text = max(len(r) for r in text_rows)
    t_dec = max(len(r) for r in ans_rows) + 1
    text_ids = np.full((b, t_text), vocab.pad_id, dtype=np.int64)
    dec_in = np.full((b, t_dec), vocab.pad_id, dtype=np.int64)
    dec_target = np.full((b, t_dec), vocab.pad_id, dtype=np.int64)
    enc_token_mask = np.zeros((b, visual_len + t_text), dtype=bool)
    dec_token_mask = np.zeros((b, t_dec), dtype=bool)
    visual = np.zeros((b, visual_len, np.asarray(samples[0]["visual"]).shape[1]))
    enc_token_mask[:, :visual_len] = True

    for i, (text, ans) in enumerate(zip(text_rows, ans_rows)):
        text_ids[i, :len(text)] = text
        enc_token_mask[i, visual_len:visual_len + len(text)] = True
        dec_in[i, 0] = vocab.bos_id
        dec_in[i, 1:1 + len(ans)] = ans
        dec_target[i, :len(ans)] = ans
        dec_target[i, len(ans)] = vocab.eos_id
        dec_token_mask[i, :len(ans) + 1] = True
        vis = np.asarray(samples[i]["visual"], dtype=np.float64)
        if vis.shape[0] != visual_len:
            raise ValueError(
                f"sample {samples[i]['id']} has visual length {vis.shape[0]}, "
                f"model expects {visual_len}")
        visual[i] = vis

    return Batch(task_id=task_ids.pop(), dataset_id=dataset_id,
                 text_ids=text_ids, visual=visual,
                 enc_token_mask=enc_token_mask, dec_in=dec_in,
                 dec_target=dec_target, dec_token_mask=dec_token_mask)
