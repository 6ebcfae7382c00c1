"""Zero-shot retrieval metrics, open-ended generation accuracy, and the
ablation-grid runner.

Evaluation never mutates model parameters; retrieval rank ties break toward
the lower gallery index so results are deterministic.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, asdict, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .data import (SceneConfig, Vocabulary, detokenize, make_batch,
                   scene_objects, caption_for, split_seeds)
from .model import Mammut


@dataclass(frozen=True)
class MetricsRecord:
    task: str
    split: str
    metric: str  # "r@1" / "r@5" / "r@10" / "exact_match"
    value: float
    config_fingerprint: str
    step: int

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"metric value {self.value} outside [0, 1]")


def config_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _ranks(sim: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Rank of the gold item per query row; ties go to the lower index."""
    q = np.arange(sim.shape[0])
    gold_scores = sim[q, gold]
    higher = (sim > gold_scores[:, None]).sum(axis=1)
    tied_lower = ((sim == gold_scores[:, None])
                  & (np.arange(sim.shape[1])[None, :] < gold[:, None])).sum(axis=1)
    return higher + tied_lower


def retrieval_recall(v: np.ndarray, l: np.ndarray, pair_index: np.ndarray,
                     ks: Iterable[int]) -> dict[str, dict[int, float]]:
    """Recall@K for image-to-text and text-to-image retrieval.

    v: Q x d unit image embeddings; l: G x d unit text embeddings;
    pair_index[i] is the gold text for image i (a bijection when Q == G,
    which text-to-image needs to invert).
    """
    ks = sorted(int(k) for k in ks)
    if ks and ks[-1] > l.shape[0]:
        raise ValueError(f"K={ks[-1]} exceeds gallery size {l.shape[0]}")
    pair_index = np.asarray(pair_index)
    sim = v @ l.T
    i2t_ranks = _ranks(sim, pair_index)
    inverse = np.empty_like(pair_index)
    inverse[pair_index] = np.arange(len(pair_index))
    t2i_ranks = _ranks(sim.T, inverse)
    return {
        "i2t": {k: float((i2t_ranks < k).mean()) for k in ks},
        "t2i": {k: float((t2i_ranks < k).mean()) for k in ks},
    }


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def open_ended_accuracy(model: Mammut, visual_tokens, prompts: np.ndarray,
                        answers: list[str], vocab: Vocabulary,
                        max_len: int | None = None) -> float:
    """Exact-match accuracy of greedy generations against gold answers,
    after lowercasing and whitespace collapsing."""
    outs = model.generate(visual_tokens, prompts, eos_id=vocab.eos_id,
                          max_len=max_len, pad_id=vocab.pad_id)
    hits = sum(normalize_answer(detokenize(o, vocab)) == normalize_answer(a)
               for o, a in zip(outs, answers))
    return hits / len(answers)


def build_eval_gallery(scene_cfg: SceneConfig, split: str, size: int,
                       scan_limit: int = 200_000) -> list[int]:
    """Held-out pairs with pairwise-distinct captions, so rank-1 retrieval
    and exact pairing are well defined."""
    seen: set[str] = set()
    out: list[int] = []
    for seed in split_seeds(split, scene_cfg, scan_limit):
        caption = caption_for(scene_objects(seed, scene_cfg))
        if caption in seen:
            continue
        seen.add(caption)
        out.append(seed)
        if len(out) == size:
            return out
    raise ValueError(f"could not collect {size} distinct captions in {split}")


def embed_gallery(model: Mammut, scene_cfg: SceneConfig, vocab: Vocabulary,
                  seeds, text_len: int, batch_size: int = 64):
    """Eval-view embeddings for the gallery: returns (v, l, batches)."""
    vs, ls, caps, vises = [], [], [], []
    with T.no_grad():
        for lo in range(0, len(seeds), batch_size):
            chunk = seeds[lo:lo + batch_size]
            batch = make_batch(scene_cfg, vocab, chunk, text_len)
            vis, v = model.encode_and_pool(batch.patches)
            l = model.contrastive_pass(batch.tokens)
            vs.append(v.data.copy())
            ls.append(l.data.copy())
            vises.append(vis.data.copy())
            caps.extend(batch.captions)
    return np.concatenate(vs), np.concatenate(ls), np.concatenate(vises), caps


def evaluate_retrieval(model: Mammut, scene_cfg: SceneConfig,
                       vocab: Vocabulary, text_len: int, gallery_size: int,
                       split: str = "val",
                       ks=(1, 5, 10)) -> dict[str, dict[int, float]]:
    seeds = build_eval_gallery(scene_cfg, split, gallery_size)
    v, l, _, _ = embed_gallery(model, scene_cfg, vocab, seeds, text_len)
    return retrieval_recall(v, l, np.arange(len(seeds)), ks)


def evaluate_captioning(model: Mammut, scene_cfg: SceneConfig,
                        vocab: Vocabulary, text_len: int, n: int,
                        split: str = "val", batch_size: int = 64) -> float:
    seeds = build_eval_gallery(scene_cfg, split, n)
    total = 0.0
    with T.no_grad():
        for lo in range(0, len(seeds), batch_size):
            chunk = seeds[lo:lo + batch_size]
            batch = make_batch(scene_cfg, vocab, chunk, text_len)
            vis, _ = model.encode_and_pool(batch.patches)
            prompts = np.full((len(chunk), 1), vocab.bos_id, dtype=np.int64)
            total += open_ended_accuracy(model, vis, prompts, batch.captions,
                                         vocab) * len(chunk)
    return total / len(seeds)


def parameter_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# ablation grid


def grid_points(axes: dict[str, list]) -> list[dict]:
    """Cartesian product of config mutations; empty axes -> [{}]."""
    points = [{}]
    for key, values in axes.items():
        points = [dict(p, **{key: v}) for p in points for v in values]
    return points


def run_ablation_grid(base_overrides: dict, axes: dict[str, list],
                      train_fn, out_csv=None, out_jsonl=None) -> list[MetricsRecord]:
    """Train one variant per grid point from an identical seed and collect
    MetricsRecords; no ordering between variants is asserted.

    train_fn(overrides) -> (fingerprint, step, {metric_name: value}) runs one
    training + evaluation under `base_overrides + overrides`.
    """
    records: list[MetricsRecord] = []
    for point in grid_points(axes):
        overrides = dict(base_overrides)
        overrides.update(point)
        fingerprint, step, metrics = train_fn(overrides)
        for name, value in metrics.items():
            task = "retrieval" if name.startswith("r@") else "caption"
            records.append(MetricsRecord(task=task, split="val", metric=name,
                                         value=value,
                                         config_fingerprint=fingerprint,
                                         step=step))
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(asdict(records[0])))
            writer.writeheader()
            for r in records:
                writer.writerow(asdict(r))
    if out_jsonl:
        with open(out_jsonl, "w") as fh:
            for r in records:
                fh.write(json.dumps(asdict(r)) + "\n")
    return records
