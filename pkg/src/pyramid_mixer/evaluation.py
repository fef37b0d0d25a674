"""Full-ranking evaluation and analytic cost accounting.

Evaluation scores every vocabulary item per user, removes items the user
has already interacted with (never the held-out target), and reads off
the target's 1-based rank with index-order tie breaking. Cost accounting
produces closed-form multiply-accumulate and parameter counts per
sub-module, plus the dense-equivalent counts obtained by widening every
latent width to its full axis width.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import PAD_INDEX, UNK_INDEX, SplitView, eval_batches, seen_items
from .errors import ConfigError
from .model import ModelConfig, PyramidMixerNet
from . import tensor as T

log = logging.getLogger(__name__)


def thread_cap() -> int:
    """Evaluation parallelism limit from PYMX_THREADS (default 1)."""
    raw = os.environ.get("PYMX_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PYMX_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"PYMX_THREADS must be >= 1, got {value}")
    return value


@dataclass
class MetricReport:
    """Top-K ranking quality means over the evaluated users."""

    k: int
    hr: float
    ndcg: float
    mrr: float
    users: int

    def as_dict(self) -> dict:
        return {f"hr{self.k}": self.hr, f"ndcg{self.k}": self.ndcg, f"mrr{self.k}": self.mrr, "users": self.users}

    def as_text(self) -> str:
        return (f"users {self.users}  HR@{self.k} {self.hr:.4f}  "
                f"NDCG@{self.k} {self.ndcg:.4f}  MRR@{self.k} {self.mrr:.4f}")


def metrics_from_ranks(ranks: np.ndarray, k: int) -> MetricReport:
    """Aggregate 1-based target ranks into HR/NDCG/MRR@k means."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ConfigError("cannot aggregate metrics over zero users")
    if ranks.min() < 1:
        raise ConfigError(f"ranks must be 1-based, got minimum {ranks.min()}")
    hit = ranks <= k
    hr = float(np.mean(hit))
    ndcg = float(np.mean(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)))
    mrr = float(np.mean(np.where(hit, 1.0 / ranks, 0.0)))
    return MetricReport(k=k, hr=hr, ndcg=ndcg, mrr=mrr, users=int(ranks.size))


def ranks_for_batch(scores: np.ndarray, targets: np.ndarray, excluded: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target among the non-excluded items.

    Ties are broken by item index: an equal-scoring item with a lower
    index outranks the target. ``excluded`` is a (B, V) boolean mask of
    items removed from the candidate set; targets must not be excluded.
    """
    rows = np.arange(scores.shape[0])
    target_scores = scores[rows, targets][:, None]
    candidate = ~excluded
    higher = ((scores > target_scores) & candidate).sum(axis=1)
    tied_before = ((scores == target_scores) & candidate & (np.arange(scores.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    return (1 + higher + tied_before).astype(np.int64)


def evaluate_ranking(net: PyramidMixerNet, split: SplitView, stage: str = "test",
                     k: int = 10, batch_size: int = 256) -> MetricReport:
    """Rank every user's held-out target against the full item vocabulary.

    Parallelism: batches are scored across up to PYMX_THREADS threads over
    frozen parameters; ranks are reassembled in batch order, so the
    result does not depend on scheduling.
    """
    vocab_items = net.config.vocab_sizes[0]
    batches = list(eval_batches(split, net.config.L, batch_size, stage))
    user_index = {split.sequences[i].user_id: i for i in range(len(split))}

    def score_one(batch):
        scores = net.forward(batch.fields, batch.mask).data
        excluded = np.zeros((len(batch.targets), vocab_items), dtype=bool)
        excluded[:, PAD_INDEX] = True
        excluded[:, UNK_INDEX] = True
        for i, user in enumerate(batch.users):
            excluded[i, seen_items(split, user_index[user], stage)] = True
        return ranks_for_batch(scores, batch.targets, excluded)

    workers = thread_cap()
    if workers == 1 or len(batches) <= 1:
        parts = [score_one(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score_one, batches))
    return metrics_from_ranks(np.concatenate(parts), k)


# ---------------------------------------------------------------------------
# cost accounting

COST_MODULES = ("cross_behavior", "cross_feature", "fusion_gate", "period_scaling", "prediction_head")
ENCODER_MODULES = ("cross_behavior", "cross_feature", "fusion_gate", "period_scaling")


@dataclass
class CostReport:
    """Per-sequence forward MACs and parameter counts, low-rank vs dense.

    ``macs``/``params`` map module names to counts for the configured
    model; the ``dense_*`` twins widen every mixer latent to its full
    axis width. ``embedding_params`` is reported separately and excluded
    from the module breakdown. ``increment_ratio`` compares the encoder
    modules (everything except the prediction head) between the two.
    """

    macs: dict[str, int]
    params: dict[str, int]
    dense_macs: dict[str, int]
    dense_params: dict[str, int]
    embedding_params: int

    def total_macs(self) -> int:
        return sum(self.macs.values())

    def total_params(self) -> int:
        return sum(self.params.values()) + self.embedding_params

    def encoder_macs(self, dense: bool = False) -> int:
        source = self.dense_macs if dense else self.macs
        return sum(source[m] for m in ENCODER_MODULES)

    @property
    def increment_ratio(self) -> float:
        dense = self.encoder_macs(dense=True)
        return self.encoder_macs() / dense if dense else 1.0

    def as_dict(self) -> dict:
        return {
            "macs": dict(self.macs),
            "params": dict(self.params),
            "dense_macs": dict(self.dense_macs),
            "dense_params": dict(self.dense_params),
            "embedding_params": self.embedding_params,
            "total_macs": self.total_macs(),
            "total_params": self.total_params(),
            "encoder_increment_ratio": self.increment_ratio,
        }

    def as_text(self) -> str:
        lines = [f"{'module':<18}{'MACs':>14}{'dense MACs':>14}{'params':>10}{'dense':>10}"]
        for m in COST_MODULES:
            lines.append(f"{m:<18}{self.macs[m]:>14}{self.dense_macs[m]:>14}{self.params[m]:>10}{self.dense_params[m]:>10}")
        lines.append(f"{'embeddings':<18}{'-':>14}{'-':>14}{self.embedding_params:>10}{self.embedding_params:>10}")
        lines.append(f"total MACs {self.total_macs()}  total params {self.total_params()}  "
                     f"encoder increment ratio {self.increment_ratio:.4f}")
        return "\n".join(lines)


def _mixer_cost(lengths: list[int], axis_widths: list[int], latents: list[int], other_axis: list[int]):
    """MACs and params for one mixer family over the S layers.

    For layer s the block mixes vectors of width ``axis_widths[s]``
    through ``latents[s]``, applied once per unit of ``other_axis[s]``.
    """
    macs = 0
    params = 0
    for width, latent, per in zip(axis_widths, latents, other_axis):
        macs += 2 * per * width * latent
        params += 2 * width + width * latent + latent + latent * width + width
    return macs, params


def count_cost(config: ModelConfig) -> CostReport:
    """Closed-form per-sequence (B=1) forward MACs and parameter counts."""
    config.validate()
    if not config.vocab_sizes:
        raise ConfigError("cost accounting needs vocab_sizes (and field_names) in the model config")
    lengths = config.scale_lengths()
    S, D, d, K = config.S, config.D, config.d, config.K

    def census(dense: bool):
        macs = {m: 0 for m in COST_MODULES}
        params = {m: 0 for m in COST_MODULES}
        if config.cross_behavior_on:
            latents = [lengths[s] if dense else config.behavior_latent(s) for s in range(S)]
            m, p = _mixer_cost(lengths, lengths, latents, [D] * S)
            macs["cross_behavior"], params["cross_behavior"] = m, p
        if config.cross_feature_on:
            latents = [D if dense else config.feature_latent() for _ in range(S)]
            m, p = _mixer_cost(lengths, [D] * S, latents, lengths)
            macs["cross_feature"], params["cross_feature"] = m, p
        if config.cross_behavior_on and config.cross_feature_on and config.fusion_on:
            macs["fusion_gate"] = sum(lengths) * D
            params["fusion_gate"] = S * (D + 1)
        if config.pyramid_on:
            macs["period_scaling"] = sum(lengths[s + 1] * K * D * D for s in range(S - 1))
            params["period_scaling"] = (S - 1) * K * D * D
        macs["prediction_head"] = S * D * d + d * config.vocab_sizes[0]
        params["prediction_head"] = S * D * d + d
        return macs, params

    macs, params = census(dense=False)
    dense_macs, dense_params = census(dense=True)
    embedding_params = sum(v * d for v in config.vocab_sizes)
    return CostReport(macs=macs, params=params, dense_macs=dense_macs,
                      dense_params=dense_params, embedding_params=embedding_params)


def tally_forward_macs(net: PyramidMixerNet) -> int:
    """Multiplies actually issued by one single-sequence forward pass."""
    fields = np.zeros((1, net.config.L, net.config.F), dtype=np.int32)
    mask = np.ones((1, net.config.L), dtype=bool)
    with T.MacTally() as tally:
        net.forward(fields, mask)
    return tally.total


# ---------------------------------------------------------------------------
# ablation comparison


@dataclass
class VariantResult:
    """Aggregated test metrics for one architecture variant."""

    name: str
    seeds: list[int]
    hr_mean: float
    hr_std: float
    ndcg_mean: float
    ndcg_std: float
    mrr_mean: float
    mrr_std: float
    failed: bool = False

    def as_dict(self) -> dict:
        return {
            "name": self.name, "seeds": list(self.seeds), "failed": self.failed,
            "hr_mean": self.hr_mean, "hr_std": self.hr_std,
            "ndcg_mean": self.ndcg_mean, "ndcg_std": self.ndcg_std,
            "mrr_mean": self.mrr_mean, "mrr_std": self.mrr_std,
        }


def compare_variants(variants: list[tuple[str, ModelConfig]], dataset, settings,
                     seeds: list[int], k: int = 10) -> list[VariantResult]:
    """Train every (name, config) variant once per seed and aggregate test
    metrics. A diverging variant is marked failed instead of aborting the
    sweep; one seed yields zero stds and a warning."""
    from .training import train  # local import, trainer depends on this module

    if not seeds:
        raise ConfigError("compare_variants needs at least one seed")
    if len(seeds) == 1:
        log.warning("one seed only: standard deviations will be zero")
    results = []
    for name, config in variants:
        hr, ndcg, mrr = [], [], []
        failed = False
        for seed in seeds:
            try:
                outcome = train(config, dataset, settings, seed=seed, out_dir=None)
            except Exception as exc:
                log.warning("variant %s diverged at seed %d: %s", name, seed, exc)
                failed = True
                break
            report = evaluate_ranking(outcome.best_net(), dataset.split, stage="test", k=k,
                                      batch_size=settings.batch_size)
            hr.append(report.hr)
            ndcg.append(report.ndcg)
            mrr.append(report.mrr)
        if failed or not hr:
            results.append(VariantResult(name, list(seeds), math.nan, math.nan, math.nan,
                                         math.nan, math.nan, math.nan, failed=True))
        else:
            results.append(VariantResult(
                name, list(seeds),
                float(np.mean(hr)), float(np.std(hr)),
                float(np.mean(ndcg)), float(np.std(ndcg)),
                float(np.mean(mrr)), float(np.std(mrr)),
            ))
    return results


def variants_as_text(results: list[VariantResult]) -> str:
    lines = [f"{'variant':<22}{'HR@10':>16}{'NDCG@10':>16}{'MRR@10':>16}"]
    for r in results:
        if r.failed:
            lines.append(f"{r.name:<22}{'failed':>16}{'failed':>16}{'failed':>16}")
        else:
            lines.append(f"{r.name:<22}{r.hr_mean:>9.4f}±{r.hr_std:<6.4f}"
                         f"{r.ndcg_mean:>9.4f}±{r.ndcg_std:<6.4f}"
                         f"{r.mrr_mean:>9.4f}±{r.mrr_std:<6.4f}")
    return "\n".join(lines)


def variants_as_json(results: list[VariantResult]) -> str:
    return json.dumps([r.as_dict() for r in results], indent=1)


def ablation_variants(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The standard four-way sweep: the full model and the three
    single-switch removals."""
    return [
        ("full", replace(base)),
        ("no_cross_behavior", replace(base, cross_behavior_on=False)),
        ("no_cross_feature", replace(base, cross_feature_on=False)),
        ("no_cross_period", replace(base, pyramid_on=False)),
    ]
