"""Simulated parameter-server training over Gaussian likelihood messages.

Workers pull a snapshot of the global beliefs, run the ordinary online
update over their minibatches locally, and summarize what they learned as a
likelihood message: per touched weight, the natural-parameter difference
between their local posterior and the snapshot they pulled. The server
folds messages in by natural-parameter addition, so the merged state is the
product of the pulled prior with every worker's likelihood, independent of
arrival order.

Messages carry the version of the server state they were computed against.
When a message arrives and nothing else has merged since its pull, adding
the delta back onto the unchanged prior is algebraically the worker's local
posterior, so the server adopts those posterior values directly (exactly,
with no float round trip); under contention it falls back to the general
natural addition with clamping. This keeps single-worker immediate-sync
training bit-identical to plain sequential training while preserving the
merge algebra for the concurrent case.

Everything here is simulated in process with a deterministic schedule: all
workers of a round pull before any of the round's merges apply (maximal
snapshot staleness), and merges apply in a pinned order. A different merge
order can be injected for tests; the algebra makes the result
order-insensitive up to float rounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import SparseInstance, minibatch, negative_sample
from .errors import InvalidConfig
from .gaussians import Gaussian, NaturalGaussian, natural_multiply
from .model import Model, decay_all, update

__all__ = [
    "LikelihoodMessage",
    "ServerState",
    "MergeReport",
    "RoundRecord",
    "TrainingReport",
    "worker_process_batch",
    "server_apply",
    "run_parallel_training",
    "split_stream",
    "MultipleDataPlan",
    "multiple_data_mode",
]


@dataclass
class LikelihoodMessage:
    """One worker's evidence about a stretch of data.

    ``entries`` maps weight id to the natural-parameter delta
    (d_precision, d_precision_mean) between the worker's local posterior
    and the snapshot it pulled; ``posteriors`` carries the local posterior
    (mean, variance) per weight so a version-matched merge can adopt it
    exactly. Keys are ("emb", feature_id, *index) and
    ("dense", layer, row, col).
    """

    worker_id: int = 0
    batch_seq: int = 0
    base_version: int = 0
    entries: dict[tuple, tuple[float, float]] = field(default_factory=dict)
    posteriors: dict[tuple, tuple[float, float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MergeReport:
    applied: int = 0
    clamped: int = 0
    created_features: int = 0
    adopted: bool = False


@dataclass
class ServerState:
    """The global beliefs plus merge bookkeeping."""

    model: Model
    version: int = 0
    messages_applied: int = 0
    messages_dropped: int = 0
    clamped_merges: int = 0
    per_worker_applied: dict[int, int] = field(default_factory=dict)
    per_worker_clamped: dict[int, int] = field(default_factory=dict)

    def snapshot(self) -> tuple[Model, int]:
        return self.model.clone(), self.version

    def decay(self) -> int:
        """Run variance decay on the global model; invalidates snapshots."""
        changed = decay_all(self.model)
        if changed:
            self.version += 1
        return changed


class _PriorStash:
    """Copy-on-first-touch record of the pulled snapshot's weight values."""

    def __init__(self, snapshot: Model):
        self.snapshot = snapshot
        self.dense_priors = [
            (w.means.copy(), w.variances.copy()) for w in snapshot.dense_layers
        ]
        self.emb_priors: dict[int, np.ndarray] = {}

    def note_features(self, instance: SparseInstance):
        for fid in instance.features:
            if fid not in self.emb_priors:
                self.emb_priors[fid] = self.snapshot.embedding.peek(fid).copy()


def _emit_message(
    stash: _PriorStash, worker_id: int, batch_seq: int, base_version: int, touched: bool
) -> LikelihoodMessage:
    msg = LikelihoodMessage(
        worker_id=worker_id, batch_seq=batch_seq, base_version=base_version
    )
    if not touched:
        return msg
    local = stash.snapshot
    shape = local.embedding.vector_shape
    for fid, prior in sorted(stash.emb_priors.items()):
        post = local.embedding.peek(fid)
        d_tau = 1.0 / post[1] - 1.0 / prior[1]
        d_rho = post[0] / post[1] - prior[0] / prior[1]
        for idx in np.ndindex(shape):
            key = ("emb", fid, *idx)
            msg.entries[key] = (float(d_tau[idx]), float(d_rho[idx]))
            msg.posteriors[key] = (float(post[0][idx]), float(post[1][idx]))
    for layer, ((pm, pv), w) in enumerate(zip(stash.dense_priors, local.dense_layers)):
        d_tau = 1.0 / w.variances - 1.0 / pv
        d_rho = w.means / w.variances - pm / pv
        for r in range(w.rows):
            for c in range(w.cols):
                key = ("dense", layer, r, c)
                msg.entries[key] = (float(d_tau[r, c]), float(d_rho[r, c]))
                msg.posteriors[key] = (
                    float(w.means[r, c]),
                    float(w.variances[r, c]),
                )
    return msg


@dataclass
class _CycleStats:
    examples: int = 0
    log_z_sum: float = 0.0
    skipped: int = 0
    clamped: int = 0


def _process_cycle(
    snapshot: Model,
    batches: Sequence[Sequence[SparseInstance]],
    worker_id: int,
    batch_seq: int,
    base_version: int,
    replay: int,
) -> tuple[LikelihoodMessage, _CycleStats]:
    if replay < 1:
        raise InvalidConfig(f"replay must be >= 1, got {replay}")
    stash = _PriorStash(snapshot)
    stats = _CycleStats()
    for batch in batches:
        for _ in range(replay):
            for inst in batch:
                stash.note_features(inst)
                report = update(snapshot, inst)
                stats.examples += 1
                stats.log_z_sum += report.log_z
                stats.skipped += report.skipped_weights
                stats.clamped += report.clamped_weights
    msg = _emit_message(stash, worker_id, batch_seq, base_version, stats.examples > 0)
    return msg, stats


def worker_process_batch(
    snapshot: Model,
    batch: Sequence[SparseInstance],
    worker_id: int = 0,
    batch_seq: int = 0,
    base_version: int = 0,
    replay: int = 1,
) -> LikelihoodMessage:
    """Run the online update over one minibatch on a local snapshot.

    The snapshot is updated example by example in place (it is then
    discarded by the caller); the returned message is the natural-parameter
    ratio of the final local posterior to the pulled prior per touched
    weight, which is exactly the per-example deltas of the accumulation
    rule telescoped over the batch. ``replay > 1`` re-processes the batch
    that many times before emitting, identical to seeing the batch
    repeatedly. An empty batch yields a message with zero entries.
    """
    msg, _ = _process_cycle(
        snapshot, [batch], worker_id, batch_seq, base_version, replay
    )
    return msg


def server_apply(state: ServerState, msg: LikelihoodMessage) -> MergeReport:
    """Fold one likelihood message into the global beliefs.

    Per weight: new natural parameters are old plus delta, with variances
    clamped into [floor, ceiling] (counted, never fatal). Weights the
    server has never seen are created at their deterministic initial belief
    before merging. If no other merge landed since the message's snapshot
    was pulled, the addition is performed exactly by adopting the message's
    posterior values.
    """
    report = MergeReport(adopted=(msg.base_version == state.version))
    model = state.model
    cfg = model.config
    created: set[int] = set()
    for key, (d_tau, d_rho) in msg.entries.items():
        if key[0] == "emb":
            fid = key[1]
            if fid not in model.embedding:
                model.embedding.get_or_create(fid)
                created.add(fid)
            ent = model.embedding.get_strict(fid)
            idx = key[2:]
            if report.adopted:
                new_m, new_v = msg.posteriors[key]
            else:
                merged, clamped = natural_multiply(
                    Gaussian(float(ent[0][idx]), float(ent[1][idx])),
                    NaturalGaussian(d_tau, d_rho),
                    cfg.variance_floor,
                    cfg.variance_ceiling,
                )
                new_m, new_v = merged.mean, merged.variance
                report.clamped += int(clamped)
            ent[0][idx] = new_m
            ent[1][idx] = new_v
        else:
            _, layer, r, c = key
            w = model.dense_layers[layer]
            if report.adopted:
                new_m, new_v = msg.posteriors[key]
            else:
                merged, clamped = natural_multiply(
                    Gaussian(float(w.means[r, c]), float(w.variances[r, c])),
                    NaturalGaussian(d_tau, d_rho),
                    cfg.variance_floor,
                    cfg.variance_ceiling,
                )
                new_m, new_v = merged.mean, merged.variance
                report.clamped += int(clamped)
            w.means[r, c] = new_m
            w.variances[r, c] = new_v
        report.applied += 1
    report.created_features = len(created)
    state.version += 1
    state.messages_applied += 1
    state.clamped_merges += report.clamped
    state.per_worker_applied[msg.worker_id] = (
        state.per_worker_applied.get(msg.worker_id, 0) + 1
    )
    state.per_worker_clamped[msg.worker_id] = (
        state.per_worker_clamped.get(msg.worker_id, 0) + report.clamped
    )
    return report


@dataclass
class RoundRecord:
    round: int
    worker_id: int
    examples: int
    mean_log_z: float
    applied_entries: int
    clamped: int
    dropped: bool = False

    def line(self) -> str:
        return (
            f"round={self.round} worker={self.worker_id} "
            f"examples={self.examples} mean_logz={self.mean_log_z:.6f} "
            f"applied={self.applied_entries} clamped={self.clamped} "
            f"dropped={int(self.dropped)}"
        )


@dataclass
class TrainingReport:
    records: list[RoundRecord] = field(default_factory=list)
    rounds: int = 0
    examples: int = 0
    messages_applied: int = 0
    messages_dropped: int = 0
    clamped_merges: int = 0
    decays: int = 0

    def lines(self) -> list[str]:
        out = [rec.line() for rec in self.records]
        out.append(
            f"total rounds={self.rounds} examples={self.examples} "
            f"applied={self.messages_applied} dropped={self.messages_dropped} "
            f"clamped={self.clamped_merges} decays={self.decays}"
        )
        return out


def run_parallel_training(
    model: Model,
    shards: Sequence[Iterable[SparseInstance]],
    workers: int = 1,
    batch_size: int = 256,
    sync_cadence: int = 1,
    replay: int = 1,
    decay_every: int = 0,
    merge_order: Callable[[list[LikelihoodMessage]], list[LikelihoodMessage]] | None = None,
) -> tuple[Model, TrainingReport]:
    """Drive workers over disjoint shards against one in-process server.

    Each round, every worker still holding data pulls a snapshot of the
    server, processes its next ``sync_cadence`` minibatches locally
    (each re-processed ``replay`` times), and emits one message; the
    round's messages then merge in worker order (or the order imposed by
    ``merge_order``, a test seam). A worker whose cycle raises has its
    message dropped and counted; the server is never corrupted. The passed
    model becomes the server state and is returned trained.
    """
    if workers < 1:
        raise InvalidConfig(f"need at least one worker, got {workers}")
    if len(shards) != workers:
        raise InvalidConfig(
            f"need exactly one shard per worker ({workers}), got {len(shards)}"
        )
    if sync_cadence < 1:
        raise InvalidConfig(f"sync cadence must be >= 1, got {sync_cadence}")
    if replay < 1:
        raise InvalidConfig(f"replay must be >= 1, got {replay}")

    state = ServerState(model)
    report = TrainingReport()
    batch_iters = [minibatch(iter(shard), batch_size) for shard in shards]
    exhausted = [False] * workers
    next_decay = decay_every if decay_every > 0 else None
    round_no = 0

    while not all(exhausted):
        round_no += 1
        # Pull phase: everyone sees the same round-start state.
        pulled: list[tuple[int, Model, int, list]] = []
        for wid in range(workers):
            if exhausted[wid]:
                continue
            batches = list(islice(batch_iters[wid], sync_cadence))
            if not batches:
                exhausted[wid] = True
                continue
            snapshot, base_version = state.snapshot()
            pulled.append((wid, snapshot, base_version, batches))

        # Process phase.
        messages: list[LikelihoodMessage] = []
        stats_by_msg: dict[int, _CycleStats] = {}
        for wid, snapshot, base_version, batches in pulled:
            try:
                msg, stats = _process_cycle(
                    snapshot, batches, wid, round_no, base_version, replay
                )
            except Exception:
                report.messages_dropped += 1
                state.messages_dropped += 1
                report.records.append(
                    RoundRecord(round_no, wid, 0, 0.0, 0, 0, dropped=True)
                )
                continue
            messages.append(msg)
            stats_by_msg[id(msg)] = stats

        # Merge phase, in pinned order.
        ordered = merge_order(messages) if merge_order is not None else messages
        for msg in ordered:
            merge = server_apply(state, msg)
            stats = stats_by_msg[id(msg)]
            report.examples += stats.examples
            mean_log_z = stats.log_z_sum / stats.examples if stats.examples else 0.0
            report.records.append(
                RoundRecord(
                    round_no,
                    msg.worker_id,
                    stats.examples,
                    mean_log_z,
                    merge.applied,
                    merge.clamped,
                )
            )
            report.messages_applied += 1
            report.clamped_merges += merge.clamped

        if next_decay is not None and report.examples >= next_decay:
            state.decay()
            report.decays += 1
            while next_decay <= report.examples:
                next_decay += decay_every

    report.rounds = round_no
    return state.model, report


def split_stream(
    stream: Iterable[SparseInstance], n_shards: int
) -> list[list[SparseInstance]]:
    """Stripe a stream into n disjoint shards, preserving order within each."""
    if n_shards < 1:
        raise InvalidConfig(f"need at least one shard, got {n_shards}")
    shards: list[list[SparseInstance]] = [[] for _ in range(n_shards)]
    for i, inst in enumerate(stream):
        shards[i % n_shards].append(inst)
    return shards


@dataclass
class MultipleDataPlan:
    """Reinforcement setup: worker sets sharing positives, resampling negatives."""

    streams: list[list[SparseInstance]]
    seeds: list[int]
    sample_rate: float

    @property
    def sets(self) -> int:
        return len(self.streams)


def multiple_data_mode(
    base_stream: Iterable[SparseInstance],
    sets: int,
    sample_rate: float,
    seeds: Sequence[int] | None = None,
) -> MultipleDataPlan:
    """Build per-set streams over the same data with distinct sampling seeds.

    Every set sees every positive; each set keeps its own independent
    subsample of the negatives at the shared rate, so the sets agree on
    clicks and disagree (usefully) on non-clicks. All sets merge into one
    server, e.g. ``run_parallel_training(model, plan.streams,
    workers=plan.sets)``.
    """
    if sets < 2:
        raise InvalidConfig(f"multiple-data mode needs >= 2 worker sets, got {sets}")
    if seeds is None:
        seeds = [1009 + 31 * i for i in range(sets)]
    seeds = [int(s) for s in seeds]
    if len(seeds) != sets or len(set(seeds)) != sets:
        raise InvalidConfig("need one distinct sampling seed per worker set")
    if sample_rate == 1.0:
        warnings.warn(
            "sample rate 1.0 keeps every negative: all worker sets will see "
            "identical streams",
            stacklevel=2,
        )
    base = list(base_stream)
    streams = [list(negative_sample(base, sample_rate, seed=s)) for s in seeds]
    return MultipleDataPlan(streams=streams, seeds=seeds, sample_rate=sample_rate)
