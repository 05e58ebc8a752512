"""Model assembly: weight store, prediction, online update, and checkpoints.

A model is an embedding table plus a stack of dense layers, combined by one
of the four embedding ops. Hidden widths are free; the final dense layer is
always scalar. With no hidden layers there are no dense weights at all and
the combined embedding vector is summed straight into the output, which
with the copy op and K=1 degenerates to the classic linear probit model.

``update`` performs one observation's full training step: forward moment
propagation with recording, reverse-mode gradients, then the
moment-matched belief update on every touched weight. ``predict`` is pure;
it never grows or mutates the weight store, and unseen features contribute
their deterministic initial beliefs.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .data import SparseInstance
from .errors import BadRate, CorruptCheckpoint, InvalidConfig
from .gaussians import (
    DEFAULT_VARIANCE_CEILING,
    DEFAULT_VARIANCE_FLOOR,
    Gaussian,
    adf_update_arrays,
    normal_cdf,
    weight_decay,
)
from .layers import (
    BackwardTape,
    DenseLayerWeights,
    EmbeddingOp,
    EmbeddingTable,
    MomentVector,
    backward,
    forward_pass,
    probit_log_z,
)

__all__ = [
    "ModelConfig",
    "Model",
    "UpdateReport",
    "init_model",
    "predict",
    "log_evidence",
    "update",
    "decay_all",
    "calibrate",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "model_from_bytes",
    "get_weight",
    "set_weight",
    "touched_weight_keys",
    "touch",
]

_MAGIC = b"BODL"
_FORMAT_VERSION = 1
_OP_TAGS = {
    EmbeddingOp.COPY: 0,
    EmbeddingOp.DAS: 1,
    EmbeddingOp.FM: 2,
    EmbeddingOp.FFM: 3,
}
_TAG_OPS = {v: k for k, v in _OP_TAGS.items()}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and priors of a model.

    ``f`` is the field count: required for the field-aware op (it sizes
    each feature's embedding block) and for the copy op with hidden layers
    (where the first dense layer's input width is f*k, one feature per
    field). ``hidden_sizes`` may be empty, giving the sum-head degenerate
    architectures.
    """

    embedding_op: EmbeddingOp = EmbeddingOp.DAS
    k: int = 1
    f: int = 0
    hidden_sizes: tuple[int, ...] = ()
    prior_mean_embedding: float = 0.0
    prior_variance: float = 0.01
    init_seed: int = 0
    decay_eps: float = 0.0
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    variance_ceiling: float = DEFAULT_VARIANCE_CEILING

    def __post_init__(self):
        object.__setattr__(self, "embedding_op", EmbeddingOp(self.embedding_op))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def validate(self):
        op = self.embedding_op
        if self.k < 1:
            raise InvalidConfig(f"embedding dimension must be >= 1, got {self.k}")
        if any(h < 1 for h in self.hidden_sizes):
            raise InvalidConfig(f"hidden sizes must be >= 1, got {self.hidden_sizes}")
        if not (self.prior_variance > 0.0 and math.isfinite(self.prior_variance)):
            raise InvalidConfig(f"prior variance must be > 0, got {self.prior_variance}")
        if not (0.0 <= self.decay_eps <= 1.0):
            raise InvalidConfig(f"decay eps must be in [0, 1], got {self.decay_eps}")
        if not (0.0 < self.variance_floor < self.variance_ceiling):
            raise InvalidConfig(
                f"need 0 < floor < ceiling, got {self.variance_floor}, "
                f"{self.variance_ceiling}"
            )
        if not (self.variance_floor <= self.prior_variance <= self.variance_ceiling):
            raise InvalidConfig("prior variance outside [floor, ceiling]")
        if op is EmbeddingOp.FFM and self.f < 1:
            raise InvalidConfig("the field-aware op needs a field count f >= 1")
        if op is EmbeddingOp.COPY and self.hidden_sizes and self.f < 1:
            raise InvalidConfig(
                "copy op with hidden layers needs f >= 1 to fix the input "
                "width (one feature per field)"
            )

    @property
    def vector_shape(self) -> tuple[int, ...]:
        if self.embedding_op is EmbeddingOp.FFM:
            return (self.f, self.k)
        return (self.k,)

    @property
    def op_output_width(self) -> int:
        if self.embedding_op is EmbeddingOp.COPY:
            return self.f * self.k
        return self.k

    def layer_dims(self) -> list[tuple[int, int]]:
        """(rows, cols) of each dense layer, chaining to a scalar output."""
        if not self.hidden_sizes:
            return []
        widths = [self.op_output_width, *self.hidden_sizes, 1]
        return [(widths[i + 1], widths[i] + 1) for i in range(len(widths) - 1)]


@dataclass
class UpdateReport:
    """Outcome of one online update."""

    log_z: float
    skipped_weights: int = 0
    clamped_weights: int = 0


@dataclass
class Model:
    """A full set of Gaussian weights plus bookkeeping counters."""

    config: ModelConfig
    embedding: EmbeddingTable
    dense_layers: list[DenseLayerWeights] = field(default_factory=list)
    update_count: int = 0
    clamp_count: int = 0
    skip_count: int = 0
    sample_rate: float = 1.0  # negative-sampling rate the model was trained at

    def clone(self) -> "Model":
        table = EmbeddingTable(
            self.embedding.vector_shape,
            self.embedding.prior_mean,
            self.embedding.prior_variance,
            self.embedding.init_scale,
            self.embedding.seed,
        )
        table._entries = {fid: ent.copy() for fid, ent in self.embedding.items()}
        dense = [
            DenseLayerWeights(w.means.copy(), w.variances.copy())
            for w in self.dense_layers
        ]
        return Model(
            config=self.config,
            embedding=table,
            dense_layers=dense,
            update_count=self.update_count,
            clamp_count=self.clamp_count,
            skip_count=self.skip_count,
            sample_rate=self.sample_rate,
        )


def init_model(config: ModelConfig) -> Model:
    """Build a fresh model from priors.

    Embedding entries are created on first touch: zero prior mean for the
    copy/sum ops, and a small deterministic per-feature jitter (scale
    sqrt(prior_variance)) for the product ops, whose pair-product gradients
    vanish identically at the all-zero point, so exactly-zero means would
    never move. Dense means are small seeded values for the same
    symmetry-breaking reason; bias means start at zero, and every variance
    starts at the prior.
    """
    config.validate()
    op = config.embedding_op
    init_scale = (
        math.sqrt(config.prior_variance)
        if op in (EmbeddingOp.FM, EmbeddingOp.FFM)
        else 0.0
    )
    if config.prior_mean_embedding != 0.0 and init_scale != 0.0:
        # An explicit nonzero prior mean already breaks the symmetry.
        init_scale = 0.0
    table = EmbeddingTable(
        config.vector_shape,
        prior_mean=config.prior_mean_embedding,
        prior_variance=config.prior_variance,
        init_scale=init_scale,
        seed=config.init_seed,
    )
    rng = np.random.default_rng(config.init_seed)
    scale = math.sqrt(config.prior_variance)
    dense = []
    for rows, cols in config.layer_dims():
        means = rng.standard_normal((rows, cols)) * scale
        means[:, -1] = 0.0
        variances = np.full((rows, cols), config.prior_variance)
        dense.append(DenseLayerWeights(means, variances))
    return Model(config=config, embedding=table, dense_layers=dense)


def _forward(model: Model, instance: SparseInstance, record_tape: bool, insert: bool):
    return forward_pass(
        instance,
        model.embedding,
        model.dense_layers,
        model.config.embedding_op,
        record_tape=record_tape,
        insert=insert,
    )


def predict(model: Model, instance: SparseInstance) -> float:
    """P(y = +1 | x) under the current beliefs. Never mutates the model."""
    z_out, _ = _forward(model, instance, record_tape=False, insert=False)
    m = float(z_out.means[0])
    v = float(z_out.variances[0])
    return normal_cdf(m / math.sqrt(v + 1.0))


def log_evidence(model: Model, instance: SparseInstance) -> float:
    """log Z of the instance's label under the current beliefs (pure)."""
    z_out, _ = _forward(model, instance, record_tape=False, insert=False)
    return probit_log_z(instance.label, z_out)


def _apply_gradients(model: Model, grads: layers.GradientMap) -> tuple[int, int]:
    cfg = model.config
    floor, ceiling = cfg.variance_floor, cfg.variance_ceiling
    skipped = 0
    clamped = 0
    for fid, (g_m, g_v) in grads.embedding.items():
        ent = model.embedding.get_or_create(fid)
        new_m, new_v, skip = adf_update_arrays(ent[0], ent[1], g_m, g_v, floor)
        over = new_v > ceiling
        if over.any():
            new_v = np.where(over, ceiling, new_v)
            clamped += int(over.sum())
        ent[0] = new_m
        ent[1] = new_v
        skipped += int(skip.sum())
    for w, (g_m, g_v) in zip(model.dense_layers, grads.dense):
        new_m, new_v, skip = adf_update_arrays(w.means, w.variances, g_m, g_v, floor)
        over = new_v > ceiling
        if over.any():
            new_v = np.where(over, ceiling, new_v)
            clamped += int(over.sum())
        w.means = new_m
        w.variances = new_v
        skipped += int(skip.sum())
    return skipped, clamped


def update(model: Model, instance: SparseInstance) -> UpdateReport:
    """One full online training step on a single example (in place).

    Forward with recording, reverse-mode gradients, then the belief update
    on every touched weight. Degenerate per-weight updates are skipped and
    counted, never fatal; variances that would exceed the ceiling are
    clamped there and counted.
    """
    z_out, tape = _forward(model, instance, record_tape=True, insert=True)
    log_z = probit_log_z(instance.label, z_out)
    grads = backward(tape, instance.label)
    skipped, clamped = _apply_gradients(model, grads)
    model.update_count += 1
    model.skip_count += skipped
    model.clamp_count += clamped
    return UpdateReport(log_z=log_z, skipped_weights=skipped, clamped_weights=clamped)


def decay_all(model: Model) -> int:
    """Relax every weight variance toward the prior; means are untouched.

    Returns how many variances actually moved. With decay_eps = 0 or all
    variances already at the prior this is zero.
    """
    eps = model.config.decay_eps
    v_prior = model.config.prior_variance
    if eps == 0.0:
        return 0
    changed = 0
    for _, ent in model.embedding.items():
        new_v = weight_decay(ent[1], v_prior, eps)
        changed += int(np.count_nonzero(new_v != ent[1]))
        ent[1] = new_v
    for w in model.dense_layers:
        new_v = weight_decay(w.variances, v_prior, eps)
        changed += int(np.count_nonzero(new_v != w.variances))
        w.variances = np.asarray(new_v)
    return changed


def calibrate(p: float, w: float) -> float:
    """Map a prediction made on negative-sampled data back to the raw rate.

    q = p / (p + (1 - p) / w), the exact correction for keeping negatives
    with probability w during training. Strictly increasing in p, and the
    identity at w = 1.
    """
    if not (0.0 < w <= 1.0):
        raise BadRate(f"sample rate must be in (0, 1], got {w}")
    if not (0.0 < p < 1.0):
        raise ValueError(f"probability must be in (0, 1), got {p}")
    return p / (p + (1.0 - p) / w)


# ---------------------------------------------------------------------------
# Per-weight addressing (used by messages, oracles, and inspection).
# ---------------------------------------------------------------------------


def embedding_weight_keys(model: Model, feature_id: int):
    for idx in np.ndindex(model.config.vector_shape):
        yield ("emb", feature_id, *idx)


def dense_weight_keys(model: Model):
    for layer, w in enumerate(model.dense_layers):
        for r in range(w.rows):
            for c in range(w.cols):
                yield ("dense", layer, r, c)


def touched_weight_keys(model: Model, instance: SparseInstance) -> list[tuple]:
    """Every weight id a forward/backward on this instance involves."""
    keys: list[tuple] = []
    for fid in instance.features:
        keys.extend(embedding_weight_keys(model, fid))
    keys.extend(dense_weight_keys(model))
    return keys


def touch(model: Model, instance: SparseInstance):
    """Materialize the instance's embedding entries at their initial beliefs."""
    for fid in instance.features:
        model.embedding.get_or_create(fid)


def get_weight(model: Model, key: tuple) -> Gaussian:
    if key[0] == "emb":
        ent = model.embedding.get_strict(key[1])
        idx = key[2:]
        return Gaussian(float(ent[0][idx]), float(ent[1][idx]))
    _, layer, r, c = key
    w = model.dense_layers[layer]
    return Gaussian(float(w.means[r, c]), float(w.variances[r, c]))


def set_weight(model: Model, key: tuple, mean: float, variance: float):
    if key[0] == "emb":
        ent = model.embedding.get_strict(key[1])
        idx = key[2:]
        ent[0][idx] = mean
        ent[1][idx] = variance
    else:
        _, layer, r, c = key
        w = model.dense_layers[layer]
        w.means[r, c] = mean
        w.variances[r, c] = variance


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container with a trailing checksum.
# ---------------------------------------------------------------------------


def _pack_payload(model: Model) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(
        struct.pack(
            "<BIII",
            _OP_TAGS[cfg.embedding_op],
            cfg.k,
            cfg.f,
            len(cfg.hidden_sizes),
        )
    )
    for h in cfg.hidden_sizes:
        buf.write(struct.pack("<I", h))
    buf.write(
        struct.pack(
            "<ddddd",
            cfg.prior_mean_embedding,
            cfg.prior_variance,
            cfg.decay_eps,
            cfg.variance_floor,
            cfg.variance_ceiling,
        )
    )
    buf.write(struct.pack("<q", cfg.init_seed))
    buf.write(struct.pack("<d", model.sample_rate))
    buf.write(
        struct.pack("<QQQ", model.update_count, model.clamp_count, model.skip_count)
    )
    buf.write(struct.pack("<Q", len(model.embedding)))
    for fid in sorted(model.embedding.feature_ids()):
        ent = model.embedding.peek(fid)
        n = ent[0].size
        pairs = np.empty(2 * n, dtype="<f8")
        pairs[0::2] = ent[0].ravel()
        pairs[1::2] = ent[1].ravel()
        buf.write(struct.pack("<Q", fid))
        buf.write(pairs.tobytes())
    buf.write(struct.pack("<I", len(model.dense_layers)))
    for w in model.dense_layers:
        buf.write(struct.pack("<II", w.rows, w.cols))
        pairs = np.empty(2 * w.means.size, dtype="<f8")
        pairs[0::2] = w.means.ravel()
        pairs[1::2] = w.variances.ravel()
        buf.write(pairs.tobytes())
    return buf.getvalue()


def _checksum(payload: bytes) -> int:
    return int.from_bytes(
        hashlib.blake2b(payload, digest_size=8).digest(), "little"
    )


def checkpoint_bytes(model: Model) -> bytes:
    payload = _pack_payload(model)
    return (
        _MAGIC
        + struct.pack("<I", _FORMAT_VERSION)
        + payload
        + struct.pack("<Q", _checksum(payload))
    )


def save_checkpoint(model: Model, destination: str):
    with open(destination, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(blob: bytes) -> Model:
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _FORMAT_VERSION:
        raise CorruptCheckpoint(f"unsupported format version {version}")
    payload = blob[8:-8]
    (stored_sum,) = struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored_sum:
        raise CorruptCheckpoint("checksum mismatch")

    r = _Reader(payload)
    op_tag, k, f, n_hidden = r.unpack("<BIII")
    if op_tag not in _TAG_OPS:
        raise CorruptCheckpoint(f"unknown op tag {op_tag}")
    hidden = tuple(r.unpack("<I")[0] for _ in range(n_hidden))
    pm, pv, eps, floor, ceiling = r.unpack("<ddddd")
    (seed,) = r.unpack("<q")
    (sample_rate,) = r.unpack("<d")
    update_count, clamp_count, skip_count = r.unpack("<QQQ")
    config = ModelConfig(
        embedding_op=_TAG_OPS[op_tag],
        k=k,
        f=f,
        hidden_sizes=hidden,
        prior_mean_embedding=pm,
        prior_variance=pv,
        init_seed=seed,
        decay_eps=eps,
        variance_floor=floor,
        variance_ceiling=ceiling,
    )
    try:
        config.validate()
    except InvalidConfig as exc:
        raise CorruptCheckpoint(f"invalid stored config: {exc}") from exc

    model = init_model(config)
    model.sample_rate = sample_rate
    model.update_count = update_count
    model.clamp_count = clamp_count
    model.skip_count = skip_count

    (n_entries,) = r.unpack("<Q")
    shape = config.vector_shape
    n_scalars = int(np.prod(shape))
    for _ in range(n_entries):
        (fid,) = r.unpack("<Q")
        pairs = np.frombuffer(r.take(16 * n_scalars), dtype="<f8")
        ent = np.empty((2, *shape))
        ent[0] = pairs[0::2].reshape(shape)
        ent[1] = pairs[1::2].reshape(shape)
        model.embedding._entries[fid] = ent
    (n_layers,) = r.unpack("<I")
    dims = config.layer_dims()
    if n_layers != len(dims):
        raise CorruptCheckpoint(
            f"layer count {n_layers} does not match architecture ({len(dims)})"
        )
    dense = []
    for rows_expect, cols_expect in dims:
        rows, cols = r.unpack("<II")
        if (rows, cols) != (rows_expect, cols_expect):
            raise CorruptCheckpoint(
                f"layer shape {(rows, cols)} does not chain "
                f"(expected {(rows_expect, cols_expect)})"
            )
        pairs = np.frombuffer(r.take(16 * rows * cols), dtype="<f8")
        dense.append(
            DenseLayerWeights(
                pairs[0::2].reshape(rows, cols).copy(),
                pairs[1::2].reshape(rows, cols).copy(),
            )
        )
    model.dense_layers = dense
    if r.pos != len(payload):
        raise CorruptCheckpoint("trailing bytes after weights")
    return model


def load_checkpoint(source: str) -> Model:
    try:
        with open(source, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint: {exc}") from exc
    return model_from_bytes(blob)
