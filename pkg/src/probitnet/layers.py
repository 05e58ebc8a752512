"""Moment propagation through network layers, and its reverse-mode gradients.

Activations are never sampled: each layer maps the (mean, variance) pairs of
its Gaussian inputs to the (mean, variance) pairs of its outputs by moment
matching under an independence assumption. The layer kinds are

* an embedding gather that turns sparse (field, feature) pairs into the
  per-feature Gaussian vectors stored in an :class:`EmbeddingTable`,
* four parameterless combination ops over the gathered vectors:
  plain copy/concatenation, a dimension-aware sum, a factorization-machine
  pairwise product collapsed to a fast O(M*K) form, and its field-aware
  variant in O(F*K*M + K*F^2),
* dense layers with Gaussian weights and a trailing bias column,
  normalized by 1/sqrt(fan_in + 1),
* rectified-linear moments (the exact mean/variance of max(0, X) for
  Gaussian X),
* the probit head's log evidence log Phi(y * m / sqrt(v + 1)).

``forward_pass`` composes them and can record a :class:`BackwardTape`;
``backward`` replays the tape in reverse, producing d(log Z)/d(mean) and
d(log Z)/d(variance) for every weight the example touched. The brute-force
pair sums (``fm_forward_bruteforce``, ``ffm_forward_bruteforce``) exist only
as independent checks on the fast forms and share none of their arithmetic.

The module-level operation counter, enabled via :func:`count_operations`,
tallies elementwise array work inside the FM/FFM forms so tests can verify
the advertised complexity without taxing normal runs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import SparseInstance
from .errors import FieldOutOfRange, ImproperGaussian, ShapeMismatch, StaleTape, UnknownFeature
from .gaussians import AdfGradient, inverse_mills, normal_cdf, normal_log_cdf, normal_pdf

__all__ = [
    "EmbeddingOp",
    "MomentVector",
    "EmbeddingTable",
    "DenseLayerWeights",
    "BackwardTape",
    "GradientMap",
    "count_operations",
    "op_counter",
    "embed_forward",
    "copy_op_forward",
    "das_forward",
    "fm_forward",
    "fm_forward_bruteforce",
    "ffm_forward",
    "ffm_forward_bruteforce",
    "dense_forward",
    "relu_moments",
    "probit_log_z",
    "forward_pass",
    "backward",
]

# Beyond this many standard deviations the rectifier is numerically exact
# identity (or exactly dead); the tail formulas are skipped entirely.
_RELU_TAIL = 37.0


class EmbeddingOp(str, Enum):
    """How the gathered per-feature vectors are combined into one vector."""

    COPY = "copy"
    DAS = "das"  # dimension-aware sum
    FM = "fm"
    FFM = "ffm"


class _OperationCounter:
    """Tally of elementwise array operations, active only inside tests."""

    __slots__ = ("active", "count")

    def __init__(self):
        self.active = False
        self.count = 0


op_counter = _OperationCounter()


@contextmanager
def count_operations():
    """Enable the operation counter for the duration of the block."""
    op_counter.active = True
    op_counter.count = 0
    try:
        yield op_counter
    finally:
        op_counter.active = False


def _tick(n: int):
    if op_counter.active:
        op_counter.count += n


@dataclass
class MomentVector:
    """Elementwise means and variances of a vector of activations.

    Deterministic entries carry variance exactly 0; everything else must be
    nonnegative. Shapes beyond 1-D are allowed (gathered embeddings are
    (M, K) or (M, F, K)) as long as means and variances agree.
    """

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape:
            raise ShapeMismatch(
                f"means {self.means.shape} vs variances {self.variances.shape}"
            )
        if self.variances.size and float(self.variances.min(initial=0.0)) < 0.0:
            raise ImproperGaussian("negative activation variance")

    def __len__(self) -> int:
        return len(self.means)


class EmbeddingTable:
    """Lazily grown map from feature id to a vector of Gaussian weights.

    Entries are (2, *vector_shape) float64 arrays: row 0 means, row 1
    variances. A feature's initial entry is a pure function of
    (seed, feature id), never of encounter order, so independently grown
    replicas of the same table agree exactly.
    """

    def __init__(
        self,
        vector_shape: tuple[int, ...],
        prior_mean: float = 0.0,
        prior_variance: float = 0.01,
        init_scale: float = 0.0,
        seed: int = 0,
    ):
        if prior_variance <= 0.0:
            raise ImproperGaussian(f"prior variance must be > 0, got {prior_variance}")
        self.vector_shape = tuple(int(s) for s in vector_shape)
        self.prior_mean = float(prior_mean)
        self.prior_variance = float(prior_variance)
        self.init_scale = float(init_scale)
        self.seed = int(seed)
        self._entries: dict[int, np.ndarray] = {}

    def default_entry(self, feature_id: int) -> np.ndarray:
        """The entry a feature would be created with (not stored)."""
        ent = np.empty((2, *self.vector_shape), dtype=np.float64)
        if self.init_scale != 0.0:
            rng = np.random.default_rng((self.seed, int(feature_id)))
            ent[0] = self.prior_mean + self.init_scale * rng.standard_normal(
                self.vector_shape
            )
        else:
            ent[0] = self.prior_mean
        ent[1] = self.prior_variance
        return ent

    def get_or_create(self, feature_id: int) -> np.ndarray:
        ent = self._entries.get(feature_id)
        if ent is None:
            ent = self.default_entry(feature_id)
            self._entries[feature_id] = ent
        return ent

    def peek(self, feature_id: int) -> np.ndarray:
        """Entry for a feature without growing the table (default if absent)."""
        ent = self._entries.get(feature_id)
        return self.default_entry(feature_id) if ent is None else ent

    def get_strict(self, feature_id: int) -> np.ndarray:
        ent = self._entries.get(feature_id)
        if ent is None:
            raise UnknownFeature(f"feature {feature_id} was never initialized")
        return ent

    def __contains__(self, feature_id: int) -> bool:
        return feature_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def feature_ids(self):
        return self._entries.keys()

    def items(self):
        return self._entries.items()


@dataclass
class DenseLayerWeights:
    """Gaussian weight matrix of one dense layer; last column is the bias."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape != self.variances.shape:
            raise ShapeMismatch(
                f"weight matrices must be 2-D and aligned, got {self.means.shape} "
                f"vs {self.variances.shape}"
            )
        if not (np.isfinite(self.means).all() and np.isfinite(self.variances).all()):
            raise ImproperGaussian("non-finite dense weight")
        if float(self.variances.min()) <= 0.0:
            raise ImproperGaussian("dense weight variance must be > 0")

    @property
    def rows(self) -> int:
        return self.means.shape[0]

    @property
    def cols(self) -> int:
        return self.means.shape[1]


def _colsums(a: np.ndarray) -> np.ndarray:
    """Correctly rounded per-column sums (order independent, unlike np.sum)."""
    flat = a.reshape(a.shape[0], -1)
    out = np.fromiter(
        (math.fsum(flat[:, j]) for j in range(flat.shape[1])),
        dtype=np.float64,
        count=flat.shape[1],
    )
    return out.reshape(a.shape[1:])


def embed_forward(
    instance: SparseInstance,
    table: EmbeddingTable,
    auto_init: bool = True,
    insert: bool = False,
) -> MomentVector:
    """Gather the per-feature Gaussian vectors of an instance, in order.

    ``insert=True`` grows the table on first touch (training); the default
    leaves the table untouched and uses each missing feature's deterministic
    initial entry (prediction). With ``auto_init=False`` a missing feature
    raises :class:`UnknownFeature` instead.
    """
    if insert:
        rows = [table.get_or_create(f) for f in instance.features]
    elif auto_init:
        rows = [table.peek(f) for f in instance.features]
    else:
        rows = [table.get_strict(f) for f in instance.features]
    gathered = np.stack(rows)  # (M, 2, *vector_shape)
    return MomentVector(gathered[:, 0], gathered[:, 1])


def copy_op_forward(z_e: MomentVector) -> MomentVector:
    """Identity op: the gathered vectors, concatenated flat."""
    return MomentVector(z_e.means.ravel().copy(), z_e.variances.ravel().copy())


def das_forward(z_e: MomentVector) -> MomentVector:
    """Dimension-aware sum over features: independent Gaussians add."""
    if z_e.means.ndim != 2:
        raise ShapeMismatch(f"expected (M, K) input, got {z_e.means.shape}")
    return MomentVector(z_e.means.sum(axis=0), z_e.variances.sum(axis=0))


def _fm_fast(m: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fast pairwise-product moments over the leading axis, O(M*K).

    mean_k = (1/2) [ (sum_i m_ik)^2 - sum_i m_ik^2 ]
    var_k  = (1/2) [ (sum_i s_ik)^2 - sum_i s_ik^2 ]
           - (1/2) [ (sum_i m_ik^2)^2 - sum_i m_ik^4 ]      with s = m^2 + v
    """
    k = m.shape[1:]
    if m.shape[0] < 2:
        return np.zeros(k), np.zeros(k)
    m2 = m * m
    sm = m2 + v
    sm2 = sm * sm
    m4 = m2 * m2
    _tick(5 * m.size)
    s_m = _colsums(m)
    q_m = _colsums(m2)
    s_sm = _colsums(sm)
    q_sm = _colsums(sm2)
    q_m4 = _colsums(m4)
    _tick(5 * m.size)
    mean = 0.5 * (s_m * s_m - q_m)
    var = 0.5 * (s_sm * s_sm - q_sm) - 0.5 * (q_m * q_m - q_m4)
    _tick(8 * mean.size)
    return mean, np.maximum(var, 0.0)


def fm_forward(z_e: MomentVector) -> MomentVector:
    """Moments of the pairwise interaction sum_{i<j} z_i,k * z_j,k per dim k.

    Uses the square-of-sums form, so the cost is linear in the number of
    active features. Fewer than two features means an empty pair sum: the
    output is the zero moment vector, not an error, because streaming data
    legitimately contains single-feature instances.
    """
    if z_e.means.ndim != 2:
        raise ShapeMismatch(f"expected (M, K) input, got {z_e.means.shape}")
    mean, var = _fm_fast(z_e.means, z_e.variances)
    return MomentVector(mean, var)


def fm_forward_bruteforce(z_e: MomentVector) -> MomentVector:
    """Reference pairwise sum in O(M^2 K); verification oracle for fm_forward.

    Accumulates per-pair product moments under independence:
    mean += m_i m_j ; var += s_i s_j - m_i^2 m_j^2, then sums the pair terms
    exactly so the result is independent of feature order.
    """
    if z_e.means.ndim != 2:
        raise ShapeMismatch(f"expected (M, K) input, got {z_e.means.shape}")
    m, v = z_e.means, z_e.variances
    n, k = m.shape
    if n < 2:
        return MomentVector(np.zeros(k), np.zeros(k))
    m2 = m * m
    sm = m2 + v
    mean_terms = []
    var_terms = []
    for i in range(n):
        for j in range(i + 1, n):
            mean_terms.append(m[i] * m[j])
            var_terms.append(sm[i] * sm[j] - m2[i] * m2[j])
            _tick(6 * k)
    mean = _colsums(np.stack(mean_terms))
    var = _colsums(np.stack(var_terms))
    return MomentVector(mean, np.maximum(var, 0.0))


def _check_fields(fields, f_count: int) -> np.ndarray:
    arr = np.asarray(fields, dtype=np.int64)
    if arr.size and (arr.min() < 1 or arr.max() > f_count):
        raise FieldOutOfRange(
            f"field ids must lie in 1..{f_count}, got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr


def _ffm_group_sums(m: np.ndarray, v: np.ndarray, fields: np.ndarray, f_count: int):
    """Per-source-field sums of the full (F, K) blocks, exactly rounded.

    ``sums_m[a, b, :]`` is the sum over features in field a+1 of their row
    for target field b+1.
    """
    f, k = m.shape[1], m.shape[2]
    sums_m = np.zeros((f_count, f, k))
    sums_v = np.zeros((f_count, f, k))
    for a in range(f_count):
        mask = fields == a + 1
        if mask.any():
            sums_m[a] = _colsums(m[mask])
            sums_v[a] = _colsums(v[mask])
            _tick(2 * int(mask.sum()) * f * k)
    return sums_m, sums_v


def ffm_forward(z_e: MomentVector, fields) -> MomentVector:
    """Field-aware pairwise interaction sum_{i<j} z_{i,f_j,k} * z_{j,f_i,k}.

    Decomposed into within-field terms (the FM fast form applied to each
    field's own-field rows) and cross-field terms (products of two
    independent group sums), which brings the cost down from O(K M^2) to
    O(F K M + K F^2). Fields are 1-based and validated against the F axis
    of the input.
    """
    if z_e.means.ndim != 3:
        raise ShapeMismatch(f"expected (M, F, K) input, got {z_e.means.shape}")
    m, v = z_e.means, z_e.variances
    n, f_count, k = m.shape
    fields = _check_fields(fields, f_count)
    if fields.shape != (n,):
        raise ShapeMismatch(f"need one field id per feature, got {fields.shape}")
    if n < 2:
        return MomentVector(np.zeros(k), np.zeros(k))

    mean = np.zeros(k)
    var = np.zeros(k)
    # Within-field pairs: FM fast form on field f's own-field rows.
    for f in range(f_count):
        mask = fields == f + 1
        if int(mask.sum()) >= 2:
            a_mean, a_var = _fm_fast(m[mask, f, :], v[mask, f, :])
            mean += a_mean
            var += a_var
    # Cross-field pairs: products of two independent sums.
    sums_m, sums_v = _ffm_group_sums(m, v, fields, f_count)
    for a in range(f_count):
        for b in range(a + 1, f_count):
            s1m, s1v = sums_m[a, b], sums_v[a, b]
            s2m, s2v = sums_m[b, a], sums_v[b, a]
            mean += s1m * s2m
            var += s1m * s1m * s2v + s2m * s2m * s1v + s1v * s2v
            _tick(12 * k)
    return MomentVector(mean, np.maximum(var, 0.0))


def ffm_forward_bruteforce(z_e: MomentVector, fields) -> MomentVector:
    """Reference field-aware pair sum in O(M^2 K); oracle for ffm_forward."""
    if z_e.means.ndim != 3:
        raise ShapeMismatch(f"expected (M, F, K) input, got {z_e.means.shape}")
    m, v = z_e.means, z_e.variances
    n, f_count, k = m.shape
    fields = _check_fields(fields, f_count)
    if fields.shape != (n,):
        raise ShapeMismatch(f"need one field id per feature, got {fields.shape}")
    if n < 2:
        return MomentVector(np.zeros(k), np.zeros(k))
    mean_terms = []
    var_terms = []
    for i in range(n):
        for j in range(i + 1, n):
            mi = m[i, fields[j] - 1]
            vi = v[i, fields[j] - 1]
            mj = m[j, fields[i] - 1]
            vj = v[j, fields[i] - 1]
            smi = mi * mi + vi
            smj = mj * mj + vj
            mean_terms.append(mi * mj)
            var_terms.append(smi * smj - mi * mi * mj * mj)
            _tick(10 * k)
    mean = _colsums(np.stack(mean_terms))
    var = _colsums(np.stack(var_terms))
    return MomentVector(mean, np.maximum(var, 0.0))


def dense_forward(z_in: MomentVector, weights: DenseLayerWeights) -> MomentVector:
    """Moment-matched affine layer a = W [z; 1] / sqrt(V + 1).

    The deterministic bias unit (mean 1, variance 0) is appended here; the
    weight matrix must provide the matching trailing column. Mean and
    variance of each output are exact for independent Gaussian weights and
    inputs:

        m_a = W_m z_m / sqrt(V+1)
        v_a = [W_v z_v + (W_m o W_m) z_v + W_v (z_m o z_m)] / (V+1)
    """
    if z_in.means.ndim != 1:
        raise ShapeMismatch(f"dense input must be 1-D, got {z_in.means.shape}")
    v_in = len(z_in)
    if weights.cols != v_in + 1:
        raise ShapeMismatch(
            f"weights have {weights.cols} columns, input width {v_in} needs "
            f"{v_in + 1} (bias)"
        )
    zm = np.append(z_in.means, 1.0)
    zv = np.append(z_in.variances, 0.0)
    wm, wv = weights.means, weights.variances
    scale = 1.0 / math.sqrt(v_in + 1)
    mean = (wm @ zm) * scale
    var = (wv @ zv + (wm * wm) @ zv + wv @ (zm * zm)) * (scale * scale)
    return MomentVector(mean, var)


def relu_moments(a: MomentVector) -> MomentVector:
    """Mean and variance of max(0, X) for elementwise Gaussian X.

    With alpha = m/sqrt(v), gamma = phi(alpha)/Phi(alpha) and
    v' = m + sqrt(v) gamma:

        mean = Phi(alpha) v'
        var  = mean Phi(-alpha) v' + Phi(alpha) v (1 - gamma (gamma + alpha))

    Deterministic entries (v = 0) pass through as max(0, m); entries more
    than 37 sigma from the kink use the exact limiting branch (identity or
    zero) since the correction terms underflow there anyway.
    """
    m = np.asarray(a.means, dtype=np.float64)
    v = np.asarray(a.variances, dtype=np.float64)
    out_m = np.zeros_like(m)
    out_v = np.zeros_like(v)

    det = v == 0.0
    if det.any():
        out_m[det] = np.maximum(m[det], 0.0)

    stoch = ~det
    if stoch.any():
        ms, vs = m[stoch], v[stoch]
        sd = np.sqrt(vs)
        alpha = ms / sd
        mean_s = np.empty_like(ms)
        var_s = np.empty_like(vs)

        hi = alpha >= _RELU_TAIL
        lo = alpha <= -_RELU_TAIL
        mid = ~(hi | lo)
        mean_s[hi] = ms[hi]
        var_s[hi] = vs[hi]
        mean_s[lo] = 0.0
        var_s[lo] = 0.0
        if mid.any():
            am = alpha[mid]
            cdf = normal_cdf(am)
            gamma = inverse_mills(am)
            vprime = ms[mid] + sd[mid] * gamma
            mean_mid = cdf * vprime
            var_mid = mean_mid * (1.0 - cdf) * vprime + cdf * vs[mid] * (
                1.0 - gamma * (gamma + am)
            )
            mean_s[mid] = mean_mid
            var_s[mid] = np.maximum(var_mid, 0.0)
        out_m[stoch] = mean_s
        out_v[stoch] = var_s
    return MomentVector(out_m, out_v)


def probit_log_z(y: int, z_out: MomentVector) -> float:
    """Log evidence of a sign label under the network's Gaussian output.

    log Z = log Phi(y * m / sqrt(v + 1)); the unit additive noise of the
    sign likelihood contributes the +1. Stable for arguments far below -37
    via the log-CDF.
    """
    if y not in (-1, 1):
        raise ValueError(f"label must be +1 or -1, got {y}")
    if len(z_out) != 1:
        raise ShapeMismatch(f"output must be scalar, got length {len(z_out)}")
    m = float(z_out.means[0])
    v = float(z_out.variances[0])
    return normal_log_cdf(y * m / math.sqrt(v + 1.0))


# ---------------------------------------------------------------------------
# Composed forward pass with recording, and the reverse pass.
# ---------------------------------------------------------------------------


@dataclass
class BackwardTape:
    """Everything the reverse pass needs, recorded during one forward pass.

    Replaying the forward from the recorded inputs reproduces the recorded
    outputs bit for bit. Tapes are single use: backward marks them consumed.
    """

    instance: SparseInstance
    op_kind: EmbeddingOp
    emb: MomentVector  # gathered (M, K) or (M, F, K), a private copy
    z0: MomentVector
    dense_inputs: list[MomentVector] = field(default_factory=list)
    dense_weights: list[DenseLayerWeights] = field(default_factory=list)
    pre_acts: list[MomentVector] = field(default_factory=list)
    z_out: MomentVector | None = None
    sum_head: bool = False
    consumed: bool = False


@dataclass
class GradientMap:
    """d(log Z) with respect to every weight one example touched.

    ``embedding`` maps feature id to (d_mean, d_variance) arrays in the
    entry's vector shape; ``dense`` lists (d_mean, d_variance) matrices per
    layer. ``by_weight`` flattens to per-scalar addressing for oracles.
    """

    embedding: dict[int, tuple[np.ndarray, np.ndarray]]
    dense: list[tuple[np.ndarray, np.ndarray]]

    def by_weight(self):
        for fid, (gm, gv) in self.embedding.items():
            for idx in np.ndindex(gm.shape):
                yield ("emb", fid, *idx), AdfGradient(float(gm[idx]), float(gv[idx]))
        for layer, (gm, gv) in enumerate(self.dense):
            for r in range(gm.shape[0]):
                for c in range(gm.shape[1]):
                    yield ("dense", layer, r, c), AdfGradient(
                        float(gm[r, c]), float(gv[r, c])
                    )

    def as_dict(self) -> dict[tuple, AdfGradient]:
        return dict(self.by_weight())


def _apply_op(op_kind: EmbeddingOp, emb: MomentVector, fields) -> MomentVector:
    if op_kind is EmbeddingOp.COPY:
        return copy_op_forward(emb)
    if op_kind is EmbeddingOp.DAS:
        return das_forward(emb)
    if op_kind is EmbeddingOp.FM:
        return fm_forward(emb)
    if op_kind is EmbeddingOp.FFM:
        return ffm_forward(emb, fields)
    raise ShapeMismatch(f"unknown op {op_kind!r}")


def forward_pass(
    instance: SparseInstance,
    table: EmbeddingTable,
    dense_layers: list[DenseLayerWeights],
    op_kind: EmbeddingOp,
    record_tape: bool = False,
    insert: bool = False,
    auto_init: bool = True,
) -> tuple[MomentVector, BackwardTape | None]:
    """Propagate an instance's activation moments to the scalar output.

    Dense layers are applied with rectifier moments between them and none
    after the last; with no dense layers the combined embedding vector is
    summed directly into the scalar output. Returns the output moments and,
    when ``record_tape`` is set, the tape for :func:`backward`.
    """
    emb = embed_forward(instance, table, auto_init=auto_init, insert=insert)
    z0 = _apply_op(op_kind, emb, instance.fields)

    tape = None
    if record_tape:
        tape = BackwardTape(instance=instance, op_kind=op_kind, emb=emb, z0=z0)

    if dense_layers:
        if op_kind is EmbeddingOp.COPY and len(z0) != dense_layers[0].cols - 1:
            raise ShapeMismatch(
                f"copy op produced width {len(z0)} but the first dense layer "
                f"expects {dense_layers[0].cols - 1}"
            )
        cur = z0
        last = len(dense_layers) - 1
        for i, w in enumerate(dense_layers):
            act = dense_forward(cur, w)
            if record_tape:
                tape.dense_inputs.append(cur)
                tape.dense_weights.append(w)
                tape.pre_acts.append(act)
            cur = act if i == last else relu_moments(act)
        z_out = cur
        if len(z_out) != 1:
            raise ShapeMismatch(f"final layer must be scalar, got {len(z_out)}")
    else:
        z_out = MomentVector(
            np.array([math.fsum(z0.means)]), np.array([math.fsum(z0.variances)])
        )
        if record_tape:
            tape.sum_head = True

    if record_tape:
        tape.z_out = z_out
    return z_out, tape


def _dense_backward(
    z_in: MomentVector,
    w: DenseLayerWeights,
    g_mean: np.ndarray,
    g_var: np.ndarray,
):
    """Adjoints of dense_forward: returns (gWm, gWv, g_zm, g_zv)."""
    v_in = len(z_in)
    zm = np.append(z_in.means, 1.0)
    zv = np.append(z_in.variances, 0.0)
    wm, wv = w.means, w.variances
    s = 1.0 / math.sqrt(v_in + 1)
    s2 = s * s
    g_wm = np.outer(g_mean, zm) * s + (2.0 * s2) * wm * zv[None, :] * g_var[:, None]
    g_wv = s2 * g_var[:, None] * (zv + zm * zm)[None, :]
    g_zm = (g_mean @ wm) * s + (2.0 * s2) * zm * (g_var @ wv)
    g_zv = s2 * (g_var @ (wv + wm * wm))
    return g_wm, g_wv, g_zm[:-1], g_zv[:-1]


def _relu_backward(a: MomentVector, g_mean: np.ndarray, g_var: np.ndarray):
    """Adjoints of relu_moments: gradients w.r.t. pre-activation moments.

    Uses the closed-form rectified-Gaussian derivatives
    dE/dm = Phi(alpha), dE/dv = phi(alpha)/(2 sqrt(v)),
    dVar/dm = 2 E (1 - Phi(alpha)), dVar/dv = Phi(alpha) - E phi(alpha)/sqrt(v).
    """
    m = a.means
    v = a.variances
    g_m_in = np.zeros_like(m)
    g_v_in = np.zeros_like(v)

    det = v == 0.0
    if det.any():
        on = det & (m > 0.0)
        g_m_in[on] = g_mean[on]
        g_v_in[on] = g_var[on]

    stoch = ~det
    if stoch.any():
        ms, vs = m[stoch], v[stoch]
        sd = np.sqrt(vs)
        alpha = ms / sd
        gm_s = np.zeros_like(ms)
        gv_s = np.zeros_like(vs)
        hi = alpha >= _RELU_TAIL
        gm_s[hi] = g_mean[stoch][hi]
        gv_s[hi] = g_var[stoch][hi]
        mid = np.abs(alpha) < _RELU_TAIL
        if mid.any():
            am = alpha[mid]
            cdf = normal_cdf(am)
            pdf = normal_pdf(am)
            gamma = inverse_mills(am)
            sdm = sd[mid]
            mean_out = cdf * (ms[mid] + sdm * gamma)
            gm_up = g_mean[stoch][mid]
            gv_up = g_var[stoch][mid]
            gm_s[mid] = gm_up * cdf + gv_up * 2.0 * mean_out * (1.0 - cdf)
            gv_s[mid] = gm_up * pdf / (2.0 * sdm) + gv_up * (
                cdf - mean_out * pdf / sdm
            )
        g_m_in[stoch] = gm_s
        g_v_in[stoch] = gv_s
    return g_m_in, g_v_in


def _fm_backward(m: np.ndarray, v: np.ndarray, g_mean: np.ndarray, g_var: np.ndarray):
    """Adjoints of the FM fast form over the leading axis."""
    if m.shape[0] < 2:
        return np.zeros_like(m), np.zeros_like(v)
    sm = m * m + v
    s_m = _colsums(m)
    s_v = _colsums(v)
    s_sm = _colsums(sm)
    g_m = g_mean * (s_m - m) + g_var * 2.0 * m * (s_v - v)
    g_v = g_var * (s_sm - sm)
    return g_m, g_v


def _ffm_backward(
    m: np.ndarray,
    v: np.ndarray,
    fields: np.ndarray,
    g_mean: np.ndarray,
    g_var: np.ndarray,
):
    """Adjoints of ffm_forward; mirrors its within/cross decomposition."""
    g_m = np.zeros_like(m)
    g_v = np.zeros_like(v)
    n, f_count, _ = m.shape
    if n < 2:
        return g_m, g_v
    for f in range(f_count):
        mask = fields == f + 1
        if int(mask.sum()) >= 2:
            sub_gm, sub_gv = _fm_backward(m[mask, f, :], v[mask, f, :], g_mean, g_var)
            g_m[mask, f, :] += sub_gm
            g_v[mask, f, :] += sub_gv
    sums_m, sums_v = _ffm_group_sums(m, v, fields, f_count)
    for a in range(f_count):
        mask_a = fields == a + 1
        if not mask_a.any():
            continue
        for b in range(a + 1, f_count):
            mask_b = fields == b + 1
            if not mask_b.any():
                continue
            s1m, s1v = sums_m[a, b], sums_v[a, b]
            s2m, s2v = sums_m[b, a], sums_v[b, a]
            g_m[mask_a, b, :] += g_mean * s2m + g_var * 2.0 * s1m * s2v
            g_v[mask_a, b, :] += g_var * (s2m * s2m + s2v)
            g_m[mask_b, a, :] += g_mean * s1m + g_var * 2.0 * s2m * s1v
            g_v[mask_b, a, :] += g_var * (s1m * s1m + s1v)
    return g_m, g_v


def backward(tape: BackwardTape | None, y: int) -> GradientMap:
    """Reverse-mode d(log Z)/d(mean, variance) for every touched weight.

    Differentiates exactly the arithmetic the recorded forward performed,
    including the FM/FFM fast forms and the rectifier moments. Raises
    :class:`StaleTape` when no recording is available or the tape was
    already consumed.
    """
    if tape is None or tape.z_out is None:
        raise StaleTape("forward pass was not run with gradient recording")
    if tape.consumed:
        raise StaleTape("tape already consumed by a previous backward")
    if y not in (-1, 1):
        raise ValueError(f"label must be +1 or -1, got {y}")
    tape.consumed = True

    m_out = float(tape.z_out.means[0])
    v_out = float(tape.z_out.variances[0])
    denom = math.sqrt(v_out + 1.0)
    t = y * m_out / denom
    g = inverse_mills(t)
    g_mean_out = g * y / denom
    g_var_out = -0.5 * g_mean_out * m_out / (v_out + 1.0)

    dense_grads: list[tuple[np.ndarray, np.ndarray]] = []
    if tape.sum_head:
        g_z0_m = np.full_like(tape.z0.means, g_mean_out)
        g_z0_v = np.full_like(tape.z0.variances, g_var_out)
    else:
        g_m = np.array([g_mean_out])
        g_v = np.array([g_var_out])
        per_layer: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(len(tape.dense_weights) - 1, -1, -1):
            g_wm, g_wv, g_m, g_v = _dense_backward(
                tape.dense_inputs[i], tape.dense_weights[i], g_m, g_v
            )
            per_layer.append((g_wm, g_wv))
            if i > 0:
                g_m, g_v = _relu_backward(tape.pre_acts[i - 1], g_m, g_v)
        dense_grads = per_layer[::-1]
        g_z0_m, g_z0_v = g_m, g_v

    emb_m, emb_v = tape.emb.means, tape.emb.variances
    if tape.op_kind is EmbeddingOp.COPY:
        g_emb_m = g_z0_m.reshape(emb_m.shape)
        g_emb_v = g_z0_v.reshape(emb_v.shape)
    elif tape.op_kind is EmbeddingOp.DAS:
        g_emb_m = np.broadcast_to(g_z0_m, emb_m.shape).copy()
        g_emb_v = np.broadcast_to(g_z0_v, emb_v.shape).copy()
    elif tape.op_kind is EmbeddingOp.FM:
        g_emb_m, g_emb_v = _fm_backward(emb_m, emb_v, g_z0_m, g_z0_v)
    else:
        fields = np.asarray(tape.instance.fields, dtype=np.int64)
        g_emb_m, g_emb_v = _ffm_backward(emb_m, emb_v, fields, g_z0_m, g_z0_v)

    embedding = {
        fid: (g_emb_m[i], g_emb_v[i])
        for i, fid in enumerate(tape.instance.features)
    }
    return GradientMap(embedding=embedding, dense=dense_grads)
