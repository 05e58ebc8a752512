"""Operator command line: train, evaluate, predict, inspect.

Training makes a single chronological pass (predict-then-update, so the
logged metrics are honest progressive validation), optionally negative
sampled and optionally spread over simulated parallel workers. Evaluation
reports AUC, logloss, and a calibration ratio on labeled data, undoing
negative sampling via the rate stored in the checkpoint. Exit codes are
pinned: 0 success, 1 I/O or checkpoint failure, 2 configuration failure.

A note on warm starts: a fresh model can be "burned in" by simply training
it on a couple of weeks of recent historical data (``--model-in`` continues
from any checkpoint) before its predictions are consumed; there is no
separate mechanism for this.

Metrics logs are line oriented and machine parsable: per-example records
``example=i y=.. p=..`` during sequential training, per-window summaries
``window=.. auc=.. logloss=..``, and per-round worker records in parallel
mode.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np
from scipy.stats import rankdata

from .data import (
    instance_to_line,
    negative_sample,
    parse_features,
    read_instances,
)
from .errors import BadRate, CorruptCheckpoint, InvalidConfig, ParseError, ProbitnetError
from .layers import EmbeddingOp
from .model import (
    Model,
    ModelConfig,
    calibrate,
    decay_all,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    update,
)
from .parallel import run_parallel_training, split_stream

__all__ = [
    "roc_auc",
    "roc_auc_bruteforce",
    "log_loss",
    "build_parser",
    "cmd_train",
    "cmd_evaluate",
    "cmd_predict",
    "cmd_inspect",
    "main",
]


# ---------------------------------------------------------------------------
# Metrics.
# ---------------------------------------------------------------------------


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve by rank statistic, half credit for ties.

    ``labels`` are +-1 or 0/1; returns nan when only one class is present.
    """
    y = np.asarray(labels)
    y = (y > 0).astype(np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s, method="average")
    pos_rank_sum = float(ranks[y > 0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc_bruteforce(labels, scores) -> float:
    """O(n^2) pair-counting AUC; reference implementation for tests."""
    y = np.asarray(labels)
    y = (y > 0).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    pos = s[y]
    neg = s[~y]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    wins = 0.0
    for p in pos:
        wins += float(np.count_nonzero(p > neg)) + 0.5 * float(
            np.count_nonzero(p == neg)
        )
    return wins / (len(pos) * len(neg))


def log_loss(labels, probabilities) -> float:
    """Mean negative log likelihood with labels mapped to {0, 1}."""
    y = (np.asarray(labels) > 0).astype(np.float64)
    q = np.asarray(probabilities, dtype=np.float64)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log1p(-q)))


# ---------------------------------------------------------------------------
# Argument plumbing.
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--op", choices=[op.value for op in EmbeddingOp], default="das",
                   help="embedding combination op")
    p.add_argument("--k", type=int, default=1, help="embedding dimension")
    p.add_argument("--f", type=int, default=0, help="field count (ffm; copy+hidden)")
    p.add_argument("--hidden", default="",
                   help="comma-separated hidden layer sizes, empty for none")
    p.add_argument("--prior-variance", type=float, default=0.01)
    p.add_argument("--prior-mean", type=float, default=0.0)
    p.add_argument("--decay-eps", type=float, default=0.0,
                   help="variance pull toward the prior per decay sweep")
    p.add_argument("--variance-floor", type=float, default=1e-8)
    p.add_argument("--variance-ceiling", type=float, default=1e4)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probitnet",
        description="Online Bayesian probit networks over sparse features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="one chronological training pass")
    train.add_argument("--data", required=True, help="training instances file")
    train.add_argument("--model-in", default=None,
                       help="checkpoint to continue from (warm start / burn-in)")
    train.add_argument("--model-out", required=True, help="checkpoint destination")
    train.add_argument("--metrics-out", default=None, help="metrics log destination")
    train.add_argument("--neg-rate", type=float, default=1.0,
                       help="keep each negative with this probability")
    train.add_argument("--workers", type=int, default=1)
    train.add_argument("--sync-cadence", type=int, default=1,
                       help="minibatches per worker between server syncs")
    train.add_argument("--replay", type=int, default=1,
                       help="times each minibatch is re-processed")
    train.add_argument("--batch", type=int, default=256, help="minibatch size")
    train.add_argument("--decay-every", type=int, default=0,
                       help="run variance decay after this many examples (0: never)")
    train.add_argument("--metrics-window", type=int, default=1000,
                       help="progressive-validation window size")
    _add_model_flags(train)

    ev = sub.add_parser("evaluate", help="score a checkpoint on labeled data")
    ev.add_argument("--data", required=True)
    ev.add_argument("--model-in", required=True)
    ev.add_argument("--metrics-out", default=None)
    ev.add_argument("--raw", action="store_true",
                    help="skip negative-sampling recalibration")

    pr = sub.add_parser("predict", help="write one calibrated probability per line")
    pr.add_argument("--data", required=True)
    pr.add_argument("--model-in", required=True)
    pr.add_argument("--scores-out", default=None, help="default: stdout")

    ins = sub.add_parser("inspect", help="summarize a checkpoint")
    ins.add_argument("--model-in", required=True)
    return parser


def _parse_hidden(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise InvalidConfig(f"bad --hidden list: {text!r}") from None


def _config_from_args(args) -> ModelConfig:
    return ModelConfig(
        embedding_op=EmbeddingOp(args.op),
        k=args.k,
        f=args.f,
        hidden_sizes=_parse_hidden(args.hidden),
        prior_mean_embedding=args.prior_mean,
        prior_variance=args.prior_variance,
        init_seed=args.seed,
        decay_eps=args.decay_eps,
        variance_floor=args.variance_floor,
        variance_ceiling=args.variance_ceiling,
    )


class _MetricsLog:
    def __init__(self, path: str | None):
        self.path = path
        self.lines: list[str] = []

    def record(self, line: str):
        self.lines.append(line)

    def flush(self):
        if self.path is None:
            return
        with open(self.path, "w", encoding="utf-8") as fh:
            for line in self.lines:
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def _train_sequential(model: Model, stream, log: _MetricsLog, window: int,
                      decay_every: int) -> int:
    seen = 0
    win_labels: list[int] = []
    win_probs: list[float] = []
    win_logz = 0.0
    window_no = 0
    next_decay = decay_every if decay_every > 0 else None
    for inst in stream:
        try:
            p = predict(model, inst)
            report = update(model, inst)
        except ProbitnetError:
            log.record(f"skipped=1 reason=bad_instance at={seen}")
            continue
        seen += 1
        log.record(f"example={seen} y={1 if inst.label > 0 else 0} p={p:.6f} "
                   f"logz={report.log_z:.6f}")
        win_labels.append(inst.label)
        win_probs.append(p)
        win_logz += report.log_z
        if len(win_labels) == window:
            window_no += 1
            auc = roc_auc(win_labels, win_probs)
            ll = log_loss(win_labels, win_probs)
            log.record(f"window={window_no} n={window} auc={auc:.6f} "
                       f"logloss={ll:.6f} mean_logz={win_logz / window:.6f}")
            win_labels, win_probs, win_logz = [], [], 0.0
        if next_decay is not None and seen >= next_decay:
            decay_all(model)
            log.record(f"decay=1 at={seen}")
            while next_decay <= seen:
                next_decay += decay_every
    if win_labels:
        window_no += 1
        auc = roc_auc(win_labels, win_probs)
        ll = log_loss(win_labels, win_probs)
        log.record(f"window={window_no} n={len(win_labels)} auc={auc:.6f} "
                   f"logloss={ll:.6f} mean_logz={win_logz / len(win_labels):.6f}")
    return seen


def cmd_train(args) -> int:
    if args.model_in is not None:
        model = load_checkpoint(args.model_in)
    else:
        model = init_model(_config_from_args(args))
    if not (0.0 < args.neg_rate <= 1.0):
        raise BadRate(f"--neg-rate must be in (0, 1], got {args.neg_rate}")
    if args.workers < 1:
        raise InvalidConfig(f"--workers must be >= 1, got {args.workers}")
    model.sample_rate = args.neg_rate

    reader = read_instances(args.data)
    stream = negative_sample(iter(reader), args.neg_rate, seed=args.seed,
                             stats=reader.stats)
    log = _MetricsLog(args.metrics_out)

    if args.workers == 1:
        seen = _train_sequential(model, stream, log, args.metrics_window,
                                 args.decay_every)
    else:
        shards = split_stream(stream, args.workers)
        model, report = run_parallel_training(
            model,
            shards,
            workers=args.workers,
            batch_size=args.batch,
            sync_cadence=args.sync_cadence,
            replay=args.replay,
            decay_every=args.decay_every,
        )
        for line in report.lines():
            log.record(line)
        seen = report.examples

    log.record("stats " + reader.stats.summary_line())
    log.flush()
    save_checkpoint(model, args.model_out)
    print(f"trained examples={seen} checkpoint={args.model_out}")
    print(reader.stats.summary_line())
    return 0


def _load_labeled(path):
    reader = read_instances(path)
    instances = list(reader)
    return instances, reader.stats


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model_in)
    instances, stats = _load_labeled(args.data)
    if not instances:
        print("no parseable instances", file=sys.stderr)
        return 2
    labels = [inst.label for inst in instances]
    probs = []
    for inst in instances:
        p = predict(model, inst)
        probs.append(p if args.raw else calibrate(p, model.sample_rate))
    auc = roc_auc(labels, probs)
    ll = log_loss(labels, probs)
    ctr = float(np.mean([1.0 if y > 0 else 0.0 for y in labels]))
    ratio = float(np.mean(probs)) / ctr if ctr > 0 else float("nan")
    lines = [
        f"examples={len(instances)}",
        f"auc={auc:.6f}",
        f"logloss={ll:.6f}",
        f"calibration_ratio={ratio:.6f}",
        f"ctr={ctr:.6f}",
        f"sample_rate={model.sample_rate:.6f}",
        f"calibrated={0 if args.raw else 1}",
    ]
    for line in lines:
        print(line)
    if args.metrics_out:
        with open(args.metrics_out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    _ = stats
    return 0


def _iter_predict_lines(path):
    """Yield instances from labeled or unlabeled lines (label optional)."""
    import gzip

    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if ":" in tokens[0]:
                fields, features = parse_features(tokens, line_number)
            else:
                fields, features = parse_features(tokens[1:], line_number)
            yield fields, features


def cmd_predict(args) -> int:
    from .data import SparseInstance

    model = load_checkpoint(args.model_in)
    out_lines = []
    fallbacks = 0
    for fields, features in _iter_predict_lines(args.data):
        try:
            inst = SparseInstance(1, fields, features)
            p = predict(model, inst)
        except ProbitnetError:
            p = 0.5
            fallbacks += 1
        out_lines.append(f"{calibrate(p, model.sample_rate):.6f}")
    text = "\n".join(out_lines) + ("\n" if out_lines else "")
    if args.scores_out:
        with open(args.scores_out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if fallbacks:
        print(f"unscorable lines fell back to prior: {fallbacks}", file=sys.stderr)
    return 0


def _variance_summary(name: str, variances: np.ndarray) -> str:
    v = np.asarray(variances, dtype=np.float64).ravel()
    if v.size == 0:
        return f"{name}: empty"
    return (f"{name}: n={v.size} var_min={v.min():.6g} "
            f"var_median={float(np.median(v)):.6g} var_max={v.max():.6g}")


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.model_in)
    cfg = model.config
    dense_weights = sum(w.means.size for w in model.dense_layers)
    emb_weights = len(model.embedding) * int(np.prod(cfg.vector_shape))
    print(f"op={cfg.embedding_op.value} k={cfg.k} f={cfg.f} "
          f"hidden={','.join(str(h) for h in cfg.hidden_sizes) or '-'}")
    print(f"prior_mean={cfg.prior_mean_embedding} prior_variance={cfg.prior_variance} "
          f"decay_eps={cfg.decay_eps} seed={cfg.init_seed}")
    print(f"embedding_features={len(model.embedding)} embedding_weights={emb_weights} "
          f"dense_weights={dense_weights}")
    print(f"updates={model.update_count} clamped={model.clamp_count} "
          f"skipped={model.skip_count} sample_rate={model.sample_rate}")
    if len(model.embedding):
        all_vars = np.concatenate(
            [ent[1].ravel() for _, ent in model.embedding.items()]
        )
        print(_variance_summary("embedding", all_vars))
    for i, w in enumerate(model.dense_layers):
        print(_variance_summary(f"dense[{i}] ({w.rows}x{w.cols})", w.variances))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "predict": cmd_predict,
        "inspect": cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except (InvalidConfig, BadRate, ParseError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (CorruptCheckpoint, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
