"""Training pipeline: sample extraction, the SGD loop with early stopping,
and the leave-one-subject-out evaluation harness.

Two labeling regimes produce samples:

* strong (1D): single-channel windows.  Seizure windows step through each
  channel-labeled event from its onset and must lie fully inside it;
  background windows step through the whole record on a global grid and
  must lie fully outside every weak event (every channel qualifies).
  Windows that straddle a label boundary are dropped.

* weak (2D): all-channel windows on the global grid, labeled 1 when fully
  inside a record-level event, 0 when fully outside all of them,
  straddlers dropped.  No channel information is used.

Evaluation always runs at the trace shift (1 s default): per-channel (1D)
or in-network-fused (2D) probabilities go through the post-processing
chain and are scored against weak labels rasterized at the trace period.

Determinism: every random choice (shuffles, validation splits, model
init) derives from the TrainConfig seed through named SeedSequence spawn
keys, so a rerun reproduces results bit-for-bit.  Set NEOSEIZE_THREADS>1
to run independent folds concurrently; outputs are ordered by fold, so
results do not depend on scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .eeg_data import WEAK_ONLY, WEAK_PARTIAL_STRONG, AnnotationSet, rasterize
from .fcn_model import Fcn1d, Fcn2d, FcnConfig
from .metrics import MetricsError, auc, auc90, roc_curve, align_trace_to_mask
from .postproc import PostprocConfig, ProbabilityTrace, postprocess_chain
from .preprocess import PreprocessConfig, preprocess_record, segment_windows


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4096          # 300 is the multichannel default
    patience: int = 25              # 8 for the multichannel net
    max_epochs: int = 100
    class_weighting: str = "inverse-frequency"  # or "none"
    n_validation_subjects: int = 3  # weak-label validation-subject count
    n_splits: int = 3               # weak-label ensemble size
    pretrain_epochs: int = 0        # weak-label bootstrap epochs (see train_model)
    seed: int = 0

    def validate(self):
        if min(self.learning_rate, self.momentum + 1e-12, self.batch_size,
               self.patience, self.max_epochs) <= 0:
            raise ValueError("learning_rate, batch_size, patience, max_epochs must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience {self.patience} must be below max_epochs {self.max_epochs}")
        if self.class_weighting not in ("none", "inverse-frequency"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")
        if self.n_validation_subjects < 1 or self.n_splits < 1:
            raise ValueError("n_validation_subjects and n_splits must be >= 1")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        return self


@dataclass(frozen=True)
class SampleSet:
    inputs: np.ndarray   # [n, L] (strong) or [n, n_channels, L] (weak), float32
    labels: np.ndarray   # [n] ints in {0, 1}
    provenance: tuple    # (subject_id, channel | None, start_time_s) per sample

    def __post_init__(self):
        if not (len(self.inputs) == len(self.labels) == len(self.provenance)):
            raise ValueError("inputs, labels, and provenance must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return SampleSet(self.inputs[idx], self.labels[idx],
                         tuple(self.provenance[i] for i in idx))

    def subjects(self):
        return tuple(dict.fromkeys(p[0] for p in self.provenance))


@dataclass(frozen=True)
class TrainHistory:
    train_loss: tuple    # mean weighted loss per epoch
    val_auc: tuple       # window-level AUC per epoch, no post-processing
    best_epoch: int      # 1-based; earliest epoch with the best val AUC
    best_val_auc: float


def _ensure_rate(record, cfg: PreprocessConfig):
    if record.sample_rate == cfg.target_rate:
        return record
    return preprocess_record(record, cfg)


def _event_samples(event, rate):
    return int(round(event.onset * rate)), int(round(event.offset * rate))


def make_samples_strong(records, annotations, preprocess_cfg: PreprocessConfig | None = None) -> SampleSet:
    """Single-channel windows from channel-labeled events plus background."""
    cfg = (preprocess_cfg or PreprocessConfig()).validate()
    inputs, labels, prov = [], [], []
    any_strong = False
    for record, ann in zip(records, annotations):
        rec = _ensure_rate(record, cfg)
        rate = rec.sample_rate
        length = int(round(cfg.window_len * rate))
        step = int(round(cfg.window_shift * rate))
        weak_spans = [_event_samples(e, rate) for e in ann.weak_events()]
        for event in ann.strong_events():
            any_strong = True
            on, off = _event_samples(event, rate)
            start = on
            while start + length <= min(off, rec.n_samples):
                inputs.append(rec.samples[event.channel, start:start + length])
                labels.append(1)
                prov.append((rec.subject_id, event.channel, start / rate))
                start += step
        for start in range(0, rec.n_samples - length + 1, step):
            stop = start + length
            if all(stop <= on or start >= off for on, off in weak_spans):
                for c in range(rec.n_channels):
                    inputs.append(rec.samples[c, start:stop])
                    labels.append(0)
                    prov.append((rec.subject_id, c, start / rate))
    if not any_strong:
        raise ValueError("no strong (channel-labeled) events in any annotation set")
    return SampleSet(np.asarray(inputs, dtype=np.float32), np.asarray(labels), tuple(prov))


def make_samples_weak(records, annotations, preprocess_cfg: PreprocessConfig | None = None) -> SampleSet:
    """All-channel windows labeled by containment in record-level events."""
    cfg = (preprocess_cfg or PreprocessConfig()).validate()
    inputs, labels, prov = [], [], []
    for record, ann in zip(records, annotations):
        rec = _ensure_rate(record, cfg)
        rate = rec.sample_rate
        length = int(round(cfg.window_len * rate))
        step = int(round(cfg.window_shift * rate))
        weak_spans = [_event_samples(e, rate) for e in ann.weak_events()]
        for start in range(0, rec.n_samples - length + 1, step):
            stop = start + length
            if any(start >= on and stop <= off for on, off in weak_spans):
                label = 1
            elif all(stop <= on or start >= off for on, off in weak_spans):
                label = 0
            else:
                continue  # straddles an event boundary
            inputs.append(rec.samples[:, start:stop])
            labels.append(label)
            prov.append((rec.subject_id, None, start / rate))
    return SampleSet(np.asarray(inputs, dtype=np.float32), np.asarray(labels), tuple(prov))


def restrict_strong_events(annotations: AnnotationSet, fraction: float, seed: int = 0) -> AnnotationSet:
    """Keep a seeded fraction of the strong events (weak ones untouched)."""
    if not (0 <= fraction <= 1):
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    strong = list(annotations.strong_events())
    keep_n = int(round(fraction * len(strong)))
    rng = np.random.default_rng(seed)
    kept_idx = set(rng.permutation(len(strong))[:keep_n].tolist())
    kept = [e for i, e in enumerate(strong) if i in kept_idx]
    events = tuple(annotations.weak_events()) + tuple(kept)
    completeness = WEAK_PARTIAL_STRONG if kept else WEAK_ONLY
    return AnnotationSet(annotations.subject_id, events, completeness)


# ---------------------------------------------------------------------------
# prediction helpers

def predict_chunked(model, inputs, chunk: int = 2048) -> np.ndarray:
    """predict_proba in bounded-memory chunks (multichannel uses smaller ones)."""
    if isinstance(model, Fcn2d):
        chunk = max(1, chunk // max(1, inputs.shape[1]))
    parts = [model.predict_proba(inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)]
    return np.concatenate(parts) if parts else np.zeros(0)


def ensemble_average(models, windows) -> np.ndarray:
    """Mean of the member probabilities per window."""
    if not models:
        raise ValueError("need at least one model")
    cfg0 = models[0].config
    base_seed = replace(cfg0, seed=0)
    for m in models[1:]:
        if replace(m.config, seed=0) != base_seed:
            raise ValueError(f"ensemble members disagree on architecture: {m.config} vs {cfg0}")
    probs = np.stack([predict_chunked(m, windows) for m in models])
    return probs.mean(axis=0)


# ---------------------------------------------------------------------------
# training loop

def _class_weights(labels, scheme):
    if scheme == "none":
        return None
    counts = np.bincount(labels, minlength=2)
    return (labels.size / (2.0 * np.maximum(counts, 1))).tolist()


def _snapshot(model):
    return ([p.data.copy() for p in model.params()],
            [st.copy() for _, _, st in model.bns])


def _restore(model, snap):
    params, states = snap
    for p, data in zip(model.params(), params):
        p.data = data.copy()
    for (_, _, st), saved in zip(model.bns, states):
        st.mean = saved.mean.copy()
        st.var = saved.var.copy()
        st.initialized = saved.initialized


def _pretrain_shared_net(model, train_set: SampleSet, weights, cfg: TrainConfig, rng):
    """Bootstrap the shared stack of a multichannel model on flattened bags.

    Once probabilities are fused by the cross-channel max, gradient reaches
    only the highest-scoring channel of each segment.  A network whose random
    init happens to map seizure-like content toward the background class
    therefore never selects — and never updates on — the informative channel,
    and training can deadlock at chance.  For `cfg.pretrain_epochs` initial
    epochs every window is instead trained individually with its segment's
    label (weak supervision only; the label is diluted across channels),
    which pulls seizure morphology toward the seizure class before max-fused
    training starts.
    """
    x = train_set.inputs
    n, n_ch, length = x.shape
    flat = x.reshape(n * n_ch, length)
    labels = np.repeat(train_set.labels, n_ch)
    opt = ag.SgdNesterov(model.params(), cfg.learning_rate, cfg.momentum)
    batch = cfg.batch_size * n_ch   # same windows-per-step as the fused phase
    for epoch in range(1, cfg.pretrain_epochs + 1):
        perm = rng.permutation(flat.shape[0])
        for b, start in enumerate(range(0, len(perm), batch)):
            idx = perm[start:start + batch]
            opt.zero_grad()
            loss, _ = model.net.loss(flat[idx], labels[idx], mode="train",
                                     class_weights=weights)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite pre-training loss at epoch {epoch}, batch {b}")
            ag.backward(loss)
            opt.step()


def train_model(model, train_set: SampleSet, val_set: SampleSet, cfg: TrainConfig):
    """SGD with Nesterov momentum and validation-AUC early stopping.

    Returns (model restored to its best-validation snapshot, history).
    The best epoch is the earliest one attaining the maximum validation
    AUC; training stops once `patience` epochs pass without improvement.
    Multichannel models may request `cfg.pretrain_epochs` bootstrap epochs
    on flattened windows first (see _pretrain_shared_net); the returned
    history covers only the max-fused phase.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    y_train = train_set.labels
    if y_train.min() == y_train.max():
        raise ValueError("training set contains a single class")
    if val_set.labels.min() == val_set.labels.max():
        raise ValueError("validation set contains a single class; cannot track AUC")
    binary = isinstance(model, Fcn2d)
    weights = _class_weights(y_train, cfg.class_weighting)
    rng = np.random.default_rng(cfg.seed)
    if binary and cfg.pretrain_epochs > 0:
        _pretrain_shared_net(model, train_set, weights, cfg, rng)
    opt = ag.SgdNesterov(model.params(), cfg.learning_rate, cfg.momentum)

    losses, val_aucs = [], []
    best = (-np.inf, 0, None)  # (val_auc, epoch, snapshot)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            target = y_train[idx].astype(np.float64) if binary else y_train[idx]
            loss, _ = model.loss(train_set.inputs[idx], target, mode="train", class_weights=weights)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, batch {b}")
            ag.backward(loss)
            opt.step()
            total += float(loss.data) * idx.size
            seen += idx.size
        losses.append(total / seen)

        scores = predict_chunked(model, val_set.inputs)
        val_auc = auc(roc_curve(scores, val_set.labels))
        val_aucs.append(val_auc)
        if val_auc > best[0]:
            best = (val_auc, epoch, _snapshot(model))
        elif epoch - best[1] >= cfg.patience:
            break

    _restore(model, best[2])
    return model, TrainHistory(tuple(losses), tuple(val_aucs), best[1], best[0])


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalResult:
    subject_id: str
    trace: ProbabilityTrace   # post-processed
    scores: np.ndarray        # aligned with labels
    labels: np.ndarray        # weak ground truth per epoch
    auc: float | None         # None when the subject has a single class
    auc90: float | None


def evaluate_record(model_or_models, record, annotations,
                    preprocess_cfg: PreprocessConfig | None = None,
                    postproc_cfg: PostprocConfig | None = None) -> EvalResult:
    """Preprocess, score every window, post-process, and compute AUCs."""
    pre = (preprocess_cfg or PreprocessConfig()).validate()
    post = postproc_cfg or PostprocConfig()
    models = model_or_models if isinstance(model_or_models, (list, tuple)) else [model_or_models]
    rec = _ensure_rate(record, pre)
    wins = segment_windows(rec, pre.window_len, pre.window_shift)
    stack = np.stack([w for _, w in wins]).astype(np.float32)  # [n_wins, n_ch, L]
    n_wins, n_ch, _ = stack.shape

    if isinstance(models[0], Fcn2d):
        fused = np.stack([predict_chunked(m, stack) for m in models]).mean(axis=0)
        trace_in = ProbabilityTrace(pre.window_shift, fused, start_time=pre.window_len)
    else:
        flat = stack.transpose(1, 0, 2).reshape(n_ch * n_wins, -1)
        per_model = np.stack([predict_chunked(m, flat) for m in models]).mean(axis=0)
        per_channel = per_model.reshape(n_ch, n_wins)
        trace_in = ProbabilityTrace(pre.window_shift, per_channel.max(axis=0),
                                    per_channel=per_channel, start_time=pre.window_len)

    trace = postprocess_chain(trace_in, post)
    n_epochs = int(rec.duration / pre.window_shift)
    mask = rasterize(annotations, pre.window_shift, n_epochs)
    scores, labels = align_trace_to_mask(trace, mask)
    try:
        curve = roc_curve(scores, labels)
        a, a90 = auc(curve), auc90(curve)
    except MetricsError:
        a = a90 = None
    return EvalResult(record.subject_id, trace, scores, np.asarray(labels), a, a90)


# ---------------------------------------------------------------------------
# leave-one-subject-out harness

@dataclass(frozen=True)
class SplitResult:
    split: int
    best_epoch: int
    val_auc: float


@dataclass(frozen=True)
class FoldResult:
    subject_id: str
    splits: tuple         # SplitResult per trained model
    result: EvalResult
    models: tuple         # trained model(s) for this fold


def _audit_no_leakage(sets, test_subject):
    for s in sets:
        for subject, _, _ in s.provenance:
            if subject == test_subject:
                raise RuntimeError(f"leakage: held-out subject {test_subject} found in training data")


def _split_by_subject(samples: SampleSet, val_fraction: float, rng) -> tuple:
    """Stratified sample partition: val_fraction of each subject's samples,
    drawn from each class separately so scarce seizure windows reach both
    sides of the split."""
    train_idx, val_idx = [], []
    for subject in samples.subjects():
        idx = np.array([i for i, p in enumerate(samples.provenance) if p[0] == subject])
        for label in np.unique(samples.labels[idx]):
            cls = idx[samples.labels[idx] == label]
            cls = cls[rng.permutation(cls.size)]
            n_val = max(1, int(np.ceil(val_fraction * cls.size)))
            val_idx.extend(cls[:n_val].tolist())
            train_idx.extend(cls[n_val:].tolist())
    return samples.subset(np.array(sorted(train_idx))), samples.subset(np.array(sorted(val_idx)))


def _fold_1d(fold, test_i, prepared, fcn_cfg, train_cfg, extract_cfg, eval_cfg, post_cfg):
    test_rec, test_ann = prepared[test_i]
    rest = [prepared[i] for i in range(len(prepared)) if i != test_i]
    samples = make_samples_strong([r for r, _ in rest], [a for _, a in rest], extract_cfg)
    ss = np.random.SeedSequence(train_cfg.seed, spawn_key=(fold, 0))
    state = ss.generate_state(3)
    train_set, val_set = _split_by_subject(samples, 0.2, np.random.default_rng(state[0]))
    _audit_no_leakage([train_set, val_set], test_rec.subject_id)
    model = Fcn1d(replace(fcn_cfg, seed=int(state[1])))
    model, hist = train_model(model, train_set, val_set, replace(train_cfg, seed=int(state[2])))
    result = evaluate_record(model, test_rec, test_ann, eval_cfg, post_cfg)
    return FoldResult(test_rec.subject_id,
                      (SplitResult(0, hist.best_epoch, hist.best_val_auc),), result, (model,))


def _fold_2d(fold, test_i, prepared, fcn_cfg, train_cfg, extract_cfg, eval_cfg, post_cfg):
    test_rec, test_ann = prepared[test_i]
    rest_i = [i for i in range(len(prepared)) if i != test_i]
    models, split_results = [], []
    for split in range(train_cfg.n_splits):
        ss = np.random.SeedSequence(train_cfg.seed, spawn_key=(fold, split))
        state = ss.generate_state(3)
        rng = np.random.default_rng(state[0])
        n_val = min(train_cfg.n_validation_subjects, len(rest_i) - 1)
        val_i = set(rng.choice(np.array(rest_i), size=n_val, replace=False).tolist())
        train_pairs = [prepared[i] for i in rest_i if i not in val_i]
        val_pairs = [prepared[i] for i in sorted(val_i)]
        train_set = make_samples_weak([r for r, _ in train_pairs], [a for _, a in train_pairs], extract_cfg)
        val_set = make_samples_weak([r for r, _ in val_pairs], [a for _, a in val_pairs], extract_cfg)
        _audit_no_leakage([train_set, val_set], test_rec.subject_id)
        model = Fcn2d(replace(fcn_cfg, seed=int(state[1])))
        model, hist = train_model(model, train_set, val_set, replace(train_cfg, seed=int(state[2])))
        models.append(model)
        split_results.append(SplitResult(split, hist.best_epoch, hist.best_val_auc))
    result = evaluate_record(models, test_rec, test_ann, eval_cfg, post_cfg)
    return FoldResult(test_rec.subject_id, tuple(split_results), result, tuple(models))


def loo_harness(dataset, fcn_cfg: FcnConfig, train_cfg: TrainConfig, arch: str = "fcn1d",
                preprocess_cfg: PreprocessConfig | None = None,
                postproc_cfg: PostprocConfig | None = None,
                train_shift: float | None = None):
    """Leave-one-subject-out: train on the rest, test each subject once.

    train_shift widens the extraction stride for training samples without
    touching the 1 s evaluation trace.  Returns a FoldResult per subject,
    in subject order.
    """
    if len(dataset) < 3:
        raise ValueError(f"leave-one-out needs at least 3 subjects, got {len(dataset)}")
    if arch not in ("fcn1d", "fcn2d"):
        raise ValueError(f"unknown architecture {arch!r}")
    train_cfg.validate()
    eval_cfg = (preprocess_cfg or PreprocessConfig()).validate()
    extract_cfg = replace(eval_cfg, window_shift=train_shift) if train_shift else eval_cfg
    post_cfg = postproc_cfg or PostprocConfig()

    prepared = [(_ensure_rate(rec, eval_cfg), ann) for rec, ann in dataset]
    run = _fold_1d if arch == "fcn1d" else _fold_2d

    def one(fold):
        return run(fold, fold, prepared, fcn_cfg, train_cfg, extract_cfg, eval_cfg, post_cfg)

    n_threads = int(os.environ.get("NEOSEIZE_THREADS", "1"))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            return list(ex.map(one, range(len(prepared))))
    return [one(fold) for fold in range(len(prepared))]
