"""Self-re-labeling training loop.

Training proceeds in three phases controlled by two piecewise-linear ramps:
a loss mix weight that turns on the supervised losses after a warm-up, and a
re-labeling weight that gradually hands label authority from the given
(possibly wrong) labels to two pseudo-label sources, the classifier's
probability history and the distances to per-class cluster centers in the
embedding space. Labels used by the losses are re-estimated every epoch from
the original given labels; corrections are never written back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Adam, batch_size_for, lr_at

EMA_WINDOW = 5
LOG_FLOOR = 1e-12
CENTER_DIST_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, parts):
        self.epoch = epoch
        self.batch = batch
        self.parts = parts
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


# -- schedules -----------------------------------------------------------------


@dataclass
class ScheduleParams:
    """Ramp timing: warm-up end, mix ramp width, relabel ramp width (epochs)."""

    lambda_init: int = 0
    delta_start: int = 25
    delta_end: int = 30

    def __post_init__(self):
        if self.lambda_init < 0 or self.delta_start < 0 or self.delta_end < 0:
            raise ValueError("schedule parameters must be nonnegative")

    @property
    def lambda_start(self):
        return self.lambda_init + self.delta_start

    @property
    def lambda_end(self):
        return self.lambda_start + self.delta_end


def alpha_at(t, sched):
    """Supervised-loss weight: 0 through the warm-up, then a linear ramp to 1."""
    if t <= sched.lambda_init:
        return 0.0
    if t >= sched.lambda_start:
        return 1.0
    return (t - sched.lambda_init) / sched.delta_start


def w_at(t, sched):
    """Re-label weight: 0 until the mix ramp ends, then a linear ramp to 1."""
    if t <= sched.lambda_start:
        return 0.0
    if t >= sched.lambda_end:
        return 1.0
    return (t - sched.lambda_start) / sched.delta_end


# -- loss components -----------------------------------------------------------


def reconstruction_loss(x_hat, x):
    """Mean squared error over all elements."""
    diff = T.sub(x_hat, T.as_tensor(x))
    return T.reduce_mean(T.mul(diff, diff))


def classification_loss(probs, labels_onehot):
    """Mean negative log-likelihood of the labeled class (log clamped at 1e-12)."""
    logp = T.log(T.clamp_min(probs, LOG_FLOOR))
    picked = T.reduce_sum(T.mul(logp, T.Tensor(labels_onehot)), axis=-1)
    return T.mul(T.reduce_mean(picked), -1.0)


def _pairwise_center_distances(centers):
    # centers [d, k] -> [k, k] Euclidean distances, differentiable; the tiny
    # epsilon keeps sqrt differentiable at coincident centers while staying
    # below the collapse floor so collapses remain detectable
    a = T.reshape(T.transpose(centers), (centers.shape[1], 1, centers.shape[0]))
    b = T.reshape(T.transpose(centers), (1, centers.shape[1], centers.shape[0]))
    diff = T.sub(a, b)
    return T.sqrt(T.add(T.reduce_sum(T.mul(diff, diff), axis=-1), 1e-18))


@dataclass
class ClusteringLossResult:
    value: "T.Tensor"
    collapse_count: int


def clustering_loss(embeddings, labels_onehot, centers):
    """Pull samples to their class center, push centers apart.

    Per sample: squared distance to the own-class center plus the log-sum-exp
    of negated distances to every center; plus a separation term
    -sum_i log(min_{j != i} ||C_i - C_j||), floored at 1e-8 with a collapse
    counter for callers that want to surface near-duplicate centers.
    """
    emb = T.as_tensor(embeddings)
    centers = T.as_tensor(centers)
    n, d = emb.shape
    k = centers.shape[1]
    y = T.Tensor(labels_onehot)

    own = T.matmul(y, T.transpose(centers))  # [n, d]
    delta = T.sub(emb, own)
    intra = T.reduce_mean(T.reduce_sum(T.mul(delta, delta), axis=-1))

    e3 = T.reshape(emb, (n, d, 1))
    c3 = T.reshape(centers, (1, d, k))
    gap = T.sub(e3, c3)
    dsq = T.reduce_sum(T.mul(gap, gap), axis=1)
    dist = T.sqrt(T.add(dsq, 1e-12))  # [n, k]
    # stable log-sum-exp of -dist with a detached shift
    shift = (-dist.data).max(axis=1, keepdims=True)
    inter_rows = T.add(
        T.log(T.reduce_sum(T.exp(T.sub(T.mul(dist, -1.0), T.Tensor(shift))), axis=1)),
        T.Tensor(shift[:, 0]),
    )
    inter = T.reduce_mean(inter_rows)

    pair = _pairwise_center_distances(centers)
    masked = pair.data + np.diag(np.full(k, np.inf, dtype=pair.data.dtype))
    nearest = masked.argmin(axis=1)
    pick = np.zeros((k, k), dtype=pair.data.dtype)
    pick[np.arange(k), nearest] = 1.0
    chosen = T.reduce_sum(T.mul(pair, T.Tensor(pick)), axis=1)  # [k]
    collapse = int((chosen.data < CENTER_DIST_FLOOR).sum())
    reg = T.mul(T.reduce_sum(T.log(T.clamp_min(chosen, CENTER_DIST_FLOOR))), -1.0)

    return ClusteringLossResult(T.add(T.add(intra, inter), reg), collapse)


def prior_regularization_loss(probs, k=None):
    """KL(uniform prior || batch-mean class probability)."""
    probs = T.as_tensor(probs)
    k = k if k is not None else probs.shape[-1]
    h = 1.0 / k
    pbar = T.reduce_mean(probs, axis=0)
    terms = T.mul(T.log(T.mul(T.clamp_min(pbar, LOG_FLOOR), 1.0 / h)), -h)
    return T.reduce_sum(terms)


@dataclass
class LossFlags:
    """Ablation switches for the optional loss components."""

    use_ae: bool = True
    use_cc: bool = True
    use_prior: bool = True


def total_loss(l_ae, l_c, l_cc, l_rho, alpha, flags):
    """l_ae + alpha * (l_c + l_cc + l_rho), with disabled parts dropped."""
    zero = T.Tensor(np.zeros((), dtype=np.float32))
    supervised = zero
    if l_c is not None:
        supervised = T.add(supervised, l_c)
    if flags.use_cc and l_cc is not None:
        supervised = T.add(supervised, l_cc)
    if flags.use_prior and l_rho is not None:
        supervised = T.add(supervised, l_rho)
    total = T.mul(supervised, float(alpha))
    if flags.use_ae and l_ae is not None:
        total = T.add(total, l_ae)
    return total


# -- pseudo-labels and re-labeling ----------------------------------------------


def classifier_pseudo_label(prob_rows):
    """Exponentially weighted mean of up to five recent probability rows.

    `prob_rows` is [m, k] (or [m, n, k]) ordered oldest to newest, m <= 5; the
    newest row gets weight e^0, each step back decays by e^(-1/2). Weights are
    renormalized over however many rows exist.
    """
    rows = np.asarray(prob_rows, dtype=np.float64)
    m = rows.shape[0]
    if not 1 <= m <= EMA_WINDOW:
        raise ValueError(f"need between 1 and {EMA_WINDOW} stored epochs, got {m}")
    j = np.arange(EMA_WINDOW - m + 1, EMA_WINDOW + 1)
    weights = np.exp((j - EMA_WINDOW) / 2.0)
    weights /= weights.sum()
    return np.tensordot(weights, rows, axes=(0, 0))


def cluster_pseudo_label(embedding, centers):
    """Soft assignment by distance: softmax over negated center distances."""
    emb = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    dist = np.sqrt(((emb[:, :, None] - np.asarray(centers, dtype=np.float64)[None]) ** 2).sum(axis=1))
    z = -dist
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if np.asarray(embedding).ndim == 1 else out


def correct_label(given_onehot, y_c, y_cc, w, halve_pseudo_sum=False):
    """Blend given labels with pseudo-labels and take the argmax.

    The blend is (1-w)*given + w*(y_c + y_cc); the pseudo-label sum is kept at
    mass two unless `halve_pseudo_sum`. Ties go to the given class first, then
    to the lowest class index. Accepts single vectors or batches; returns
    class indices.
    """
    given = np.atleast_2d(np.asarray(given_onehot, dtype=np.float64))
    pseudo = np.zeros_like(given)
    if y_c is not None:
        pseudo = pseudo + np.atleast_2d(np.asarray(y_c, dtype=np.float64))
    if y_cc is not None:
        pseudo = pseudo + np.atleast_2d(np.asarray(y_cc, dtype=np.float64))
    if halve_pseudo_sum and y_c is not None and y_cc is not None:
        pseudo = pseudo / 2.0
    blend = (1.0 - w) * given + w * pseudo
    given_idx = given.argmax(axis=1)
    best = blend.max(axis=1)
    given_val = blend[np.arange(len(blend)), given_idx]
    idx = np.where(given_val >= best, given_idx, blend.argmax(axis=1))
    return int(idx[0]) if np.asarray(given_onehot).ndim == 1 else idx


# -- cluster center initialization ----------------------------------------------


def _kmeans_pp_seed(points, k, gen):
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[gen.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[gen.integers(n)]
            continue
        probs = d2 / total
        centers[i] = points[gen.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(points, k, gen, max_iter=100, tol=1e-4):
    """Lloyd iterations with k-means++ seeding; empty clusters re-seed from the farthest point."""
    points = np.asarray(points, dtype=np.float64)
    centers = _kmeans_pp_seed(points, k, gen)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                new_centers[j] = points[mask].mean(axis=0)
            else:
                farthest = d2.min(axis=1).argmax()
                new_centers[j] = points[farthest]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return centers, d2.argmin(axis=1)


def init_cluster_centers(embeddings, given_labels, k, gen):
    """Cluster the embeddings and match centroids to classes by label overlap.

    Matching is greedy on the centroid-by-class count matrix: repeatedly take
    the largest remaining cell, using each centroid and class once. A class
    that ends up without a centroid falls back to the mean embedding of the
    samples carrying its (noisy) label.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(given_labels)
    if len(embeddings) < k:
        raise ValueError(f"need at least k={k} samples, got {len(embeddings)}")
    centroids, assign = kmeans(embeddings, k, gen)
    counts = np.zeros((k, k), dtype=np.int64)
    for c, lbl in zip(assign, labels):
        counts[c, lbl] += 1
    order = counts.astype(np.float64).copy()
    centers = np.zeros((embeddings.shape[1], k))
    assigned_class = np.full(k, -1)
    used_centroid = np.zeros(k, dtype=bool)
    for _ in range(k):
        flat = order.argmax()
        ci, cj = divmod(int(flat), k)
        assigned_class[ci] = cj
        used_centroid[ci] = True
        order[ci, :] = -1.0
        order[:, cj] = -1.0
    for ci in range(k):
        centers[:, assigned_class[ci]] = centroids[ci]
    for cls in range(k):
        if cls not in assigned_class:
            mask = labels == cls
            if mask.any():
                centers[:, cls] = embeddings[mask].mean(axis=0)
    return centers


# -- training -------------------------------------------------------------------


@dataclass
class RunResult:
    """Outcome of one training run."""

    model: object
    corrected_labels: np.ndarray
    traces: list
    relabel_fraction: float
    corrected_label_accuracy: float | None
    restored_fraction: float | None
    collapse_warnings: int
    final_loss: float


def _encode_all(model, samples, batch=256, batch_stats=False):
    """Embed every sample, in chunks.

    With `batch_stats` the forward uses training-mode batch normalization
    (per chunk) without disturbing the stored running moments; dropout stays
    off. This mirrors what the training loop's own forward would produce and
    keeps the embedding geometry sane on an untrained encoder, where the
    running statistics are still at their initial values.
    """
    out = np.empty((len(samples), model.d), dtype=np.float32)
    saved = None
    if batch_stats:
        saved = [(bn.running_mean.copy(), bn.running_var.copy())
                 for bn in model.bn_states().values()]
    try:
        for start in range(0, len(samples), batch):
            x = T.Tensor(samples[start : start + batch])
            emb = model.encode(x, training=batch_stats)
            out[start : start + batch] = emb.data[:, :, 0]
    finally:
        if saved is not None:
            for bn, (rm, rv) in zip(model.bn_states().values(), saved):
                bn.running_mean = rm
                bn.running_var = rv
    return out


def train(dataset, model, schedule=None, flags=None, rng=None, epochs=100,
          algorithm="srea", halve_pseudo_sum=False, coupled_weight_decay=False,
          trace_path=None, batch_size=None):
    """Run the full training loop and return the fitted model plus diagnostics.

    `dataset` is the training split; its given labels may be noisy. When the
    dataset carries a clean-label oracle, per-epoch corrected-label accuracy
    and the restored fraction of corrupted labels are recorded (the oracle is
    never consulted for the labels the losses see). `algorithm="ce"` trains
    the classifier head alone with the given labels (no ramps, no relabeling).
    `batch_size` defaults to the min(n/10, 128) rule on the training split;
    callers that split beforehand pass the rule's value for the full dataset.
    """
    schedule = schedule or ScheduleParams()
    flags = flags or LossFlags()
    rng = rng or T.Rng(0)
    if algorithm not in ("srea", "ce"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    ce_mode = algorithm == "ce"
    if ce_mode:
        flags = LossFlags(use_ae=False, use_cc=False, use_prior=False)

    samples = dataset.samples
    labels_idx = dataset.labels.astype(np.int64)
    n = len(samples)
    k = dataset.k
    eye = np.eye(k, dtype=np.float32)
    given_onehot = eye[labels_idx]

    shuffle_gen = rng.stream("shuffle")
    dropout_gen = rng.stream("dropout")
    centers_gen = rng.stream("centers")
    opt = Adam(model.parameters(), coupled=coupled_weight_decay)
    bs = batch_size if batch_size is not None else batch_size_for(n)

    clean = dataset.clean_oracle.reveal() if dataset.clean_oracle is not None else None
    flipped = dataset.flipped_mask

    history = []  # completed epochs' probs, oldest first, at most EMA_WINDOW-1
    corrected = labels_idx.copy()
    traces = []
    collapse_total = 0
    trace_fh = open(trace_path, "w") if trace_path else None
    try:
        for t in range(epochs):
            lr = lr_at(t)
            alpha = 1.0 if ce_mode else alpha_at(t, schedule)
            w = 0.0 if ce_mode else w_at(t, schedule)
            if not ce_mode and flags.use_cc and t == schedule.lambda_init:
                emb_all = _encode_all(model, samples, batch=bs, batch_stats=True)
                if not np.isfinite(emb_all).all():
                    raise TrainingDiverged(t, -1, {"total": float("nan")})
                centers = init_cluster_centers(emb_all, labels_idx, k, centers_gen)
                model.centers.data = centers.astype(model.centers.data.dtype)

            # the classifier only needs to run once its probabilities can be
            # consumed: by the supervised losses (alpha > 0), by relabeling
            # (w > 0), or within the history window feeding the first relabel
            run_cls = ce_mode or alpha > 0.0 or w > 0.0 or t >= schedule.lambda_start - (EMA_WINDOW - 1)

            perm = shuffle_gen.permutation(n)
            epoch_probs = np.zeros((n, k), dtype=np.float32)
            sums = {"total": 0.0, "ae": 0.0, "c": 0.0, "cc": 0.0, "rho": 0.0}
            n_batches = 0
            for bstart in range(0, n, bs):
                idx = perm[bstart : bstart + bs]
                if len(idx) < 2:
                    continue  # batchnorm needs more than one value
                # channels-last batches keep the conv GEMMs copy-free
                x = T.Tensor(np.ascontiguousarray(samples[idx].transpose(0, 2, 1)))
                emb3 = model.encode(x, training=True, dropout_gen=dropout_gen, channels_last=True)
                probs_t = None
                if run_cls:
                    logits = model.classify(emb3, training=True, dropout_gen=dropout_gen)
                    probs_t = T.softmax(logits, axis=-1)
                    probs = probs_t.data
                    epoch_probs[idx] = probs

                if w > 0.0:
                    rows = np.stack([h[idx] for h in history] + [probs]) if history else probs[None]
                    y_c = classifier_pseudo_label(rows)
                    y_cc = (cluster_pseudo_label(emb3.data[:, :, 0], model.centers.data)
                            if flags.use_cc else None)
                    ystar = correct_label(given_onehot[idx], y_c, y_cc, w, halve_pseudo_sum)
                else:
                    ystar = labels_idx[idx]
                corrected[idx] = ystar
                ystar_onehot = eye[ystar]

                l_ae = l_c = l_cc = l_rho = None
                if flags.use_ae:
                    x_hat = model.decode(emb3, training=True, dropout_gen=dropout_gen,
                                         channels_last=True)
                    l_ae = reconstruction_loss(x_hat, x)
                if alpha > 0.0:
                    l_c = classification_loss(probs_t, ystar_onehot)
                    if flags.use_cc:
                        emb2 = T.reshape(emb3, (len(idx), model.d))
                        cc = clustering_loss(emb2, ystar_onehot, model.centers)
                        l_cc = cc.value
                        collapse_total += cc.collapse_count
                    if flags.use_prior:
                        l_rho = prior_regularization_loss(probs_t, k)
                loss = total_loss(l_ae, l_c, l_cc, l_rho, alpha, flags)

                val = float(loss.data)
                if not np.isfinite(val):
                    parts = {
                        "total": val,
                        "ae": None if l_ae is None else float(l_ae.data),
                        "c": None if l_c is None else float(l_c.data),
                        "cc": None if l_cc is None else float(l_cc.data),
                        "rho": None if l_rho is None else float(l_rho.data),
                    }
                    raise TrainingDiverged(t, n_batches, parts)

                model.zero_grad()
                loss.backward()
                opt.step(lr)

                sums["total"] += val
                sums["ae"] += float(l_ae.data) if l_ae is not None else 0.0
                sums["c"] += float(l_c.data) if l_c is not None else 0.0
                sums["cc"] += float(l_cc.data) if l_cc is not None else 0.0
                sums["rho"] += float(l_rho.data) if l_rho is not None else 0.0
                n_batches += 1

            history.append(epoch_probs)
            if len(history) > EMA_WINDOW - 1:
                history.pop(0)

            record = {
                "epoch": t,
                "alpha": alpha,
                "w": w,
                "lr": lr,
                "loss_total": sums["total"] / max(n_batches, 1),
                "loss_ae": sums["ae"] / max(n_batches, 1),
                "loss_c": sums["c"] / max(n_batches, 1),
                "loss_cc": sums["cc"] / max(n_batches, 1),
                "loss_rho": sums["rho"] / max(n_batches, 1),
                "relabel_fraction": float((corrected != labels_idx).mean()),
            }
            if clean is not None:
                record["corrected_label_accuracy"] = float((corrected == clean).mean())
            traces.append(record)
            if trace_fh:
                trace_fh.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if trace_fh:
            trace_fh.close()

    restored = None
    accuracy = None
    if clean is not None:
        accuracy = float((corrected == clean).mean())
        if flipped is not None and flipped.any():
            restored = float((corrected[flipped] == clean[flipped]).mean())
    return RunResult(
        model=model,
        corrected_labels=corrected,
        traces=traces,
        relabel_fraction=float((corrected != labels_idx).mean()),
        corrected_label_accuracy=accuracy,
        restored_fraction=restored,
        collapse_warnings=collapse_total,
        final_loss=traces[-1]["loss_total"] if traces else float("nan"),
    )


def predict(model, samples, batch=256):
    """Class predictions for raw samples, eval mode."""
    out = np.empty(len(samples), dtype=np.int64)
    for start in range(0, len(samples), batch):
        x = T.Tensor(samples[start : start + batch])
        emb = model.encode(x, training=False)
        logits = model.classify(emb, training=False)
        out[start : start + batch] = logits.data.argmax(axis=1)
    return out
