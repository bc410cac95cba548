"""Adam updates, stratified splits, the training loop, and the CIR metric.

The loop is fully deterministic: the split derives from the run seed,
epoch e shuffles with Rng(seed + e), and every update is plain numpy.
lr = 0 freezes the model completely (no parameter updates and no
running-statistic updates), so evaluation metrics cannot drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericalError, ParameterError
from .tensor import Rng, Tensor, no_grad
from .ops import softmax_xent


@dataclass
class AdamState:
    """Per-parameter moment estimates keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("betas must lie in [0, 1)")


def adam_step(params: Sequence[tuple[str, Tensor]], st: AdamState) -> None:
    """Bias-corrected Adam update in place; a missing grad counts as zero.

    Moments live in the parameter dtype; the correction and update are
    computed in float64 so the first step with unit gradient lands at
    lr/(1+eps) to storage rounding.
    """
    st.step += 1
    t = st.step
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        m, v = st.m[name], st.v[name]
        if m.shape != p.data.shape:
            raise DimensionError(f"moment shape {m.shape} stale for {name}")
        dt = p.data.dtype.type
        b1, b2 = dt(st.beta1), dt(st.beta2)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        # corrections use the storage-rounded betas the decays actually applied
        c1 = 1.0 / (1.0 - float(b1) ** t)
        c2 = 1.0 / (1.0 - float(b2) ** t)
        upd = st.lr * (m.astype(np.float64) * c1) / (
            np.sqrt(v.astype(np.float64) * c2) + st.eps
        )
        p.data -= upd.astype(p.data.dtype)


def cir(preds: np.ndarray, labels: np.ndarray) -> float:
    """Correct identification rate: 100 * matches / N."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ParameterError("cir of empty prediction vector")
    if preds.shape != labels.shape:
        raise DimensionError(f"preds {preds.shape} vs labels {labels.shape}")
    return 100.0 * float((preds == labels).sum()) / preds.size


@dataclass
class SplitPlan:
    """Disjoint stratified index sets over a class-major sample ordering."""

    train: list
    val: list
    test: list
    seed: int


def make_split(
    n_per_class: int,
    classes: int,
    seed: int,
    fractions: tuple[float, float, float] = (0.3, 0.4, 0.3),
) -> SplitPlan:
    """Seeded per-class shuffle, then contiguous train/val/test slices.

    Flat sample index = class * n_per_class + within-class index, so the
    caller must order samples class-major. Each fraction of n_per_class
    must be integral.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions sum to {sum(fractions)}, need 1.0")
    counts = []
    for f in fractions:
        x = f * n_per_class
        if abs(x - round(x)) > 1e-9:
            raise ParameterError(
                f"fraction {f} of {n_per_class} samples per class is not integral"
            )
        counts.append(round(x))
    rng = Rng(seed).spawn("split")
    tr, va, te = [], [], []
    for c in range(classes):
        perm = list(range(n_per_class))
        rng.shuffle(perm)
        base = c * n_per_class
        tr.extend(base + i for i in perm[: counts[0]])
        va.extend(base + i for i in perm[counts[0] : counts[0] + counts[1]])
        te.extend(base + i for i in perm[counts[0] + counts[1] :])
    return SplitPlan(train=tr, val=va, test=te, seed=seed)


def batch_tensors(dataset, idxs) -> tuple[Tensor, Tensor, np.ndarray]:
    """Stack the selected samples into (fp, fv, labels) batch arrays."""
    fps = [dataset[i].fp.data for i in idxs]
    fvs = [dataset[i].fv.data for i in idxs]
    if any(a.shape != fps[0].shape for a in fps) or any(a.shape != fvs[0].shape for a in fvs):
        raise DataError("samples have differing image sizes; cannot batch")
    labels = np.array([dataset[i].label for i in idxs], dtype=np.int64)
    return Tensor(np.concatenate(fps, axis=0)), Tensor(np.concatenate(fvs, axis=0)), labels


def predict(model, dataset, idxs, batch: int) -> np.ndarray:
    """Eval-mode argmax class predictions over the given sample indices."""
    out = np.empty(len(idxs), dtype=np.int64)
    with no_grad():
        for s in range(0, len(idxs), batch):
            chunk = idxs[s : s + batch]
            fp, fv, _ = batch_tensors(dataset, chunk)
            logits = model.forward_batch(fp, fv, "eval")
            out[s : s + len(chunk)] = logits.data.reshape(len(chunk), -1).argmax(axis=1)
    return out


def _check_finite(loss_val: float, params) -> None:
    if not np.isfinite(loss_val):
        raise NumericalError("non-finite training loss at softmax_xent")
    for name, p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in {name}")


@dataclass
class TrainResult:
    history: list          # (epoch, train_loss, val_cir) rows, epoch 1-based
    best_val_cir: float
    best_epoch: int
    test_cir: float


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_cir"]
    lines += [f"{e},{l:.6f},{c:.6f}" for e, l, c in history]
    return "\n".join(lines) + "\n"


def class_major(dataset) -> list:
    """Stable-sort samples by label so split index arithmetic applies."""
    return sorted(dataset, key=lambda s: s.label)


def train_loop(
    model,
    dataset,
    cfg,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """Run cfg.epochs of shuffled mini-batch Adam; keep the best-val weights.

    The model ends restored to its best-validation state; test CIR is
    computed on that state.
    """
    samples = class_major(dataset)
    labels = np.array([s.label for s in samples])
    classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=classes)
    if (counts != counts[0]).any():
        raise DataError(f"per-class counts differ: {counts.tolist()}")
    n_per_class = int(counts[0])
    split = make_split(n_per_class, classes, cfg.seed, tuple(cfg.split))

    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    learning = cfg.lr > 0
    mode = "train" if learning else "eval"

    best_val = -1.0
    best_epoch = 0
    best_state = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = list(split.train)
        Rng(cfg.seed + epoch).shuffle(order)
        loss_sum = 0.0
        for s in range(0, len(order), cfg.batch):
            chunk = order[s : s + cfg.batch]
            fp, fv, y = batch_tensors(samples, chunk)
            logits = model.forward_batch(fp, fv, mode)
            loss, _ = softmax_xent(logits, y)
            loss_sum += loss.item() * len(chunk)
            if learning:
                for _, p in params:
                    p.grad = None
                loss.backward()
                _check_finite(loss.item(), params)
                adam_step(params, opt)
        train_loss = loss_sum / len(order)
        val_cir = cir(predict(model, samples, split.val, cfg.batch), labels[split.val])
        history.append((epoch, train_loss, val_cir))
        if progress is not None:
            progress(epoch, train_loss, val_cir)
        if val_cir > best_val:
            best_val = val_cir
            best_epoch = epoch
            best_state = [arr.copy() for _, arr, _ in model.state_entries()]

    if best_state is not None:
        for (_, arr, _), saved in zip(model.state_entries(), best_state):
            arr[...] = saved
    test_cir = cir(predict(model, samples, split.test, cfg.batch), labels[split.test])
    return TrainResult(history=history, best_val_cir=best_val,
                       best_epoch=best_epoch, test_cir=test_cir)
