"""Training objectives over the angular prototype space.

Five pieces combine into the step loss: active-prototype cosine
cross-entropy, virtual-class cross-entropy, the virtual-intrinsic
interaction loss with its learnable positive/negative boundary
rectification, the fixed-shift old/new boundary rectification applied to
old-class targets, and feature-direction distillation against the previous
task's snapshot. The learnable rectification bound is carried as an
unconstrained raw scalar and read through the logistic, so it stays
strictly inside (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .etf import PrototypeBank

PROB_EPS = 1e-12
ONBR_MODES = ("subtractive", "angular")


class LossComputationError(RuntimeError):
    """A loss component went non-finite; carries the last breakdown."""

    def __init__(self, message: str, breakdown: "LossBreakdown | None" = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class LossWeights:
    """Component weights and the ablation toggles.

    ``onbr_shift`` is the old/new hyperparameter; the effective subtractive
    shift is ``onbr_shift * pi/2`` and must stay below 1.
    """

    lambda_vii: float = 0.01
    lambda_dis_base: float = 5.0
    onbr_shift: float = 0.1
    mix: float = 0.5
    use_softmax_all: bool = False
    use_virtual_ce: bool = False
    use_vii: bool = False
    use_pnbr: bool = False
    use_onbr: bool = False
    use_distill: bool = False
    onbr_mode: str = "subtractive"

    def __post_init__(self):
        if self.lambda_vii < 0:
            raise ValueError("lambda_vii must be non-negative")
        if not 0.0 <= self.onbr_shift < 2.0 / math.pi:
            raise ValueError("onbr_shift must lie in [0, 2/pi) so the shift stays below 1")
        if not 0.0 < self.mix < 1.0:
            raise ValueError("mix must lie strictly inside (0, 1)")
        if self.onbr_mode not in ONBR_MODES:
            raise ValueError(f"onbr_mode must be one of {ONBR_MODES}")

    def with_toggles(self, **kw) -> "LossWeights":
        return replace(self, **kw)

    def needs_virtual_prototypes(self) -> bool:
        return self.use_virtual_ce or self.use_vii


@dataclass
class LossBreakdown:
    """Per-step component values and the learnable head scalars."""

    l_ce: float = 0.0
    l_v: float = 0.0
    l_vii: float = 0.0
    l_dis: float = 0.0
    l_total: float = 0.0
    lambda_vii: float = 0.0
    lambda_dis: float = 0.0
    eta: float = 0.0
    pnbr_bound: float = 0.0
    saturations: int = 0
    virtual_skipped: bool = False

    def identity_gap(self) -> float:
        parts = self.l_ce + self.l_v + self.lambda_vii * self.l_vii + self.lambda_dis * self.l_dis
        return abs(self.l_total - parts)

    def as_record(self) -> dict:
        return {
            "l_ce": self.l_ce,
            "l_v": self.l_v,
            "l_vii": self.l_vii,
            "l_dis": self.l_dis,
            "l_total": self.l_total,
            "lambda_dis": self.lambda_dis,
            "eta": self.eta,
            "pnbr_bound": self.pnbr_bound,
            "saturations": self.saturations,
            "virtual_skipped": self.virtual_skipped,
        }


def pnbr_bound(raw: ad.Tensor) -> ad.Tensor:
    """Learnable bound a = logistic(raw), strictly inside (0, 1)."""
    return ad.sigmoid(raw)


def pnbr(cosine, bound) -> ad.Tensor:
    """Rectified similarity (cos - a) / (1 - a); identity at a = 0, fixed
    point at cos = 1, strictly below the raw cosine elsewhere."""
    cosine = ad.constant(cosine)
    bound = ad.constant(bound)
    return ad.mul(ad.sub(cosine, bound), ad.reciprocal(ad.sub(1.0, bound)))


def onbr(cosines, shift: float, rows, cols, mode: str = "subtractive") -> ad.Tensor:
    """Rectify the (row, col) target entries of a cosine matrix for
    old-class instances; every other entry passes through untouched.

    ``shift`` is the hyperparameter before scaling; the applied shift is
    shift * pi/2. The subtractive form mirrors the learnable rectification
    with that fixed shift; the angular alternative applies cos(theta + shift*pi/2).
    """
    cosines = ad.constant(cosines)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if mode not in ONBR_MODES:
        raise ValueError(f"unknown onbr mode {mode!r}")
    if not 0.0 <= shift < 2.0 / math.pi:
        raise ValueError("onbr shift must lie in [0, 2/pi)")
    if shift == 0.0 or rows.size == 0:
        return cosines
    s = shift * math.pi / 2.0
    n, k = cosines.data.shape
    if mode == "subtractive":
        scale = np.ones((n, k))
        offset = np.zeros((n, k))
        scale[rows, cols] = 1.0 / (1.0 - s)
        offset[rows, cols] = -s / (1.0 - s)
        return ad.add(ad.mul(cosines, scale), offset)
    sel = np.zeros((n, k))
    sel[rows, cols] = 1.0
    sine = ad.sqrt(ad.clamp(ad.sub(1.0, ad.mul(cosines, cosines)), lo=PROB_EPS))
    shifted = ad.sub(ad.mul(cosines, math.cos(s)), ad.mul(sine, math.sin(s)))
    return ad.add(ad.mul(cosines, 1.0 - sel), ad.mul(shifted, sel))


def prototype_cosines(features: ad.Tensor, bank: PrototypeBank) -> ad.Tensor:
    """Cosines of normalized features against every fixed prototype column."""
    return ad.matmul(ad.normalize(features), ad.constant(bank.matrix))


def softmax_mask(bank: PrototypeBank, mode: str) -> np.ndarray:
    if mode == "active_only":
        if not bank.active.any():
            raise ValueError("no active prototypes for active-only softmax")
        return bank.active.copy()
    if mode == "all":
        return np.ones(bank.K, dtype=bool)
    raise ValueError(f"unknown prototype mode {mode!r}")


def cosine_logits(features: ad.Tensor, bank: PrototypeBank, eta, mode: str = "active_only") -> tuple[ad.Tensor, np.ndarray]:
    """Temperature-scaled cosine logits over the selected prototype set.

    Returns the (n, K) logit tensor and the boolean column mask to feed the
    masked softmax; inactive columns stay out of the denominator rather
    than being pushed down with -inf logits.
    """
    mask = softmax_mask(bank, mode)
    logits = ad.mul(ad.constant(eta), prototype_cosines(features, bank))
    return logits, mask


def target_columns(bank: PrototypeBank, labels) -> np.ndarray:
    cols = []
    for lbl in labels:
        lbl = int(lbl)
        if lbl not in bank.assignment:
            raise KeyError(f"label {lbl} is bound to no active prototype")
        cols.append(bank.assignment[lbl])
    return np.asarray(cols, dtype=np.intp)


def active_cross_entropy(
    features: ad.Tensor,
    labels,
    bank: PrototypeBank,
    eta,
    mode: str = "active_only",
    onbr_shift: float = 0.0,
    old_rows=None,
    onbr_mode: str = "subtractive",
) -> ad.Tensor:
    """Mean cross-entropy of the cosine softmax over the selected prototypes.

    When an old/new shift is given, the ground-truth cosine of each listed
    old-class row is rectified before temperature scaling.
    """
    mask = softmax_mask(bank, mode)
    cols = target_columns(bank, labels)
    if not mask[cols].all():
        raise KeyError("a label is bound to a prototype outside the softmax set")
    cos = prototype_cosines(features, bank)
    if onbr_shift and old_rows is not None and len(old_rows):
        rows = np.asarray(old_rows, dtype=np.intp)
        cos = onbr(cos, onbr_shift, rows, cols[rows], mode=onbr_mode)
    probs = ad.masked_softmax(ad.mul(ad.constant(eta), cos), mask)
    picked = ad.take_per_row(probs, cols)
    return ad.neg(ad.mean(ad.log(picked)))


def synthesize_virtual(inputs: np.ndarray, labels: np.ndarray, mix: float) -> tuple[np.ndarray, np.ndarray] | None:
    """Blend each instance with the mean input of every other class in the
    batch: mix * x + (1-mix)/(k-1) * sum of other-class means.

    Returns None for single-class batches (interaction inactive that step).
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        return None
    means = {int(c): inputs[labels == c].mean(axis=0) for c in present}
    total = np.sum(list(means.values()), axis=0)
    k = present.size
    coeff = (1.0 - mix) / (k - 1)
    others = total[None, :] - np.stack([means[int(c)] for c in labels], axis=0)
    virtual = mix * inputs + coeff * others
    return virtual, labels.copy()


def virtual_prototype_matrix(vprotos: dict[int, ad.Tensor], labels_present) -> tuple[ad.Tensor, dict[int, int]]:
    """Normalized virtual prototypes stacked into rows, plus label -> row map."""
    order = sorted(vprotos)
    missing = [int(l) for l in np.unique(labels_present) if int(l) not in vprotos]
    if missing:
        raise KeyError(f"no virtual prototype for classes {missing}")
    rows = [ad.normalize(vprotos[lbl]) for lbl in order]
    return ad.stack_rows(rows), {lbl: i for i, lbl in enumerate(order)}


def virtual_cross_entropy(virtual_features: ad.Tensor, labels, vprotos: dict[int, ad.Tensor], eta) -> ad.Tensor:
    """Cosine softmax cross-entropy over the virtual prototypes only."""
    vmat, index = virtual_prototype_matrix(vprotos, labels)
    cos = ad.matmul(ad.normalize(virtual_features), ad.transpose(vmat))
    probs = ad.masked_softmax(ad.mul(ad.constant(eta), cos), np.ones(len(index), dtype=bool))
    cols = np.asarray([index[int(l)] for l in labels], dtype=np.intp)
    picked = ad.take_per_row(probs, cols)
    return ad.neg(ad.mean(ad.log(picked)))


def sigmoid_prob(cosine, eta, bound=None) -> ad.Tensor:
    """Sigmoid probability of a (possibly rectified) cosine similarity."""
    s = ad.constant(cosine)
    if bound is not None:
        s = pnbr(s, bound)
    return ad.sigmoid(ad.mul(ad.constant(eta), s))


def _count_saturated(probs: np.ndarray, use_low: np.ndarray, use_high: np.ndarray) -> int:
    low = (probs < PROB_EPS) & use_low
    high = (probs > 1.0 - PROB_EPS) & use_high
    return int(low.sum() + high.sum())


def interaction_loss(
    intrinsic_features: ad.Tensor | None,
    intrinsic_labels,
    virtual_features: ad.Tensor | None,
    virtual_labels,
    vprotos: dict[int, ad.Tensor],
    eta,
    bound=None,
) -> tuple[ad.Tensor, int]:
    """Virtual-intrinsic interaction loss and the saturation-event count.

    Virtual instances pull toward their own virtual prototype and push away
    from every other one; intrinsic instances push away from their own
    class's virtual prototype. The own-class term is excluded from the
    virtual repulsion sum, which keeps all three gradient directions
    one-sided. Probabilities are clamped to [eps, 1-eps] before the logs;
    clamped entries count as saturation events.
    """
    n_v = 0 if virtual_features is None else virtual_features.shape[0]
    n_t = 0 if intrinsic_features is None else intrinsic_features.shape[0]
    if n_v + n_t == 0:
        raise ValueError("interaction loss over an empty batch")
    virtual_labels = [] if virtual_labels is None else list(virtual_labels)
    intrinsic_labels = [] if intrinsic_labels is None else list(intrinsic_labels)
    all_labels = virtual_labels + intrinsic_labels
    vmat, index = virtual_prototype_matrix(vprotos, all_labels)
    terms = []
    saturations = 0

    if n_v:
        cos_v = ad.matmul(ad.normalize(virtual_features), ad.transpose(vmat))
        probs_v = sigmoid_prob(cos_v, eta, bound)
        onehot = np.zeros((n_v, len(index)))
        onehot[np.arange(n_v), [index[int(l)] for l in virtual_labels]] = 1.0
        saturations += _count_saturated(probs_v.data, onehot > 0, onehot == 0)
        clamped = ad.clamp(probs_v, PROB_EPS, 1.0 - PROB_EPS)
        terms.append(ad.neg(ad.tensor_sum(ad.mul(ad.log(clamped), onehot))))
        terms.append(ad.neg(ad.tensor_sum(ad.mul(ad.log(ad.sub(1.0, clamped)), 1.0 - onehot))))

    if n_t:
        cos_t = ad.matmul(ad.normalize(intrinsic_features), ad.transpose(vmat))
        probs_t = sigmoid_prob(cos_t, eta, bound)
        onehot_t = np.zeros((n_t, len(index)))
        onehot_t[np.arange(n_t), [index[int(l)] for l in intrinsic_labels]] = 1.0
        saturations += _count_saturated(probs_t.data, np.zeros_like(onehot_t, dtype=bool), onehot_t > 0)
        clamped_t = ad.clamp(probs_t, PROB_EPS, 1.0 - PROB_EPS)
        terms.append(ad.neg(ad.tensor_sum(ad.mul(ad.log(ad.sub(1.0, clamped_t)), onehot_t))))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / (n_v + n_t)), saturations


def alignment_distillation(live_features: ad.Tensor, snapshot_features: np.ndarray) -> ad.Tensor:
    """One minus the mean cosine between live and snapshot feature directions.

    The snapshot side enters as a constant, so no gradient ever reaches the
    old model. Ranges over [0, 2].
    """
    snap = np.atleast_2d(np.asarray(snapshot_features, dtype=np.float64))
    norms = np.linalg.norm(snap, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm snapshot feature for instance {int(zero[0])}")
    snap = snap / norms[:, None]
    if snap.shape != live_features.shape:
        raise ad.ShapeError(f"snapshot features {snap.shape} != live features {live_features.shape}")
    return ad.sub(1.0, ad.mean(ad.rows_dot(ad.normalize(live_features), ad.constant(snap))))


def combine(
    weights: LossWeights,
    task_index: int,
    new_class_count: int,
    old_class_count: int,
    l_ce: ad.Tensor,
    l_v: ad.Tensor | None = None,
    l_vii: ad.Tensor | None = None,
    l_dis: ad.Tensor | None = None,
    eta_value: float = 0.0,
    bound_value: float = 0.0,
    saturations: int = 0,
    virtual_skipped: bool = False,
) -> tuple[ad.Tensor, LossBreakdown]:
    """Weighted sum of the enabled components plus its breakdown record.

    The distillation weight follows the adaptive convention
    base * sqrt(new/old) from the second task on; disabled or absent
    components contribute exactly zero.
    """
    lambda_dis = 0.0
    if weights.use_distill and task_index >= 2 and l_dis is not None:
        if old_class_count <= 0:
            raise ValueError("distillation weight needs a positive old-class count")
        lambda_dis = weights.lambda_dis_base * math.sqrt(new_class_count / old_class_count)

    total = l_ce
    if weights.use_virtual_ce and l_v is not None:
        total = ad.add(total, l_v)
    if weights.use_vii and l_vii is not None:
        total = ad.add(total, ad.mul(weights.lambda_vii, l_vii))
    if lambda_dis:
        total = ad.add(total, ad.mul(lambda_dis, l_dis))

    breakdown = LossBreakdown(
        l_ce=float(l_ce.data),
        l_v=float(l_v.data) if (weights.use_virtual_ce and l_v is not None) else 0.0,
        l_vii=float(l_vii.data) if (weights.use_vii and l_vii is not None) else 0.0,
        l_dis=float(l_dis.data) if lambda_dis else 0.0,
        l_total=float(total.data),
        lambda_vii=weights.lambda_vii if weights.use_vii else 0.0,
        lambda_dis=lambda_dis,
        eta=eta_value,
        pnbr_bound=bound_value,
        saturations=saturations,
        virtual_skipped=virtual_skipped,
    )
    for name, value in (("l_ce", breakdown.l_ce), ("l_v", breakdown.l_v), ("l_vii", breakdown.l_vii), ("l_dis", breakdown.l_dis), ("l_total", breakdown.l_total)):
        if not math.isfinite(value):
            raise LossComputationError(f"{name} is non-finite", breakdown)
    return total, breakdown
