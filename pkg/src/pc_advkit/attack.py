"""Targeted attacks that push points along their surface normals.

The main attack keeps one scalar delta per point; the adversarial cloud is
clean + delta * normal with every delta hard-clamped to [-B, B].  The
objective is cross-entropy toward the target class plus Hausdorff and
Chamfer regularizers (directed, squared) that keep the perturbation close
to the clean surface.  When a transformation model rides along in the
config, the cross-entropy is taken through it, which is what buys
transferable examples; attack success is always judged on the target
model's logits of the raw adversarial cloud.

A sign-step baseline on raw coordinates (iterated FGSM) is included as
the imperceptibility comparator.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .geometry import PointCloud, estimate_normals
from .metrics import MetricReport, full_report
from .nn import AdamState, _backward_from_cache, _forward_cache, adam_step, cross_entropy


@dataclass
class AttackConfig:
    target_class: int
    bound_B: float = 0.02
    lambda1: float = 0.1  # Hausdorff weight
    lambda2: float = 1.0  # Chamfer weight
    alpha: float = 1.0  # weight of the through-transform CE in the joint loss
    iterations: int = 500
    lr: float = 0.01
    k_neighbors: int = 20
    # Optional distortion the cross-entropy is taken through: a
    # TransformModel or an AnalyticEnsemble.  Runtime object, not part of
    # the serialized config.
    transform: object = field(default=None, repr=False, compare=False)

    def validate(self, num_classes=None):
        if not 0.0 <= self.bound_B <= 1.0:
            raise InvalidInputError(f"bound_B must lie in [0, 1], got {self.bound_B}")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.lr <= 0.0:
            raise InvalidInputError("lr must be positive")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0 or self.alpha < 0.0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.k_neighbors < 1:
            raise InvalidInputError("k_neighbors must be >= 1")
        if num_classes is not None and not 0 <= self.target_class < num_classes:
            raise InvalidInputError(
                f"target_class {self.target_class} out of range for {num_classes} classes"
            )


@dataclass
class PerturbationState:
    """Attack state: per-point scalar offsets along fixed unit normals."""

    clean: PointCloud  # carries the normals used as perturbation directions
    delta: np.ndarray  # (n,)
    adam: AdamState

    @property
    def normals(self):
        return self.clean.normals


@dataclass
class AttackResult:
    adversarial: PointCloud
    success: bool
    iterations_used: int
    metrics: MetricReport
    final_losses: dict


def project_bound(delta, bound):
    """Clamp every scalar offset into [-bound, bound]."""
    if bound < 0.0:
        raise InvalidInputError(f"bound must be nonnegative, got {bound}")
    return np.clip(delta, -bound, bound)


def materialize(state):
    """Adversarial cloud for the current state; label copied from clean."""
    pts = state.clean.points + state.delta[:, None] * state.normals
    return PointCloud(pts, label=state.clean.label)


def _objective(model, points, clean_pts, cfg, transform, need_grad):
    """Loss, its gradient on the perturbed coordinates, and the raw prediction."""
    dP = None
    if transform is None:
        logits, _, cache = _forward_cache(model, points)
        ce, dlogits = cross_entropy(logits, cfg.target_class)
        pred = int(np.argmax(logits))
        if need_grad:
            _, dP = _backward_from_cache(model, cache, dlogits, need_params=False)
    else:
        out, tcache = transform.forward_points(points)
        logits_t, _, cache_t = _forward_cache(model, out)
        ce, dlogits = cross_entropy(logits_t, cfg.target_class)
        if need_grad:
            _, dout = _backward_from_cache(model, cache_t, dlogits, need_params=False)
            dP = transform.input_grad(tcache, dout)
        logits_plain, _, _ = _forward_cache(model, points)
        pred = int(np.argmax(logits_plain))
    idx, sqd = kernels.nearest_correspondence(points, clean_pts)
    cham = float(sqd.mean())
    haus = float(sqd.max())
    if need_grad:
        n = points.shape[0]
        # Chamfer flows through every nearest pair, Hausdorff only through
        # the argmax pair; correspondences are constants of this iteration.
        dP += cfg.lambda2 * (2.0 / n) * (points - clean_pts[idx])
        i_star = int(np.argmax(sqd))
        dP[i_star] += cfg.lambda1 * 2.0 * (points - clean_pts[idx])[i_star]
    total = ce + cfg.lambda1 * haus + cfg.lambda2 * cham
    losses = {"cross_entropy": ce, "hausdorff": haus, "chamfer": cham, "total": total}
    return losses, dP, pred


def attack_loss(model, state, cfg):
    """Objective value and its gradient on delta for the current state."""
    transform = cfg.transform
    if transform is not None and hasattr(transform, "begin_iteration"):
        transform.begin_iteration()
    points = state.clean.points + state.delta[:, None] * state.normals
    losses, dP, _ = _objective(
        model, points, state.clean.points, cfg, transform, need_grad=True
    )
    delta_grad = (dP * state.normals).sum(axis=1)
    return losses["total"], delta_grad


def _with_normals(clean, k):
    if clean.normals is not None:
        return clean
    return estimate_normals(clean, k)


def run_ita(model, clean, cfg, seed=0):
    """Run the full attack schedule on one cloud.

    Normals are estimated once.  delta starts as uniform noise in
    [-B/10, B/10] and takes cfg.iterations Adam steps, each followed by the
    hard clamp to [-B, B].  Among iterates that the target model classifies
    as the target class, the one with the lowest total loss is returned;
    if none succeeds, the final iterate is returned with success=False.
    """
    cfg.validate(num_classes=model.num_classes)
    clean_n = _with_normals(clean, cfg.k_neighbors)
    clean_pts = clean_n.points
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-cfg.bound_B / 10.0, cfg.bound_B / 10.0, clean_n.n)
    state = PerturbationState(
        clean=clean_n, delta=delta, adam=AdamState.for_params([delta], lr=cfg.lr)
    )
    transform = cfg.transform
    best = None  # (total_loss, delta copy, iteration, losses)

    def evaluate(iteration, need_grad):
        nonlocal best
        if transform is not None and hasattr(transform, "begin_iteration"):
            transform.begin_iteration()
        points = clean_pts + state.delta[:, None] * state.normals
        losses, dP, pred = _objective(model, points, clean_pts, cfg, transform, need_grad)
        if pred == cfg.target_class and (best is None or losses["total"] < best[0]):
            best = (losses["total"], state.delta.copy(), iteration, losses)
        return losses, dP

    final_losses = None
    for it in range(1, cfg.iterations + 1):
        _, dP = evaluate(it, need_grad=True)
        delta_grad = (dP * state.normals).sum(axis=1)
        adam_step(state.adam, [state.delta], [delta_grad])
        np.clip(state.delta, -cfg.bound_B, cfg.bound_B, out=state.delta)
    final_losses, _ = evaluate(cfg.iterations, need_grad=False)

    if best is not None:
        _, best_delta, iterations_used, losses = best
        state.delta = best_delta
        success = True
    else:
        iterations_used, losses = cfg.iterations, final_losses
        success = False
    adv = materialize(state)
    report = full_report(adv, clean_n, cfg.k_neighbors)
    return AttackResult(
        adversarial=adv,
        success=success,
        iterations_used=iterations_used,
        metrics=report,
        final_losses=losses,
    )


def fgsm_baseline(model, clean, epsilon, target, iterations=500, k_neighbors=20):
    """Iterated sign-gradient steps on raw coordinates, the L-inf comparator.

    Step size epsilon/iterations, every iterate clipped back into the
    L-inf ball of radius epsilon around the clean coordinates.  There is no
    perturbation-minimizing term and no iterate selection: the final iterate
    is returned and success is judged on it, so coordinates with a stable
    gradient sign saturate the budget.
    """
    if epsilon < 0.0:
        raise InvalidInputError(f"epsilon must be nonnegative, got {epsilon}")
    if not 0 <= target < model.num_classes:
        raise InvalidInputError(f"target {target} out of range")
    clean_n = _with_normals(clean, k_neighbors)
    x0 = clean_n.points
    x = x0.copy()
    lo, hi = x0 - epsilon, x0 + epsilon
    step = epsilon / iterations
    for _ in range(iterations):
        logits, _, cache = _forward_cache(model, x)
        _, dlogits = cross_entropy(logits, target)
        _, dx = _backward_from_cache(model, cache, dlogits, need_params=False)
        x = np.clip(x - step * np.sign(dx), lo, hi)
    logits, _, _ = _forward_cache(model, x)
    loss, _ = cross_entropy(logits, target)
    success = int(np.argmax(logits)) == target
    adv = PointCloud(x, label=clean_n.label)
    report = full_report(adv, clean_n, k_neighbors)
    return AttackResult(
        adversarial=adv,
        success=success,
        iterations_used=iterations,
        metrics=report,
        final_losses={"cross_entropy": loss, "total": loss},
    )
