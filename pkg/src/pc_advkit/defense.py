"""Input-side defenses and latent-constraint adversarial training.

Input defenses (simple random sampling, statistical outlier removal,
noise along the normal) transform a cloud before classification.  The
training-side defense augments the usual class loss with feature-space
constraints: pull each cloud, its adversarial counterpart and same-class
clouds together in latent space, and push other-class clouds and targeted
adversarial examples away.  Feature distances are plain L2 norms (not
squared) with subgradient 0 at coincident features.
"""

from dataclasses import dataclass, replace

import numpy as np

from .attack import AttackConfig, run_ita
from .errors import InvalidInputError, InvalidStateError
from .geometry import PointCloud, estimate_normals
from .nn import _backward_latent_from_cache, _forward_cache, train_classifier


@dataclass
class DefenseConfig:
    """Parameter bag for the three input-space defenses.

    srs_keep and the SOR settings follow the conventional values from the
    defenses' original formulations; noise_sigma_frac is the noise scale
    as a fraction of the bounding-sphere radius.
    """

    srs_keep: float = 0.875
    sor_k: int = 2
    sor_std_mult: float = 1.1
    noise_sigma_frac: float = 0.01

    def validate(self):
        if not 0.0 < self.srs_keep <= 1.0:
            raise InvalidInputError(f"srs_keep must lie in (0, 1], got {self.srs_keep}")
        if self.sor_k < 1:
            raise InvalidInputError(f"sor_k must be >= 1, got {self.sor_k}")
        if self.sor_std_mult <= 0.0:
            raise InvalidInputError(f"sor_std_mult must be positive, got {self.sor_std_mult}")
        if self.noise_sigma_frac < 0.0:
            raise InvalidInputError(
                f"noise_sigma_frac must be nonnegative, got {self.noise_sigma_frac}"
            )

    def entries(self):
        """Expand into one harness defense entry per kind."""
        self.validate()
        return (
            {"kind": "srs", "name": "srs", "keep": self.srs_keep},
            {"kind": "sor", "name": "sor", "k": self.sor_k, "std_mult": self.sor_std_mult},
            {"kind": "noise", "name": "noise", "sigma_frac": self.noise_sigma_frac},
        )


def srs(cloud, keep, seed=0):
    """Simple random sampling: keep a uniform subset of the points."""
    if not 0.0 < keep <= 1.0:
        raise InvalidInputError(f"keep fraction must lie in (0, 1], got {keep}")
    n = cloud.n
    m = int(round(keep * n))
    if m < 1:
        raise InvalidInputError(f"keep={keep} leaves no points of {n}")
    rng = np.random.default_rng(seed)
    sel = rng.choice(n, size=m, replace=False)
    normals = None if cloud.normals is None else cloud.normals[sel]
    return PointCloud(cloud.points[sel], normals, cloud.label)


def sor(cloud, k=2, std_mult=1.1):
    """Statistical outlier removal on mean k-nearest-neighbor distance.

    Points whose mean distance exceeds mean + std_mult * std (population
    std) are discarded; survivors keep their order.  Removing everything
    raises InvalidStateError.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    from . import kernels

    pts = cloud.points
    idx = kernels.knn_indices(pts, k)
    if idx.shape[1] == 0:
        raise InvalidInputError("SOR needs at least 2 points")
    diffs = pts[idx] - pts[:, None, :]
    dists = np.sqrt((diffs * diffs).sum(axis=2))
    mean_d = dists.mean(axis=1)
    mu = mean_d.mean()
    sigma = mean_d.std()
    keep = mean_d <= mu + std_mult * sigma
    if not keep.any():
        raise InvalidStateError("SOR removed every point")
    normals = None if cloud.normals is None else cloud.normals[keep]
    return PointCloud(pts[keep], normals, cloud.label)


def noise_along_normal(cloud, sigma_frac, k=20, seed=0):
    """Gaussian displacement along each point's normal.

    Per-point scale g ~ N(0, sigma_frac^2) times the bounding-sphere radius
    (max distance from the centroid).  sigma_frac=0 returns the cloud
    unchanged.
    """
    if sigma_frac < 0.0:
        raise InvalidInputError(f"sigma_frac must be nonnegative, got {sigma_frac}")
    with_n = cloud if cloud.normals is not None else estimate_normals(cloud, k)
    pts = with_n.points
    radius = np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)).max()
    rng = np.random.default_rng(seed)
    g = rng.normal(0.0, sigma_frac, size=with_n.n)
    out = pts + (g * radius)[:, None] * with_n.normals
    return PointCloud(out, label=cloud.label)


# ---------------------------------------------------------------------------
# Latent-constraint losses


def _zeros_like_params(model):
    return [np.zeros_like(p) for p in model.parameters()]


def _latent_cache(model, cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    _, latent, cache = _forward_cache(model, pts)
    return latent, cache


def _accumulate_latent_grad(model, cache, dlatent, total):
    grads, _ = _backward_latent_from_cache(model, cache, dlatent, need_input=False)
    for slot, g in enumerate(grads):
        if g is not None:
            total[slot] += g


def _norm_and_unit(diff):
    norm = float(np.sqrt((diff * diff).sum()))
    if norm == 0.0:
        return 0.0, np.zeros_like(diff)  # subgradient 0 at coincident features
    return norm, diff / norm


def intra_class_loss(model, anchor, adversarial, same_class_batch, omega1=1.0, omega2=1.0):
    """Pull the anchor's feature toward its adversarial and same-class features.

    loss = omega1 * ||f(P) - f(P')|| + (omega2 / J) * sum_j ||f(P) - f(P_j)||.
    Returns the loss and gradients aligned with model.parameters(); only
    encoder slots are nonzero.
    """
    if not same_class_batch:
        raise InvalidInputError("same-class batch is empty")
    for other in same_class_batch:
        if other.label != anchor.label:
            raise InvalidInputError("same-class batch contains a different label")
    total = _zeros_like_params(model)
    lat_p, cache_p = _latent_cache(model, anchor)
    lat_a, cache_a = _latent_cache(model, adversarial)
    norm, unit = _norm_and_unit(lat_p - lat_a)
    loss = omega1 * norm
    dlat_p = omega1 * unit
    _accumulate_latent_grad(model, cache_a, -omega1 * unit, total)
    w = omega2 / len(same_class_batch)
    for other in same_class_batch:
        lat_j, cache_j = _latent_cache(model, other)
        norm, unit = _norm_and_unit(lat_p - lat_j)
        loss += w * norm
        dlat_p = dlat_p + w * unit
        _accumulate_latent_grad(model, cache_j, -w * unit, total)
    _accumulate_latent_grad(model, cache_p, dlat_p, total)
    return loss, total


def inter_class_loss(
    model,
    anchor,
    targeted_advs,
    other_class_batches,
    omega3=1.0,
    omega4=1.0,
    num_classes=None,
):
    """Push other-class features and targeted adversarial features apart.

    loss = -(omega3 / ((C-1) J)) sum_{c != y} sum_j ||f(P) - f(P_jc)||
           -(omega4 / ((C-1) J)) sum_c sum_j ||f(P'_c) - f(P_jc)||
    where the second sum runs over the classes for which a targeted
    adversarial example was provided (possibly a subsample).
    """
    y = anchor.label
    if not other_class_batches:
        raise InvalidInputError("need at least one other-class batch")
    sizes = {len(batch) for batch in other_class_batches.values()}
    if len(sizes) != 1 or 0 in sizes:
        raise InvalidInputError("all other-class batches must share one nonzero size J")
    j_count = sizes.pop()
    for c, batch in other_class_batches.items():
        if c == y:
            raise InvalidInputError("other-class batches must not contain the anchor's class")
        for cloud in batch:
            if cloud.label != c:
                raise InvalidInputError(f"cloud labeled {cloud.label} found in batch for class {c}")
    for c in targeted_advs:
        if c == y:
            raise InvalidInputError("targeted adversarial example for the anchor's own class")
        if c not in other_class_batches:
            raise InvalidInputError(f"targeted adversarial for class {c} has no matching batch")
    if num_classes is None:
        num_classes = model.num_classes
    scale = 1.0 / ((num_classes - 1) * j_count)

    total = _zeros_like_params(model)
    lat_p, cache_p = _latent_cache(model, anchor)
    dlat_p = np.zeros_like(lat_p)
    loss = 0.0
    batch_latents = {}
    for c in sorted(other_class_batches):
        entries = []
        for cloud in other_class_batches[c]:
            lat_j, cache_j = _latent_cache(model, cloud)
            entries.append((lat_j, cache_j, np.zeros_like(lat_j)))
            norm, unit = _norm_and_unit(lat_p - lat_j)
            loss -= omega3 * scale * norm
            dlat_p -= omega3 * scale * unit
            entries[-1][2][:] += omega3 * scale * unit
        batch_latents[c] = entries
    for c in sorted(targeted_advs):
        lat_adv, cache_adv = _latent_cache(model, targeted_advs[c])
        dlat_adv = np.zeros_like(lat_adv)
        for lat_j, _, dlat_j in batch_latents[c]:
            norm, unit = _norm_and_unit(lat_adv - lat_j)
            loss -= omega4 * scale * norm
            dlat_adv -= omega4 * scale * unit
            dlat_j += omega4 * scale * unit
        _accumulate_latent_grad(model, cache_adv, dlat_adv, total)
    for entries in batch_latents.values():
        for _, cache_j, dlat_j in entries:
            _accumulate_latent_grad(model, cache_j, dlat_j, total)
    _accumulate_latent_grad(model, cache_p, dlat_p, total)
    return loss, total


# ---------------------------------------------------------------------------
# Adversarial training


@dataclass
class AdvTrainConfig:
    omega1: float = 1.0
    omega2: float = 1.0
    omega3: float = 1.0
    omega4: float = 1.0
    omega5: float = 0.1  # weight of the intra-class loss
    omega6: float = 0.1  # weight of the inter-class loss
    J: int = 2  # same/other-class clouds per anchor and class
    inner_attack: AttackConfig = None  # None disables adversarial examples
    inter_targets: int = 1  # targeted adversarial classes per anchor (<= 3)
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    seed: int = 0

    def validate(self):
        if self.J < 1:
            raise InvalidInputError("J must be >= 1")
        if not 0 <= self.inter_targets <= 3:
            raise InvalidInputError("inter_targets must lie in [0, 3]")
        if self.epochs < 0 or self.batch_size < 2:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 2")
        for name in ("omega1", "omega2", "omega3", "omega4", "omega5", "omega6"):
            if getattr(self, name) < 0.0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if (self.omega5 > 0.0 or self.omega6 > 0.0) and self.inner_attack is None:
            raise InvalidInputError("constraint losses need an inner attack config")


def adversarial_train(model, dataset, cfg, loss_trace=None):
    """Harden a classifier with adversarially augmented, constraint-regularized training.

    Every batch: craft targeted adversarial examples against the current
    model with the cheap inner attack, add them (true-labeled) to the class
    loss, then add omega5 * intra and omega6 * inter feature constraints.
    With the inner attack disabled and omega5 = omega6 = 0 this reduces
    exactly to plain training, reusing the same loop and shuffle stream.
    """
    cfg.validate()
    if not dataset:
        raise InvalidInputError("adversarial training needs a nonempty dataset")
    num_classes = model.num_classes
    by_class = {}
    for i, cloud in enumerate(dataset):
        if cloud.label is None or not 0 <= cloud.label < num_classes:
            raise InvalidInputError("every training cloud needs a label below num_classes")
        by_class.setdefault(cloud.label, []).append(i)
    constrained = cfg.omega5 > 0.0 or cfg.omega6 > 0.0
    if constrained:
        if len(by_class) < 2:
            raise InvalidInputError("constraint losses need at least 2 classes")
        for label, members in sorted(by_class.items()):
            if len(members) < cfg.J + 1:
                raise InvalidInputError(
                    f"class {label} has {len(members)} instances, needs >= J+1 = {cfg.J + 1}"
                )

    degenerate = cfg.inner_attack is None and not constrained
    if degenerate:
        trained, _ = train_classifier(
            model,
            dataset,
            cfg.epochs,
            cfg.seed,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            loss_trace=loss_trace,
        )
        return trained

    root = np.random.SeedSequence(cfg.seed)
    targets_seq, samples_seq, attack_seq = root.spawn(3)
    rng_targets = np.random.default_rng(targets_seq)
    rng_samples = np.random.default_rng(samples_seq)
    rng_attack = np.random.default_rng(attack_seq)
    index_of = {id(cloud): i for i, cloud in enumerate(dataset)}

    def sample_others(label, exclude_idx, count):
        pool = [i for i in by_class[label] if i != exclude_idx]
        pick = rng_samples.choice(len(pool), size=count, replace=False)
        return [dataset[pool[p]] for p in pick]

    def hook(current, batch, epoch, batch_idx):
        extra_clouds = []
        adv_results = []
        for cloud in batch:
            offset = int(rng_targets.integers(1, num_classes))
            target = (cloud.label + offset) % num_classes
            extra_targets = []
            if cfg.omega6 > 0.0 and cfg.inter_targets > 1:
                others = [c for c in range(num_classes) if c != cloud.label and c != target]
                picks = rng_targets.choice(
                    len(others), size=min(cfg.inter_targets - 1, len(others)), replace=False
                )
                extra_targets = [others[p] for p in picks]
            seed = int(rng_attack.integers(2**63))
            result = run_ita(
                current, cloud, replace(cfg.inner_attack, target_class=target), seed=seed
            )
            advs = {target: result.adversarial}
            for extra_t in extra_targets:
                seed = int(rng_attack.integers(2**63))
                extra_res = run_ita(
                    current, cloud, replace(cfg.inner_attack, target_class=extra_t), seed=seed
                )
                advs[extra_t] = extra_res.adversarial
            adv_results.append((cloud, result.adversarial, advs))
            extra_clouds.append(result.adversarial)
        total = _zeros_like_params(current)
        extra_loss = 0.0
        anchor_scale = 1.0 / len(batch)
        for cloud, adv, advs in adv_results:
            anchor_idx = index_of[id(cloud)]
            if cfg.omega5 > 0.0:
                same = sample_others(cloud.label, anchor_idx, cfg.J)
                loss_i, grads_i = intra_class_loss(
                    current, cloud, adv, same, omega1=cfg.omega1, omega2=cfg.omega2
                )
                extra_loss += cfg.omega5 * anchor_scale * loss_i
                for slot, g in enumerate(grads_i):
                    total[slot] += cfg.omega5 * anchor_scale * g
            if cfg.omega6 > 0.0:
                batches = {
                    c: sample_others(c, -1, cfg.J)
                    for c in sorted(by_class)
                    if c != cloud.label
                }
                targeted = {c: a for c, a in advs.items()} if cfg.inter_targets > 0 else {}
                loss_i, grads_i = inter_class_loss(
                    current,
                    cloud,
                    targeted,
                    batches,
                    omega3=cfg.omega3,
                    omega4=cfg.omega4,
                    num_classes=num_classes,
                )
                extra_loss += cfg.omega6 * anchor_scale * loss_i
                for slot, g in enumerate(grads_i):
                    total[slot] += cfg.omega6 * anchor_scale * g
        return extra_clouds, total, extra_loss

    trained, _ = train_classifier(
        model,
        dataset,
        cfg.epochs,
        cfg.seed,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        batch_hook=hook,
        loss_trace=loss_trace,
    )
    return trained
