"""Adversarial transformation model and learning-free analytic distortions.

The learnable transform is a per-point residual MLP (3 -> hidden -> 3)
whose second layer starts at zero, so it begins as the exact identity.
It is trained against a frozen classifier by alternating two steps: grow
adversarial perturbations that fool both the classifier and its composition
with the transform, then update the transform to undo those perturbations
while staying harmless on clean clouds.  Attacking through the trained
transform is what makes examples transfer.

The analytic family (translation, rotation about the gravity axis,
shearing, jittering; cloud-wise or point-wise) provides the learning-free
comparison point and doubles as a distortion source for attacks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kernels
from .errors import InvalidInputError
from .geometry import PointCloud, estimate_normals
from .nn import (
    AdamState,
    DenseLayer,
    _backward_from_cache,
    _forward_cache,
    adam_step,
    cross_entropy,
    glorot_uniform,
)

# Half-ranges of the analytic parameters, per scope.
ANALYTIC_RANGES = {
    ("translation", "cloud"): 0.2,
    ("translation", "point"): 0.02,
    ("rotation", "cloud"): math.pi,
    ("rotation", "point"): math.radians(5.0),
    ("shearing", "cloud"): 0.2,
    ("shearing", "point"): 0.1,
}
JITTER_SIGMA = 0.01
JITTER_CLIP = {"cloud": 0.05, "point": 0.02}
ANALYTIC_KINDS = ("translation", "rotation", "shearing", "jittering")


@dataclass
class TransformModel:
    """Per-point residual MLP: x + layer2(relu(layer1(x)))."""

    layer1: DenseLayer  # (hidden, 3)
    layer2: DenseLayer  # (3, hidden)
    residual: bool = True

    @property
    def hidden(self):
        return self.layer1.weight.shape[0]

    def parameters(self):
        return [self.layer1.weight, self.layer1.bias, self.layer2.weight, self.layer2.bias]

    def forward_points(self, x):
        z1 = x @ self.layer1.weight.T + self.layer1.bias
        a1 = np.maximum(z1, 0.0)
        out = a1 @ self.layer2.weight.T + self.layer2.bias
        if self.residual:
            out = x + out
        return out, (x, z1, a1)

    def input_grad(self, cache, dout):
        _, z1, _ = cache
        da1 = dout @ self.layer2.weight
        dz1 = da1 * (z1 > 0.0)
        dx = dz1 @ self.layer1.weight
        if self.residual:
            dx = dx + dout
        return dx


def identity_transform(hidden=16, seed=0):
    """Residual transform initialized to the exact identity map."""
    if hidden < 1:
        raise InvalidInputError("hidden width must be >= 1")
    rng = np.random.default_rng(seed)
    layer1 = DenseLayer(glorot_uniform(rng, hidden, 3), np.zeros(hidden))
    layer2 = DenseLayer(np.zeros((3, hidden)), np.zeros(3))
    return TransformModel(layer1=layer1, layer2=layer2, residual=True)


def apply_transform(model, cloud):
    """Run the transform over a cloud; normals do not survive the map."""
    out, _ = model.forward_points(cloud.points)
    return PointCloud(out, label=cloud.label)


def transform_backward(model, cloud, output_grad):
    """Gradients of a scalar loss wrt transform parameters and input points.

    output_grad is dLoss/d(transform output), shape (n, 3).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    out, cache = model.forward_points(pts)
    return _transform_param_grads(model, cache, np.asarray(output_grad, dtype=np.float64))


def _transform_param_grads(model, cache, dout):
    x, z1, a1 = cache
    dw2 = dout.T @ a1
    db2 = dout.sum(axis=0)
    da1 = dout @ model.layer2.weight
    dz1 = da1 * (z1 > 0.0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ model.layer1.weight
    if model.residual:
        dx = dx + dout
    return [dw1, db1, dw2, db2], dx


def save_transform(path, model, seed, extra=None):
    header = {"hidden": model.hidden, "residual": model.residual, "seed": seed}
    if extra:
        header["extra"] = extra
    checkpoint.write_container(path, "transform", header, model.parameters())


def load_transform(path):
    header, params = checkpoint.read_container(path)
    if header.get("kind") != "transform":
        raise InvalidInputError(f"{path}: not a transform checkpoint")
    model = TransformModel(
        layer1=DenseLayer(params[0].copy(), params[1].copy()),
        layer2=DenseLayer(params[2].copy(), params[3].copy()),
        residual=bool(header["residual"]),
    )
    return model, header


# ---------------------------------------------------------------------------
# Analytic (learning-free) transforms


@dataclass
class AnalyticTransform:
    """One concrete learning-free distortion.

    Cloud-wise transforms carry their drawn parameters; point-wise ones
    carry the half-range and draw per-point values from `seed` at
    application time, so applying the same transform twice is identical.
    """

    kind: str
    scope: str  # "cloud" | "point"
    parameters: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ANALYTIC_KINDS:
            raise InvalidInputError(f"unknown analytic kind {self.kind!r}")
        if self.scope not in ("cloud", "point"):
            raise InvalidInputError(f"scope must be 'cloud' or 'point', got {self.scope!r}")
        self.parameters = np.atleast_1d(np.asarray(self.parameters, dtype=np.float64))
        _validate_analytic(self)


def _validate_analytic(t):
    p = t.parameters
    if t.kind == "jittering":
        if p.shape != (2,):
            raise InvalidInputError("jittering expects parameters (sigma, clip)")
        sigma, clip = p
        if not 0.0 < sigma <= JITTER_SIGMA + 1e-12:
            raise InvalidInputError(f"jitter sigma {sigma} outside (0, {JITTER_SIGMA}]")
        if not 0.0 < clip <= JITTER_CLIP[t.scope] + 1e-12:
            raise InvalidInputError(f"jitter clip {clip} outside (0, {JITTER_CLIP[t.scope]}]")
        return
    bound = ANALYTIC_RANGES[(t.kind, t.scope)]
    expected = {"translation": 3, "rotation": 1, "shearing": 6}[t.kind]
    if t.scope == "point":
        if p.shape != (1,):
            raise InvalidInputError("point-wise transforms expect a single half-range parameter")
        if not 0.0 <= p[0] <= bound + 1e-12:
            raise InvalidInputError(f"half-range {p[0]} exceeds limit {bound}")
    else:
        if p.shape != (expected,):
            raise InvalidInputError(f"{t.kind} expects {expected} parameters, got {p.shape}")
        if np.abs(p).max() > bound + 1e-12:
            raise InvalidInputError(f"parameters exceed the [{-bound}, {bound}] range")


def _rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    zero, one = np.zeros_like(c), np.ones_like(c)
    rows = np.stack(
        [
            np.stack([c, -s, zero], axis=-1),
            np.stack([s, c, zero], axis=-1),
            np.stack([zero, zero, one], axis=-1),
        ],
        axis=-2,
    )
    return rows


def _shear_matrix(params):
    m = np.tile(np.eye(3), params.shape[:-1] + (1, 1))
    sxy, sxz, syx, syz, szx, szy = np.moveaxis(params, -1, 0)
    m[..., 0, 1] = sxy
    m[..., 0, 2] = sxz
    m[..., 1, 0] = syx
    m[..., 1, 2] = syz
    m[..., 2, 0] = szx
    m[..., 2, 1] = szy
    return m


def _realize(t, n):
    """Resolve a transform to (matrices, offsets) for an n-point cloud.

    matrices is None, (3,3), or (n,3,3); offsets is None, (3,), or (n,3).
    out = points @ matrices^T + offsets with broadcasting.
    """
    rng = np.random.default_rng(t.seed)
    if t.kind == "translation":
        if t.scope == "cloud":
            return None, t.parameters.copy()
        return None, rng.uniform(-t.parameters[0], t.parameters[0], size=(n, 3))
    if t.kind == "rotation":
        if t.scope == "cloud":
            return _rotation_z(t.parameters[0]), None
        theta = rng.uniform(-t.parameters[0], t.parameters[0], size=n)
        return _rotation_z(theta), None
    if t.kind == "shearing":
        if t.scope == "cloud":
            return _shear_matrix(t.parameters), None
        params = rng.uniform(-t.parameters[0], t.parameters[0], size=(n, 6))
        return _shear_matrix(params), None
    # jittering
    sigma, clip = t.parameters
    if t.scope == "cloud":
        noise = np.clip(rng.normal(0.0, sigma, size=3), -clip, clip)
    else:
        noise = np.clip(rng.normal(0.0, sigma, size=(n, 3)), -clip, clip)
    return None, noise


def apply_analytic(t, cloud):
    """Apply one analytic transform to a cloud."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    out = _apply_realized(pts, *_realize(t, pts.shape[0]))
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(out, label=label)


def _apply_realized(pts, mats, offsets):
    out = pts
    if mats is not None:
        if mats.ndim == 2:
            out = out @ mats.T
        else:
            out = np.einsum("nij,nj->ni", mats, out)
    if offsets is not None:
        out = out + offsets
    return out


class AnalyticEnsemble:
    """Random analytic distortion redrawn every attack iteration.

    Exposes the same forward/gradient interface as TransformModel; the
    linear part of the current draw supplies the exact Jacobian.
    """

    def __init__(self, scope="point", kinds=ANALYTIC_KINDS, seed=0):
        if scope not in ("cloud", "point"):
            raise InvalidInputError(f"scope must be 'cloud' or 'point', got {scope!r}")
        for kind in kinds:
            if kind not in ANALYTIC_KINDS:
                raise InvalidInputError(f"unknown analytic kind {kind!r}")
        self.scope = scope
        self.kinds = tuple(kinds)
        self._rng = np.random.default_rng(seed)
        self._current = None

    def draw(self):
        kind = self.kinds[int(self._rng.integers(len(self.kinds)))]
        seed = int(self._rng.integers(2**63))
        if kind == "jittering":
            params = (JITTER_SIGMA, JITTER_CLIP[self.scope])
        elif self.scope == "point":
            params = (ANALYTIC_RANGES[(kind, "point")],)
        elif kind == "translation":
            b = ANALYTIC_RANGES[("translation", "cloud")]
            params = self._rng.uniform(-b, b, size=3)
        elif kind == "rotation":
            b = ANALYTIC_RANGES[("rotation", "cloud")]
            params = (self._rng.uniform(-b, b),)
        else:  # shearing
            b = ANALYTIC_RANGES[("shearing", "cloud")]
            params = self._rng.uniform(-b, b, size=6)
        return AnalyticTransform(kind=kind, scope=self.scope, parameters=params, seed=seed)

    def begin_iteration(self):
        self._current = self.draw()

    def forward_points(self, x):
        if self._current is None:
            self.begin_iteration()
        mats, offsets = _realize(self._current, x.shape[0])
        return _apply_realized(x, mats, offsets), mats

    def input_grad(self, cache, dout):
        mats = cache
        if mats is None:
            return dout.copy()
        if mats.ndim == 2:
            return dout @ mats
        return np.einsum("nj,nji->ni", dout, mats)


# ---------------------------------------------------------------------------
# Two-step adversarial learning of the transform


@dataclass
class AdvLearnConfig:
    l1_rounds: int = 10
    l2_delta_steps: int = 500
    l3_t_steps: int = 50
    beta: float = 1.0  # weight of the clean-cloud CE in the transform loss
    lambda3: float = 10.0  # weight of the restoration Chamfer term
    lr_t: float = 0.001
    hidden: int = 16
    t_batch: int = 16  # instances averaged per transform update

    def validate(self):
        if min(self.l1_rounds, self.l2_delta_steps, self.l3_t_steps) < 1:
            raise InvalidInputError("all loop counts must be >= 1")
        if self.lr_t <= 0.0:
            raise InvalidInputError("lr_t must be positive")
        if self.beta < 0.0 or self.lambda3 < 0.0:
            raise InvalidInputError("beta and lambda3 must be nonnegative")
        if self.t_batch < 1:
            raise InvalidInputError("t_batch must be >= 1")


def _restoration_grad(adv_pts, out_pts):
    """Gradient on transform outputs of chamfer(adv, transform(adv))."""
    idx, sqd = kernels.nearest_correspondence(adv_pts, out_pts)
    n = adv_pts.shape[0]
    grad = np.zeros_like(out_pts)
    np.add.at(grad, idx, (2.0 / n) * (out_pts[idx] - adv_pts))
    return float(sqd.mean()), grad


def adversarial_learn_T(model, dataset, cfg, attack_cfg, seed=0, trace=None):
    """Learn the adversarial transform against a frozen classifier.

    Alternates cfg.l1_rounds times between (a) cfg.l2_delta_steps
    perturbation updates that minimize the joint attack loss through both
    f and f(T(.)), and (b) cfg.l3_t_steps transform updates that minimize
    CE(f(T(adv)), y) + beta * CE(f(T(clean)), y) + lambda3 * chamfer(adv,
    T(adv)).  Perturbation updates visit instances round-robin and every
    instance keeps its own perturbation and optimizer state; transform
    updates average the gradient over a round-robin window of cfg.t_batch
    instances so the shared network cannot overfit one cloud at a time.
    The classifier is never modified.
    """
    cfg.validate()
    attack_cfg.validate(num_classes=model.num_classes)
    if not dataset:
        raise InvalidInputError("adversarial transform learning needs a nonempty dataset")
    for cloud in dataset:
        if cloud.label is None:
            raise InvalidInputError("every working-set cloud needs a label")
    num_classes = model.num_classes
    root = np.random.SeedSequence(seed)
    init_seed, target_seed, delta_seed = root.spawn(3)

    t_model = identity_transform(cfg.hidden, seed=init_seed.generate_state(1)[0])
    t_params = t_model.parameters()
    t_adam = AdamState.for_params(t_params, lr=cfg.lr_t)

    rng_targets = np.random.default_rng(target_seed)
    rng_delta = np.random.default_rng(delta_seed)
    b = attack_cfg.bound_B
    instances = []
    for cloud in dataset:
        with_n = cloud if cloud.normals is not None else estimate_normals(cloud, attack_cfg.k_neighbors)
        offset = int(rng_targets.integers(1, num_classes))
        target = (cloud.label + offset) % num_classes
        delta = rng_delta.uniform(-b / 10.0, b / 10.0, with_n.n)
        instances.append(
            {
                "clean": with_n,
                "target": target,
                "delta": delta,
                "adam": AdamState.for_params([delta], lr=attack_cfg.lr),
            }
        )

    m = len(instances)
    delta_counter = 0
    t_counter = 0

    def delta_step(inst):
        clean_pts = inst["clean"].points
        normals = inst["clean"].normals
        points = clean_pts + inst["delta"][:, None] * normals
        logits, _, cache = _forward_cache(model, points)
        ce_plain, dlogits = cross_entropy(logits, inst["target"])
        _, dP = _backward_from_cache(model, cache, dlogits, need_params=False)
        out, tcache = t_model.forward_points(points)
        logits_t, _, cache_t = _forward_cache(model, out)
        ce_t, dlogits_t = cross_entropy(logits_t, inst["target"])
        _, dout = _backward_from_cache(model, cache_t, dlogits_t, need_params=False)
        dP = dP + attack_cfg.alpha * t_model.input_grad(tcache, dout)
        idx, sqd = kernels.nearest_correspondence(points, clean_pts)
        n = points.shape[0]
        dP += attack_cfg.lambda2 * (2.0 / n) * (points - clean_pts[idx])
        i_star = int(np.argmax(sqd))
        dP[i_star] += attack_cfg.lambda1 * 2.0 * (points - clean_pts[idx])[i_star]
        delta_grad = (dP * normals).sum(axis=1)
        adam_step(inst["adam"], [inst["delta"]], [delta_grad])
        np.clip(inst["delta"], -b, b, out=inst["delta"])
        total = (
            ce_plain
            + attack_cfg.alpha * ce_t
            + attack_cfg.lambda1 * float(sqd.max())
            + attack_cfg.lambda2 * float(sqd.mean())
        )
        return total

    def t_instance_terms(inst):
        clean = inst["clean"]
        adv_pts = clean.points + inst["delta"][:, None] * clean.normals
        out_adv, cache_adv = t_model.forward_points(adv_pts)
        logits_adv, _, mcache = _forward_cache(model, out_adv)
        ce_adv, dlogits = cross_entropy(logits_adv, clean.label)
        _, dout_adv = _backward_from_cache(model, mcache, dlogits, need_params=False)
        cham, dout_rest = _restoration_grad(adv_pts, out_adv)
        grads_a, _ = _transform_param_grads(
            t_model, cache_adv, dout_adv + cfg.lambda3 * dout_rest
        )
        out_clean, cache_clean = t_model.forward_points(clean.points)
        logits_clean, _, mcache2 = _forward_cache(model, out_clean)
        ce_clean, dlogits2 = cross_entropy(logits_clean, clean.label)
        _, dout_clean = _backward_from_cache(model, mcache2, dlogits2, need_params=False)
        grads_b, _ = _transform_param_grads(t_model, cache_clean, cfg.beta * dout_clean)
        grads = [ga + gb for ga, gb in zip(grads_a, grads_b)]
        return ce_adv + cfg.beta * ce_clean + cfg.lambda3 * cham, grads

    def t_step(start):
        batch = min(cfg.t_batch, m)
        total = 0.0
        acc = None
        for j in range(batch):
            loss, grads = t_instance_terms(instances[(start + j) % m])
            total += loss
            if acc is None:
                acc = grads
            else:
                acc = [a + g for a, g in zip(acc, grads)]
        acc = [a / batch for a in acc]
        adam_step(t_adam, t_params, acc)
        return total / batch

    for _ in range(cfg.l1_rounds):
        for _ in range(cfg.l2_delta_steps):
            loss = delta_step(instances[delta_counter % m])
            delta_counter += 1
            if trace is not None:
                trace.append(("delta", loss))
        for _ in range(cfg.l3_t_steps):
            loss = t_step(t_counter * min(cfg.t_batch, m))
            t_counter += 1
            if trace is not None:
                trace.append(("transform", loss))
    return t_model
