"""Minimal point-set classifiers with exact reverse-mode gradients.

A classifier is a per-point shared MLP encoder, a symmetric pooling over
points (max or mean) and a dense head producing class logits.  Forward,
backward and the Adam optimizer are written directly in numpy so that
gradients with respect to the input coordinates, which drive the attacks,
are exact rather than approximated.

Mean pooling sums each feature column in sorted order, which makes the
forward pass exactly invariant to point permutations (max pooling is
invariant by construction).
"""

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import InvalidInputError
from .geometry import PointCloud

ARCHITECTURES = {
    "arch-A": {"pooling": "max", "encoder": (64, 128), "head": (64,)},
    "arch-B": {"pooling": "mean", "encoder": (32, 64, 128), "head": (64,)},
}


@dataclass
class DenseLayer:
    """Affine map x -> weight @ x + bias, weight laid out (out, in)."""

    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ClassifierModel:
    arch: str
    pooling: str  # "max" | "mean"
    encoder: list
    head: list

    @property
    def num_classes(self):
        return self.head[-1].weight.shape[0]

    @property
    def latent_dim(self):
        return self.encoder[-1].weight.shape[0]

    def layers(self):
        return list(self.encoder) + list(self.head)

    def parameters(self):
        params = []
        for layer in self.layers():
            params.append(layer.weight)
            params.append(layer.bias)
        return params


@dataclass
class GradientBundle:
    param_grads: list
    input_grad: np.ndarray


def glorot_uniform(rng, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def build_classifier(arch, num_classes, seed):
    """Deterministically initialized classifier for a named architecture."""
    if arch not in ARCHITECTURES:
        raise InvalidInputError(f"unknown architecture {arch!r}")
    if num_classes < 2:
        raise InvalidInputError(f"num_classes must be >= 2, got {num_classes}")
    spec = ARCHITECTURES[arch]
    rng = np.random.default_rng(seed)
    encoder = []
    fan_in = 3
    for width in spec["encoder"]:
        encoder.append(DenseLayer(glorot_uniform(rng, width, fan_in), np.zeros(width)))
        fan_in = width
    head = []
    for width in spec["head"]:
        head.append(DenseLayer(glorot_uniform(rng, width, fan_in), np.zeros(width)))
        fan_in = width
    head.append(DenseLayer(glorot_uniform(rng, num_classes, fan_in), np.zeros(num_classes)))
    return ClassifierModel(arch=arch, pooling=spec["pooling"], encoder=encoder, head=head)


def _input_points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected (n, 3) points, got shape {pts.shape}")
    return pts


def _forward_cache(model, x):
    """Forward pass keeping every intermediate needed for the backward pass."""
    acts = [x]  # per-point activations entering each encoder layer
    pre = []
    for layer in model.encoder:
        z = acts[-1] @ layer.weight.T + layer.bias
        pre.append(z)
        acts.append(np.maximum(z, 0.0))
    feat = acts[-1]
    if model.pooling == "max":
        pool_arg = np.argmax(feat, axis=0)  # first max = lowest point index
        latent = feat[pool_arg, np.arange(feat.shape[1])]
    else:
        latent = np.sort(feat, axis=0).sum(axis=0) / feat.shape[0]
        pool_arg = None
    head_in = [latent]
    head_pre = []
    for i, layer in enumerate(model.head):
        z = layer.weight @ head_in[-1] + layer.bias
        head_pre.append(z)
        if i < len(model.head) - 1:
            head_in.append(np.maximum(z, 0.0))
    logits = head_pre[-1]
    return logits, latent, (acts, pre, pool_arg, head_in, head_pre)


def forward(model, cloud):
    """Class logits and the pooled latent feature for one cloud."""
    logits, latent, _ = _forward_cache(model, _input_points(cloud))
    return logits, latent


def _backward_latent_from_cache(model, cache, dlatent, need_params=True, need_input=True):
    """Backward pass from a gradient on the pooled latent feature.

    Returns encoder parameter gradients in parameters() slot order (head
    slots are None) and the gradient on the input coordinates.
    """
    acts, pre, pool_arg, _, _ = cache
    n, latent_dim = acts[-1].shape
    param_grads = (
        [None] * (2 * (len(model.encoder) + len(model.head))) if need_params else None
    )
    if model.pooling == "max":
        dfeat = np.zeros((n, latent_dim))
        dfeat[pool_arg, np.arange(latent_dim)] = dlatent
    else:
        dfeat = np.broadcast_to(dlatent / n, (n, latent_dim)).copy()
    da = dfeat
    for i in range(len(model.encoder) - 1, -1, -1):
        layer = model.encoder[i]
        dz = da * (pre[i] > 0.0)
        if need_params:
            param_grads[2 * i] = dz.T @ acts[i]
            param_grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0 or need_input:
            da = dz @ layer.weight
    input_grad = da if need_input else None
    return param_grads, input_grad


def _backward_from_cache(model, cache, dlogits, need_params=True, need_input=True):
    _, _, _, head_in, head_pre = cache
    dz = np.asarray(dlogits, dtype=np.float64)
    head_grads = [] if need_params else None
    for i in range(len(model.head) - 1, -1, -1):
        layer = model.head[i]
        if need_params:
            head_grads.append((i, np.outer(dz, head_in[i]), dz.copy()))
        dx = layer.weight.T @ dz
        if i > 0:
            dz = dx * (head_pre[i - 1] > 0.0)
    param_grads, input_grad = _backward_latent_from_cache(
        model, cache, dx, need_params, need_input
    )
    if need_params:
        for i, dw, db in head_grads:
            slot = 2 * (len(model.encoder) + i)
            param_grads[slot] = dw
            param_grads[slot + 1] = db
    return param_grads, input_grad


def backward_input(model, cloud, loss_grad_on_logits):
    """Exact gradients of a scalar loss with respect to parameters and input.

    loss_grad_on_logits is dLoss/dlogits at the forward pass of `cloud`.
    """
    x = _input_points(cloud)
    _, _, cache = _forward_cache(model, x)
    param_grads, input_grad = _backward_from_cache(model, cache, loss_grad_on_logits)
    return GradientBundle(param_grads=param_grads, input_grad=input_grad)


def cross_entropy(logits, target):
    """Numerically stable cross-entropy and its gradient on the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[0]:
        raise InvalidInputError(f"target {target} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = float(np.log(total) - shifted[target])
    grad = exp / total
    grad[target] -= 1.0
    return loss, grad


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state, params, grads):
    """One Adam update; parameters are updated in place and returned."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise InvalidInputError("parameter/gradient lists do not match optimizer state")
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state


def evaluate_accuracy(model, clouds):
    """Fraction of clouds whose argmax logit matches their label."""
    if not clouds:
        raise InvalidInputError("cannot evaluate on an empty set")
    hits = 0
    for cloud in clouds:
        logits, _ = forward(model, cloud)
        hits += int(np.argmax(logits) == cloud.label)
    return hits / len(clouds)


def train_classifier(
    model,
    train_set,
    epochs,
    seed,
    *,
    test_set=None,
    lr=0.01,
    batch_size=16,
    batch_hook=None,
    loss_trace=None,
):
    """Minibatch Adam training on labeled clouds.

    Deterministic given the seed: the shuffle stream is the only
    randomness consumed here.  `batch_hook`, used by adversarial training,
    may return extra labeled clouds for the class loss plus additive
    parameter gradients; plain training leaves it None.  Returns the
    trained model and a per-epoch accuracy history.
    """
    if not train_set:
        raise InvalidInputError("training set is empty")
    num_classes = model.num_classes
    for cloud in train_set:
        if cloud.label is None or not 0 <= cloud.label < num_classes:
            raise InvalidInputError("every training cloud needs a label below num_classes")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = AdamState.for_params(params, lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), batch_size):
            batch = [train_set[j] for j in order[start : start + batch_size]]
            extra_clouds, extra_grads, extra_loss = [], None, 0.0
            if batch_hook is not None:
                extra_clouds, extra_grads, extra_loss = batch_hook(
                    model, batch, epoch, start // batch_size
                )
            clouds = batch + list(extra_clouds)
            total = [np.zeros_like(p) for p in params]
            loss_sum = 0.0
            for cloud in clouds:
                logits, _, cache = _forward_cache(model, cloud.points)
                loss, dlogits = cross_entropy(logits, cloud.label)
                loss_sum += loss
                grads, _ = _backward_from_cache(model, cache, dlogits, need_input=False)
                for acc, g in zip(total, grads):
                    acc += g
            scale = 1.0 / len(clouds)
            for acc in total:
                acc *= scale
            if extra_grads is not None:
                for acc, g in zip(total, extra_grads):
                    acc += g
            if loss_trace is not None:
                loss_trace.append(loss_sum * scale + extra_loss)
            adam_step(state, params, total)
        entry = {"epoch": epoch, "train_accuracy": evaluate_accuracy(model, train_set)}
        if test_set:
            entry["test_accuracy"] = evaluate_accuracy(model, test_set)
        history.append(entry)
    return model, history


def save_checkpoint(path, model, seed, extra=None):
    """Write a classifier to the versioned container format."""
    header = {
        "arch": model.arch,
        "pooling": model.pooling,
        "encoder_widths": [l.weight.shape[0] for l in model.encoder],
        "head_widths": [l.weight.shape[0] for l in model.head],
        "num_classes": model.num_classes,
        "seed": seed,
    }
    if extra:
        header["extra"] = extra
    checkpoint.write_container(path, "classifier", header, model.parameters())


def load_checkpoint(path):
    """Read a classifier checkpoint; returns (model, header)."""
    header, params = checkpoint.read_container(path)
    if header.get("kind") != "classifier":
        raise InvalidInputError(f"{path}: not a classifier checkpoint")
    widths = header["encoder_widths"] + header["head_widths"]
    if len(params) != 2 * len(widths):
        raise InvalidInputError(f"{path}: parameter count does not match layer widths")
    layers = [
        DenseLayer(params[2 * i].copy(), params[2 * i + 1].copy())
        for i in range(len(widths))
    ]
    n_enc = len(header["encoder_widths"])
    model = ClassifierModel(
        arch=header["arch"],
        pooling=header["pooling"],
        encoder=layers[:n_enc],
        head=layers[n_enc:],
    )
    return model, header
