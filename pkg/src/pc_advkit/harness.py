"""Experiment harness: synthetic data, training, attack/transfer/defense runs.

Six parametric shape families make up the synthetic dataset.  Every
random draw descends from the experiment seed through named SeedSequence
branches, so rerunning a config reproduces every file byte for byte.
"""

import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io as cloud_io
from .attack import AttackConfig, fgsm_baseline, run_ita
from .defense import (
    AdvTrainConfig,
    DefenseConfig,
    adversarial_train,
    noise_along_normal,
    sor,
    srs,
)
from .errors import InvalidInputError
from .geometry import PointCloud, normalize_unit_ball
from .metrics import METRIC_CSV_HEADER
from .nn import (
    build_classifier,
    evaluate_accuracy,
    forward,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from .transform import AdvLearnConfig, AnalyticEnsemble, adversarial_learn_T, save_transform


def subseed(seed, *tags):
    """A SeedSequence derived from the root seed and a path of tags."""
    parts = [int(seed)]
    for tag in tags:
        parts.append(zlib.crc32(str(tag).encode()) if isinstance(tag, str) else int(tag))
    return np.random.SeedSequence(parts)


# ---------------------------------------------------------------------------
# Shape generators (canonical surfaces; instance variation drawn inside).
# The cube/cylinder/cone/plane classes share a squat, sheet-like body plan on
# purpose: class identity rides on height-field features (thickness, taper,
# bumps) of roughly 0.1 amplitude, so decision margins stay within reach of
# small normal-direction perturbations.


def _gen_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.sqrt((v * v).sum(axis=1))[:, None]
    return v


def _gen_cube(rng, n):
    h = np.array(
        [rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0), rng.uniform(0.03, 0.08)]
    )
    areas = 4.0 * np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    areas = np.repeat(areas, 2)  # +x, -x, +y, -y, +z, -z
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        mask = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[mask, axis] = sign * h[axis]
        pts[mask, others[0]] = uv[mask, 0] * h[others[0]]
        pts[mask, others[1]] = uv[mask, 1] * h[others[1]]
    return pts


def _gen_cylinder(rng, n):
    r = rng.uniform(0.85, 1.0)
    hh = rng.uniform(0.03, 0.08)
    lateral = 2.0 * np.pi * r * 2.0 * hh
    cap = np.pi * r * r
    pick = rng.uniform(0.0, lateral + 2.0 * cap, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    on_side = pick < lateral
    pts[on_side, 0] = r * np.cos(theta[on_side])
    pts[on_side, 1] = r * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-hh, hh, size=int(on_side.sum()))
    caps = ~on_side
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=int(caps.sum())))
    pts[caps, 0] = rad * np.cos(theta[caps])
    pts[caps, 1] = rad * np.sin(theta[caps])
    pts[caps, 2] = np.where(pick[caps] < lateral + cap, hh, -hh)
    return pts


def _gen_torus(rng, n):
    big = rng.uniform(0.4, 0.85)
    small = big * rng.uniform(0.2, 0.85)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = np.empty(n)
    done = 0
    while done < n:  # rejection sampling keeps the surface density uniform
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - done))
        accept = rng.uniform(0.0, 1.0, size=cand.shape[0]) < (
            (big + small * np.cos(cand)) / (big + small)
        )
        good = cand[accept][: n - done]
        phi[done : done + good.shape[0]] = good
        done += good.shape[0]
    ring = big + small * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)


def _gen_cone(rng, n):
    rb = rng.uniform(0.85, 1.0)
    height = rng.uniform(0.08, 0.15)
    lateral = np.pi * rb * np.sqrt(rb * rb + height * height)
    base = np.pi * rb * rb
    pick = rng.uniform(0.0, lateral + base, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = pick < lateral
    t = np.sqrt(rng.uniform(0.0, 1.0, size=int(side.sum())))  # area grows with radius
    pts[side, 0] = rb * t * np.cos(theta[side])
    pts[side, 1] = rb * t * np.sin(theta[side])
    pts[side, 2] = height * (1.0 - t) - 0.5 * height
    flat = ~side
    rad = rb * np.sqrt(rng.uniform(0.0, 1.0, size=int(flat.sum())))
    pts[flat, 0] = rad * np.cos(theta[flat])
    pts[flat, 1] = rad * np.sin(theta[flat])
    pts[flat, 2] = -0.5 * height
    return pts


def _gen_plane_bumps(rng, n):
    rad = np.sqrt(rng.uniform(0.0, 1.0, size=n))  # uniform over the unit disc
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    xy = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    z = np.zeros(n)
    for _ in range(4):
        amp = rng.uniform(0.05, 0.13) * (1.0 if rng.uniform() < 0.5 else -1.0)
        center = rng.uniform(-0.55, 0.55, size=2)
        width = rng.uniform(0.2, 0.4)
        d2 = ((xy - center) ** 2).sum(axis=1)
        z += amp * np.exp(-d2 / (2.0 * width * width))
    return np.column_stack([xy, z])


SHAPE_GENERATORS = {
    "sphere": _gen_sphere,
    "cube": _gen_cube,
    "cylinder": _gen_cylinder,
    "torus": _gen_torus,
    "cone": _gen_cone,
    "plane_bumps": _gen_plane_bumps,
}

DEFAULT_CLASSES = ("sphere", "cube", "cylinder", "torus", "cone", "plane_bumps")


@dataclass
class SyntheticDatasetSpec:
    classes: tuple = DEFAULT_CLASSES
    points_per_cloud: int = 256
    instances_per_class: int = 64
    jitter_sigma: float = 0.01
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self):
        if len(self.classes) < 2:
            raise InvalidInputError("need at least 2 classes")
        for name in self.classes:
            if name not in SHAPE_GENERATORS:
                raise InvalidInputError(f"unknown shape class {name!r}")
        if self.points_per_cloud < 32:
            raise InvalidInputError("points_per_cloud must be >= 32")
        if self.instances_per_class < 1:
            raise InvalidInputError("instances_per_class must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidInputError("train_fraction must lie in (0, 1)")
        if self.jitter_sigma < 0.0:
            raise InvalidInputError("jitter_sigma must be nonnegative")


@dataclass
class Dataset:
    train: list
    test: list
    classes: list
    spec: SyntheticDatasetSpec = None


def _make_instance(spec, class_idx, instance_idx):
    rng = np.random.default_rng(subseed(spec.seed, "instance", class_idx, instance_idx))
    pts = SHAPE_GENERATORS[spec.classes[class_idx]](rng, spec.points_per_cloud)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T
    if spec.jitter_sigma > 0.0:
        pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
    return normalize_unit_ball(PointCloud(pts, label=class_idx))


def generate_dataset(spec):
    """Synthesize the labeled dataset with a stratified 80/20-style split."""
    spec.validate()
    rng_split = np.random.default_rng(subseed(spec.seed, "split"))
    train, test = [], []
    for ci in range(len(spec.classes)):
        clouds = [_make_instance(spec, ci, ii) for ii in range(spec.instances_per_class)]
        perm = rng_split.permutation(spec.instances_per_class)
        cut = int(round(spec.instances_per_class * spec.train_fraction))
        train.extend(clouds[i] for i in perm[:cut])
        test.extend(clouds[i] for i in perm[cut:])
    return Dataset(train=train, test=test, classes=list(spec.classes), spec=spec)


def save_dataset(dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clouds = dataset.train + dataset.test
    np.save(out / "points.npy", np.stack([c.points for c in clouds]))
    np.save(out / "labels.npy", np.array([c.label for c in clouds], dtype=np.int64))
    meta = {
        "classes": list(dataset.classes),
        "n_train": len(dataset.train),
        "n_test": len(dataset.test),
    }
    if dataset.spec is not None:
        meta["spec"] = {
            "classes": list(dataset.spec.classes),
            "points_per_cloud": dataset.spec.points_per_cloud,
            "instances_per_class": dataset.spec.instances_per_class,
            "jitter_sigma": dataset.spec.jitter_sigma,
            "train_fraction": dataset.spec.train_fraction,
            "seed": dataset.spec.seed,
        }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_dataset(path):
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
        points = np.load(root / "points.npy")
        labels = np.load(root / "labels.npy")
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot load dataset from {path}: {exc}") from exc
    clouds = [PointCloud(points[i], label=int(labels[i])) for i in range(points.shape[0])]
    n_train = int(meta["n_train"])
    spec = None
    if "spec" in meta:
        s = meta["spec"]
        spec = SyntheticDatasetSpec(
            classes=tuple(s["classes"]),
            points_per_cloud=s["points_per_cloud"],
            instances_per_class=s["instances_per_class"],
            jitter_sigma=s["jitter_sigma"],
            train_fraction=s["train_fraction"],
            seed=s["seed"],
        )
    return Dataset(
        train=clouds[:n_train], test=clouds[n_train:], classes=list(meta["classes"]), spec=spec
    )


def ingest_off(path, n_points=256, seed=0):
    """Sample a unit-ball-normalized cloud from an OFF mesh surface."""
    vertices, faces = cloud_io.read_off(path)
    rng = np.random.default_rng(seed)
    pts = cloud_io.sample_mesh_surface(vertices, faces, n_points, rng)
    return normalize_unit_ball(PointCloud(pts))


# ---------------------------------------------------------------------------
# Parallel fan-out

_WORKER_STATE = {}


def resolve_jobs(jobs):
    env = os.environ.get("PC_ADVKIT_THREADS")
    if env:
        try:
            jobs = int(env)
        except ValueError as exc:
            raise InvalidInputError(f"PC_ADVKIT_THREADS must be an integer, got {env!r}") from exc
    if jobs < 1:
        raise InvalidInputError("jobs must be >= 1")
    return jobs


def _init_worker(state):
    _WORKER_STATE.update(state)


def _attack_task(task):
    kind, cloud, target, seed = task
    model = _WORKER_STATE["model"]
    if kind == "fgsm":
        cfg = _WORKER_STATE["fgsm_cfg"]
        return fgsm_baseline(
            model, cloud, cfg["epsilon"], target, cfg["iterations"], cfg["k_neighbors"]
        )
    cfg = replace(_WORKER_STATE["attack_cfg"], target_class=target)
    cfg.transform = _WORKER_STATE.get("transform")
    return run_ita(model, cloud, cfg, seed=seed)


def map_attack_tasks(model, tasks, attack_cfg=None, transform=None, fgsm_cfg=None, jobs=1):
    """Run attack tasks in order, optionally across worker processes."""
    jobs = resolve_jobs(jobs)
    state = {
        "model": model,
        "attack_cfg": attack_cfg,
        "transform": transform,
        "fgsm_cfg": fgsm_cfg,
    }
    if jobs == 1:
        _init_worker(state)
        try:
            return [_attack_task(t) for t in tasks]
        finally:
            _WORKER_STATE.clear()
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=_init_worker, initargs=(state,)
    ) as pool:
        return list(pool.map(_attack_task, tasks, chunksize=8))


# ---------------------------------------------------------------------------
# Experiment orchestration


@dataclass
class ExperimentConfig:
    out_dir: str
    seed: int = 0
    jobs: int = 1
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    source_arch: str = "arch-A"
    victim_archs: tuple = ("arch-B",)
    train_epochs: int = 30
    train_lr: float = 0.01
    train_batch: int = 16
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(target_class=0))
    targets_per_instance: str = "one"  # "one" | "all"
    max_instances: int = 0  # 0 = no cap
    use_transform: bool = False
    transform_learn: AdvLearnConfig = field(default_factory=AdvLearnConfig)
    transform_working_set: int = 24
    analytic_baseline: bool = False
    fgsm_epsilon: float = 0.0  # 0 disables the baseline
    defenses: tuple = ()  # dicts: {"kind": ..., "name": ..., params}
    adv_train_modes: tuple = ()  # subset of {"vanilla", "constraint"}
    adv_train: AdvTrainConfig = field(default_factory=AdvTrainConfig)
    save_clouds: bool = False


def config_from_json(source):
    """Build an ExperimentConfig from a JSON file path or a dict."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read config {source}: {exc}") from exc
    else:
        raw = dict(source)
    if "out_dir" not in raw:
        raise InvalidInputError("config needs an out_dir")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {"out_dir": raw["out_dir"]}
    for key in (
        "seed",
        "jobs",
        "source_arch",
        "train_epochs",
        "train_lr",
        "train_batch",
        "targets_per_instance",
        "max_instances",
        "use_transform",
        "transform_working_set",
        "analytic_baseline",
        "fgsm_epsilon",
        "save_clouds",
    ):
        if key in raw:
            kwargs[key] = raw[key]
    if "victim_archs" in raw:
        kwargs["victim_archs"] = tuple(raw["victim_archs"])
    try:
        if "dataset" in raw:
            if isinstance(raw["dataset"], str):  # directory written by save_dataset
                kwargs["dataset"] = raw["dataset"]
            else:
                ds = dict(raw["dataset"])
                if "classes" in ds:
                    ds["classes"] = tuple(ds["classes"])
                kwargs["dataset"] = SyntheticDatasetSpec(**ds)
        if "attack" in raw:
            if raw["attack"] is None:  # clean-accuracy-only run
                kwargs["attack"] = None
            else:
                # target_class is overridden per task; the placeholder only
                # fills the slot when the config leaves it out
                kwargs["attack"] = AttackConfig(**{"target_class": 0, **raw["attack"]})
        if "transform_learn" in raw:
            kwargs["transform_learn"] = AdvLearnConfig(**raw["transform_learn"])
        if "defenses" in raw:
            if isinstance(raw["defenses"], dict):  # one DefenseConfig bag -> all three kinds
                kwargs["defenses"] = DefenseConfig(**raw["defenses"]).entries()
            else:
                kwargs["defenses"] = tuple(dict(d) for d in raw["defenses"])
        if "adv_train_modes" in raw:
            kwargs["adv_train_modes"] = tuple(raw["adv_train_modes"])
        if "adv_train" in raw:
            at = dict(raw["adv_train"])
            if "inner_attack" in at and at["inner_attack"] is not None:
                at["inner_attack"] = AttackConfig(**{"target_class": 0, **at["inner_attack"]})
            kwargs["adv_train"] = AdvTrainConfig(**at)
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"bad config: {exc}") from exc


@dataclass
class ExperimentReport:
    rows: list
    aggregates: dict
    accuracies: dict = field(default_factory=dict)  # clean test accuracy per model tag


def recompute_aggregates(rows):
    """Aggregate per-variant success rates and metric means from raw rows."""
    variants = {}
    for row in rows:
        variants.setdefault(row["variant"], []).append(row)
    out = {}
    for variant, group in sorted(variants.items()):
        agg = {"n_instances": len(group)}
        bool_keys = sorted(
            k
            for k in group[0]
            if k == "whitebox_success" or k.startswith("transfer_") or k.startswith("defense_")
        )
        for key in bool_keys:
            agg[key.replace("success", "rate") if key == "whitebox_success" else key] = sum(
                1 for r in group if r[key]
            ) / len(group)
        for key in ("d_norm", "d_chamfer", "d_hausdorff", "d_plane"):
            agg[f"mean_{key}"] = sum(r[key] for r in group) / len(group)
        out[variant] = agg
    return out


def apply_defense(entry, cloud, seed=0):
    """Apply one configured input defense to a cloud."""
    kind = entry.get("kind")
    if kind == "srs":
        return srs(cloud, entry.get("keep", 0.875), seed=seed)
    if kind == "sor":
        return sor(cloud, entry.get("k", 2), entry.get("std_mult", 1.1))
    if kind == "noise":
        return noise_along_normal(
            cloud, entry.get("sigma_frac", 0.01), entry.get("k", 20), seed=seed
        )
    raise InvalidInputError(f"unknown defense kind {kind!r}")


def select_attack_tasks(model, dataset, mode="one", max_instances=0, seed=0):
    """(index, cloud, target) tasks over correctly classified test clouds.

    Misclassified test clouds are skipped.  mode "one" draws a single
    random wrong class per cloud, "all" enumerates every wrong class.
    """
    if mode not in ("one", "all"):
        raise InvalidInputError(f"targets_per_instance must be 'one' or 'all', got {mode!r}")
    num_classes = model.num_classes
    rng = np.random.default_rng(subseed(seed, "targets"))
    tasks = []
    for idx, cloud in enumerate(dataset.test):
        logits, _ = forward(model, cloud)
        offset = int(rng.integers(1, num_classes))  # drawn for every cloud, used for "one"
        if int(np.argmax(logits)) != cloud.label:
            continue
        if mode == "one":
            targets = [(cloud.label + offset) % num_classes]
        else:
            targets = [c for c in range(num_classes) if c != cloud.label]
        for target in targets:
            tasks.append((idx, cloud, target))
    if max_instances:
        tasks = tasks[:max_instances]
    return tasks


def export_features(model, clouds, path):
    """Dump pooled latent features, one CSV row per cloud."""
    lines = []
    dim = model.latent_dim
    header = "instance_id,label," + ",".join(f"f{i}" for i in range(dim))
    lines.append(header)
    for i, cloud in enumerate(clouds):
        _, latent = forward(model, cloud)
        label = -1 if cloud.label is None else cloud.label
        lines.append(
            f"{i},{label}," + ",".join(format(v, ".9g") for v in latent)
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _write_rows_csv(rows, path):
    base = [
        "variant",
        "instance_id",
        "source_class",
        "target_class",
        "whitebox_success",
        "iterations_used",
        "d_norm",
        "d_chamfer",
        "d_hausdorff",
        "d_plane",
    ]
    extras = sorted({k for row in rows for k in row} - set(base))
    cols = base + extras
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for col in cols:
            v = row.get(col, "")
            if isinstance(v, bool):
                v = int(v)
            if isinstance(v, float):
                v = format(v, ".9g")
            cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_summary_csv(aggregates, path):
    keys = sorted({k for agg in aggregates.values() for k in agg})
    lines = [",".join(["variant"] + keys)]
    for variant, agg in sorted(aggregates.items()):
        cells = [variant]
        for key in keys:
            v = agg.get(key, "")
            if isinstance(v, float):
                v = format(v, ".9g")
            cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def run_experiment(cfg):
    """Run the configured pipeline end to end and write all artifacts.

    Stages: dataset generation (or load from a path), source/victim
    training (plus optional adversarially trained victims), attack-task
    selection, one attack run per enabled variant, transfer and defense
    evaluation, CSV/JSON reports.  Clean test accuracies per model always
    land in accuracies.json; cfg.attack=None stops after that.  Attack
    rows finished before a failure are still flushed to the report files.
    Deterministic: rerunning the same config rewrites identical bytes.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(cfg.dataset, (str, Path)):
        if not Path(cfg.dataset).exists():
            raise InvalidInputError(f"dataset path {cfg.dataset} does not exist")
        dataset = load_dataset(cfg.dataset)
    else:
        dataset = generate_dataset(cfg.dataset)
        save_dataset(dataset, out / "dataset")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    num_classes = len(dataset.classes)

    def train_fresh(arch, tag):
        seed = subseed(cfg.seed, "train", tag).generate_state(1)[0]
        model = build_classifier(arch, num_classes, seed)
        model, history = train_classifier(
            model,
            dataset.train,
            cfg.train_epochs,
            seed,
            test_set=dataset.test,
            lr=cfg.train_lr,
            batch_size=cfg.train_batch,
        )
        save_checkpoint(ckpt_dir / f"{tag}.ckpt", model, int(seed))
        return model, history

    source, _ = train_fresh(cfg.source_arch, cfg.source_arch)
    victims = {}
    for arch in cfg.victim_archs:
        victims[arch], _ = train_fresh(arch, arch)
    for mode in cfg.adv_train_modes:
        arch = cfg.victim_archs[0] if cfg.victim_archs else cfg.source_arch
        seed = subseed(cfg.seed, "advtrain", mode).generate_state(1)[0]
        base = build_classifier(arch, num_classes, seed)
        at_cfg = replace(cfg.adv_train, seed=int(seed))
        if mode == "vanilla":
            at_cfg = replace(at_cfg, omega5=0.0, omega6=0.0)
        elif mode != "constraint":
            raise InvalidInputError(f"unknown adv_train mode {mode!r}")
        hardened = adversarial_train(base, dataset.train, at_cfg)
        tag = f"{arch}+{mode}"
        save_checkpoint(ckpt_dir / f"{tag}.ckpt", hardened, int(seed), extra={"mode": mode})
        victims[tag] = hardened

    transfer_models = {cfg.source_arch: source, **victims}
    accuracies = {
        tag: evaluate_accuracy(model, dataset.test)
        for tag, model in sorted(transfer_models.items())
    }
    (out / "accuracies.json").write_text(json.dumps(accuracies, sort_keys=True, indent=1) + "\n")
    if cfg.attack is None:  # nothing to attack: the report carries clean accuracies only
        _write_rows_csv([], out / "instances.csv")
        _write_summary_csv({}, out / "summary.csv")
        (out / "metrics.csv").write_text(METRIC_CSV_HEADER + "\n")
        return ExperimentReport(rows=[], aggregates={}, accuracies=accuracies)

    tasks = select_attack_tasks(
        source, dataset, cfg.targets_per_instance, cfg.max_instances, cfg.seed
    )

    variants = {"ita": (cfg.attack, None)}
    if cfg.use_transform:
        working = [c for c in dataset.train if _predicts(source, c)][: cfg.transform_working_set]
        t_model = adversarial_learn_T(
            source,
            working,
            cfg.transform_learn,
            replace(cfg.attack, target_class=0),
            seed=int(subseed(cfg.seed, "learnT").generate_state(1)[0]),
        )
        save_transform(out / "transform.ckpt", t_model, cfg.seed)
        variants["ita_t"] = (cfg.attack, t_model)
    if cfg.analytic_baseline:
        variants["ita_analytic"] = (cfg.attack, "analytic")
    fgsm_cfg = None
    if cfg.fgsm_epsilon > 0.0:
        fgsm_cfg = {
            "epsilon": cfg.fgsm_epsilon,
            "iterations": cfg.attack.iterations,
            "k_neighbors": cfg.attack.k_neighbors,
        }
        variants["fgsm"] = (None, None)

    rows = []
    records_dir = out / "records"
    records_dir.mkdir(exist_ok=True)
    clouds_dir = out / "adv_clouds"
    if cfg.save_clouds:
        clouds_dir.mkdir(exist_ok=True)
    try:
        for variant in sorted(variants):
            _run_variant(
                cfg,
                variant,
                variants[variant],
                tasks,
                source,
                transfer_models,
                fgsm_cfg,
                records_dir,
                clouds_dir,
                rows,
            )
    finally:
        # Flush whatever finished, so a failed run still leaves its partial tables.
        aggregates = recompute_aggregates(rows)
        _write_rows_csv(rows, out / "instances.csv")
        _write_summary_csv(aggregates, out / "summary.csv")
        metric_lines = [METRIC_CSV_HEADER]
        for row in rows:
            metric_lines.append(
                ",".join(
                    [f"{row['variant']}:{row['instance_id']}"]
                    + [
                        format(row[k], ".9g")
                        for k in ("d_norm", "d_chamfer", "d_hausdorff", "d_plane")
                    ]
                )
            )
        (out / "metrics.csv").write_text("\n".join(metric_lines) + "\n")
    return ExperimentReport(rows=rows, aggregates=aggregates, accuracies=accuracies)


def _run_variant(
    cfg, variant, arm, tasks, source, transfer_models, fgsm_cfg, records_dir, clouds_dir, rows
):
    """Attack every task under one variant, appending result rows as they finish."""
    attack_cfg, transform = arm
    if transform == "analytic":
        transform = AnalyticEnsemble(
            scope="point", seed=int(subseed(cfg.seed, "ensemble").generate_state(1)[0])
        )
    payload = []
    for idx, cloud, target in tasks:
        seed = int(subseed(cfg.seed, "attack", variant, idx, target).generate_state(1)[0])
        kind = "fgsm" if variant == "fgsm" else "ita"
        payload.append((kind, cloud, target, seed))
    results = map_attack_tasks(
        source,
        payload,
        attack_cfg=attack_cfg,
        transform=transform,
        fgsm_cfg=fgsm_cfg,
        jobs=cfg.jobs,
    )
    variant_records = []
    for (idx, cloud, target), result in zip(tasks, results):
        instance_id = f"test{idx:04d}_t{target}"
        row = {
            "variant": variant,
            "instance_id": instance_id,
            "source_class": cloud.label,
            "target_class": target,
            "whitebox_success": result.success,
            "iterations_used": result.iterations_used,
            "d_norm": result.metrics.d_norm,
            "d_chamfer": result.metrics.d_chamfer,
            "d_hausdorff": result.metrics.d_hausdorff,
            "d_plane": result.metrics.d_plane,
        }
        for tag, victim in sorted(transfer_models.items()):
            logits, _ = forward(victim, result.adversarial)
            row[f"transfer_{tag}"] = int(np.argmax(logits)) == target
        for entry in cfg.defenses:
            name = entry.get("name", entry["kind"])
            dseed = int(
                subseed(cfg.seed, "defense", name, variant, idx, target).generate_state(1)[0]
            )
            defended = apply_defense(entry, result.adversarial, seed=dseed)
            logits, _ = forward(source, defended)
            row[f"defense_{name}"] = int(np.argmax(logits)) == target
        rows.append(row)
        variant_records.append(
            {
                "instance_id": instance_id,
                "target_class": target,
                "success": result.success,
                "iterations_used": result.iterations_used,
                "losses": result.final_losses,
            }
        )
        if cfg.save_clouds:
            cloud_io.write_ply(clouds_dir / f"{variant}_{instance_id}.ply", result.adversarial)
    (records_dir / f"{variant}.json").write_text(
        json.dumps(variant_records, sort_keys=True, indent=1) + "\n"
    )


def _predicts(model, cloud):
    logits, _ = forward(model, cloud)
    return int(np.argmax(logits)) == cloud.label
