"""Point samplers, the labeled/unlabeled losses, and the three training loops.

The trainers are deterministic: every random draw comes from a seed
derived by hashing (base seed, epoch, scene, purpose), so rerunning with
the same seeds is bitwise reproducible and removing the unlabeled stream
does not shift the labeled one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics, models
from . import tensor as T
from .drr import ProjectionImage, apply_noise, render_bone_mask, render_drr, to_network_input
from .geometry import CameraGeometry
from .isosurface import TriangleMesh
from .phantom import (PhantomScene, Volume3D, density_volume, mesh_oracle,
                      occupancy_labels, one_hot)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    w_u: float = 0.5
    w_k: float = 0.1


@dataclass
class TrainSchedule:
    epochs: int = 400
    batch_size: int = 3
    lr: float = 0.01
    momentum: float = 0.98
    lr_decay: float = 0.1
    decay_period: int = 100

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_period)


@dataclass
class SampleBatch:
    points: np.ndarray
    targets: np.ndarray | None
    provenance: str

    def __post_init__(self):
        if self.provenance == "labeled" and self.targets is None:
            raise ValueError("labeled batches carry targets")
        if self.provenance == "unlabeled" and self.targets is not None:
            raise ValueError("unlabeled batches never carry targets")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _merge_meshes(meshes: dict[int, TriangleMesh]) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for cls in sorted(meshes):
        m = meshes[cls]
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def sample_points(scene: PhantomScene, mode: str, n_surface: int, n_uniform: int,
                  sigma: float, seed: int,
                  meshes: dict[int, TriangleMesh] | None = None) -> SampleBatch:
    """Labeled: near-surface + uniform points with oracle one-hot targets.

    Unlabeled: uniform points only. Near-surface points are mesh samples
    perturbed by isotropic Gaussian(sigma) and clamped to the volume.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A3)))
    if mode == "unlabeled":
        pts = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
        return SampleBatch(points=pts, targets=None, provenance="unlabeled")
    if mode != "labeled":
        raise ValueError(f"mode must be 'labeled' or 'unlabeled', got {mode!r}")
    if meshes is None:
        raise ValueError("labeled sampling requires ground-truth meshes")
    merged = _merge_meshes(meshes)
    surf = metrics.sample_surface_points(
        merged, n_surface, seed=derive_seed(seed, "surf")
    ).points
    surf = np.clip(surf + rng.normal(0.0, sigma, size=surf.shape), -1.0, 1.0)
    uni = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    pts = np.concatenate([surf, uni])
    targets = one_hot(occupancy_labels(scene, pts))
    return SampleBatch(points=pts, targets=targets, provenance="labeled")


# ---------------------------------------------------------------------------
# losses


def loss_labeled(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Cross-entropy of predicted occupancy against one-hot ground truth."""
    return T.softmax_ce(logits, targets)


def loss_unlabeled(logits_xray: T.Tensor, f_xray: T.Tensor, s_ct: np.ndarray,
                   f_ct: np.ndarray, gamma, cfg: LossConfig
                   ) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Pseudo-label CE plus feature distillation; teacher inputs are constants.

    Returns (w_u * pseudo + w_k * kd, pseudo, kd).
    """
    if f_xray.shape[0] != f_ct.shape[0]:
        raise ValueError(
            f"feature batches differ: {f_xray.shape[0]} vs {f_ct.shape[0]}"
        )
    pseudo_targets = models.one_hot_inference(s_ct)
    pseudo = T.softmax_ce(logits_xray, pseudo_targets)
    kd = T.l1_loss(gamma(f_xray), f_ct)
    total = cfg.w_u * pseudo + cfg.w_k * kd
    return total, pseudo, kd


def loss_joint(labeled: T.Tensor, unlabeled_total: T.Tensor | None,
               cfg: LossConfig) -> T.Tensor:
    """(1 - w_u) * labeled + unlabeled."""
    weighted = (1.0 - cfg.w_u) * labeled
    return weighted if unlabeled_total is None else weighted + unlabeled_total


# ---------------------------------------------------------------------------
# dataset bundles


@dataclass
class SceneBundle:
    """Everything one scene contributes to training and evaluation."""

    scene: PhantomScene
    views: dict[str, CameraGeometry]
    images: dict[str, ProjectionImage] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    volume: Volume3D | None = None
    meshes: dict[int, TriangleMesh] | None = None


def build_bundle(scene: PhantomScene, views: dict[str, CameraGeometry],
                 ct_resolution: int, labeled: bool, drr_step: float = 0.002,
                 photons_n0: float = 1e5, sigma_e: float = 1e-3,
                 mesh_resolution: int = 128,
                 with_volume: bool = True) -> SceneBundle:
    """Render projections/masks, voxelize the CT, and (if labeled) mesh the truth."""
    images, masks = {}, {}
    for name, geom in views.items():
        clean = render_drr(scene, geom, step=drr_step)
        images[name] = apply_noise(clean, photons_n0=photons_n0, sigma_e=sigma_e,
                                   seed=derive_seed(scene.seed, name, "noise"))
        masks[name] = render_bone_mask(scene, geom, step=drr_step).values
    volume = density_volume(scene, ct_resolution) if with_volume else None
    meshes = None
    if labeled:
        meshes = {cls: mesh_oracle(scene, cls, resolution=mesh_resolution)
                  for cls in (1, 2, 3, 4)}
    return SceneBundle(scene=scene, views=views, images=images, masks=masks,
                       volume=volume, meshes=meshes)


def _log_line(log_path, record: dict) -> None:
    if log_path is not None:
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{what} diverged (non-finite) at epoch {epoch}")


# ---------------------------------------------------------------------------
# trainers


def train_teacher(bundles: list[SceneBundle], schedule: TrainSchedule,
                  ct_resolution: int, n_points: int = 5000, seed: int = 0,
                  base_width: int = 8, log_path=None
                  ) -> tuple[models.TeacherNet, list[dict]]:
    """Supervised CT occupancy training on uniform points with oracle labels."""
    if not bundles:
        raise ValueError("need at least one labeled scene")
    net = models.TeacherNet(resolution=ct_resolution, base_width=base_width,
                            seed=derive_seed(seed, "teacher-init"))
    opt = T.SGD(net.params, lr=schedule.lr, momentum=schedule.momentum)
    history = []
    steps = max(1, -(-len(bundles) // schedule.batch_size))
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        losses = []
        for step in range(steps):
            # small datasets fill the batch by resampling scenes with fresh points
            group = [(slot, bundles[(step * schedule.batch_size + slot) % len(bundles)])
                     for slot in range(schedule.batch_size)]
            opt.zero_grad()
            total = None
            feature_volumes: dict[int, T.Tensor] = {}
            for slot, b in group:
                batch = sample_points(
                    b.scene, "unlabeled", 0, n_points, 0.0,
                    seed=derive_seed(seed, epoch, b.scene.seed, slot, "teacher-pts"),
                )
                targets = one_hot(occupancy_labels(b.scene, batch.points))
                fv = feature_volumes.get(id(b))
                if fv is None:
                    fv = net.encode(b.volume)
                    feature_volumes[id(b)] = fv
                out = net.forward_points(b.volume, batch.points, feature_volume=fv)
                ce = loss_labeled(out.logits, targets)
                total = ce if total is None else total + ce
            total = total * (1.0 / len(group))
            total.backward()
            opt.step()
            losses.append(total.item())
        mean_loss = float(np.mean(losses))
        _check_finite(mean_loss, "teacher loss", epoch)
        record = {"epoch": epoch, "loss": mean_loss, "lr": opt.lr}
        history.append(record)
        _log_line(log_path, record)
    return net, history


def train_segmenter(pairs: list[tuple[np.ndarray, np.ndarray]],
                    schedule: TrainSchedule, image_size: int, seed: int = 0,
                    base_width: int = 8, log_path=None
                    ) -> tuple[models.SegNet, list[dict]]:
    """Per-pixel cross-entropy training of the enhancement mask network."""
    if not pairs:
        raise ValueError("need at least one (image, mask) pair")
    net = models.SegNet(image_size=image_size, base_width=base_width,
                        seed=derive_seed(seed, "seg-init"))
    opt = T.SGD(net.params, lr=schedule.lr, momentum=schedule.momentum)
    images = np.stack([p[0] for p in pairs])[:, None]
    targets = np.stack([p[1] for p in pairs])[:, None]
    n = len(pairs)
    history = []
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        order = np.random.default_rng(
            np.random.SeedSequence((derive_seed(seed, epoch, "seg-order"),))
        ).permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            sel = order[start:start + schedule.batch_size]
            opt.zero_grad()
            logits = net.forward(images[sel])
            loss = T.bce_logits(logits, targets[sel])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        _check_finite(mean_loss, "segmenter loss", epoch)
        record = {"epoch": epoch, "loss": mean_loss, "lr": opt.lr}
        history.append(record)
        _log_line(log_path, record)
    return net, history


@dataclass
class PointCounts:
    n_surface: int = 2500
    n_uniform: int = 2500
    n_unlabeled: int = 5000
    sigma: float = 0.03


def _prepare_student_inputs(bundles: list[SceneBundle], seg: models.SegNet,
                            w_m: float, threshold: float
                            ) -> list[dict[str, models.ViewInput]]:
    out = []
    for b in bundles:
        out.append({
            name: models.prepare_view(img, seg, w_m=w_m, threshold=threshold,
                                      log_norm_max=b.scene.log_norm_max)
            for name, img in b.images.items()
        })
    return out


def train_student(labeled: list[SceneBundle], unlabeled: list[SceneBundle],
                  teacher: models.TeacherNet, seg: models.SegNet,
                  schedule: TrainSchedule, cfg: LossConfig,
                  counts: PointCounts | None = None, image_size: int = 128,
                  base_width: int = 16, w_m: float = 0.5, threshold: float = 0.5,
                  seed: int = 0, log_path=None
                  ) -> tuple[models.StudentNet, list[dict]]:
    """Joint semi-supervised training of the biplanar network.

    Each step draws labeled and unlabeled scenes half/half (per the batch
    size); teacher and segmenter stay frozen, gradients reach only the
    student and its distillation head.
    """
    if teacher is None:
        raise ValueError("a trained teacher is required")
    if not labeled:
        raise ValueError("need at least one labeled scene")
    counts = counts or PointCounts()
    net = models.StudentNet(image_size=image_size, base_width=base_width,
                            seed=derive_seed(seed, "student-init"))
    opt = T.SGD(net.params, lr=schedule.lr, momentum=schedule.momentum)

    labeled_inputs = _prepare_student_inputs(labeled, seg, w_m, threshold)
    unlabeled_inputs = _prepare_student_inputs(unlabeled, seg, w_m, threshold)
    frozen = [models.FrozenTeacher(teacher, b.volume) for b in unlabeled]

    per_step_lab = max(1, schedule.batch_size // 2)
    per_step_unl = min(schedule.batch_size - per_step_lab, len(unlabeled))
    steps = max(1, -(-len(labeled) // per_step_lab))
    history = []
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        lab_order = np.random.default_rng(np.random.SeedSequence(
            (derive_seed(seed, epoch, "lab-order"),))).permutation(len(labeled))
        if unlabeled:
            unl_order = np.random.default_rng(np.random.SeedSequence(
                (derive_seed(seed, epoch, "unl-order"),))).permutation(len(unlabeled))
        sums = {"L_labeled": 0.0, "L_pseudo": 0.0, "L_kd": 0.0, "L_joint": 0.0}
        for step in range(steps):
            opt.zero_grad()
            lab_ce = None
            sel = lab_order[(step * per_step_lab) % len(labeled):][:per_step_lab]
            for i in sel:
                b = labeled[i]
                batch = sample_points(
                    b.scene, "labeled", counts.n_surface, counts.n_uniform,
                    counts.sigma,
                    seed=derive_seed(seed, epoch, b.scene.seed, "lab-pts"),
                    meshes=b.meshes,
                )
                out = net.forward_points(labeled_inputs[i], batch.points)
                ce = loss_labeled(out.logits, batch.targets)
                lab_ce = ce if lab_ce is None else lab_ce + ce
            lab_ce = lab_ce * (1.0 / len(sel))

            unl_total = pseudo = kd = None
            if unlabeled and per_step_unl > 0:
                usel = unl_order[(step * per_step_unl) % len(unlabeled):][:per_step_unl]
                for j in usel:
                    b = unlabeled[j]
                    batch = sample_points(
                        b.scene, "unlabeled", 0, counts.n_unlabeled, 0.0,
                        seed=derive_seed(seed, epoch, b.scene.seed, "unl-pts"),
                    )
                    f_ct, s_ct = frozen[j].query(batch.points)
                    out = net.forward_points(unlabeled_inputs[j], batch.points)
                    tot, ps, k = loss_unlabeled(out.logits, out.features, s_ct,
                                                f_ct, net.project_features, cfg)
                    unl_total = tot if unl_total is None else unl_total + tot
                    pseudo = ps if pseudo is None else pseudo + ps
                    kd = k if kd is None else kd + k
                unl_total = unl_total * (1.0 / len(usel))
                pseudo = pseudo * (1.0 / len(usel))
                kd = kd * (1.0 / len(usel))

            joint = loss_joint(lab_ce, unl_total, cfg)
            joint.backward()
            opt.step()
            sums["L_labeled"] += lab_ce.item()
            sums["L_pseudo"] += pseudo.item() if pseudo is not None else 0.0
            sums["L_kd"] += kd.item() if kd is not None else 0.0
            sums["L_joint"] += joint.item()
        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()},
                  "lr": opt.lr}
        _check_finite(record["L_joint"], "student loss", epoch)
        history.append(record)
        _log_line(log_path, record)
    return net, history


def train_student_supervised(labeled: list[SceneBundle], seg: models.SegNet,
                             schedule: TrainSchedule,
                             counts: PointCounts | None = None,
                             image_size: int = 128, base_width: int = 16,
                             w_m: float = 0.5, threshold: float = 0.5,
                             seed: int = 0, log_path=None
                             ) -> tuple[models.StudentNet, list[dict]]:
    """Pure supervised baseline: labeled CE only, same seed discipline.

    With no unlabeled scenes and w_u = 0 the joint trainer reduces to this
    loop; the loss traces match bitwise for equal seeds.
    """
    if not labeled:
        raise ValueError("need at least one labeled scene")
    counts = counts or PointCounts()
    net = models.StudentNet(image_size=image_size, base_width=base_width,
                            seed=derive_seed(seed, "student-init"))
    opt = T.SGD(net.params, lr=schedule.lr, momentum=schedule.momentum)
    labeled_inputs = _prepare_student_inputs(labeled, seg, w_m, threshold)
    per_step_lab = max(1, schedule.batch_size // 2)
    steps = max(1, -(-len(labeled) // per_step_lab))
    history = []
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        lab_order = np.random.default_rng(np.random.SeedSequence(
            (derive_seed(seed, epoch, "lab-order"),))).permutation(len(labeled))
        sums = {"L_labeled": 0.0, "L_joint": 0.0}
        for step in range(steps):
            opt.zero_grad()
            lab_ce = None
            sel = lab_order[(step * per_step_lab) % len(labeled):][:per_step_lab]
            for i in sel:
                b = labeled[i]
                batch = sample_points(
                    b.scene, "labeled", counts.n_surface, counts.n_uniform,
                    counts.sigma,
                    seed=derive_seed(seed, epoch, b.scene.seed, "lab-pts"),
                    meshes=b.meshes,
                )
                out = net.forward_points(labeled_inputs[i], batch.points)
                ce = loss_labeled(out.logits, batch.targets)
                lab_ce = ce if lab_ce is None else lab_ce + ce
            lab_ce = lab_ce * (1.0 / len(sel))
            joint = lab_ce * 1.0  # (1 - w_u) with w_u = 0
            joint.backward()
            opt.step()
            sums["L_labeled"] += lab_ce.item()
            sums["L_joint"] += joint.item()
        record = {"epoch": epoch, "L_labeled": sums["L_labeled"] / steps,
                  "L_pseudo": 0.0, "L_kd": 0.0,
                  "L_joint": sums["L_joint"] / steps, "lr": opt.lr}
        _check_finite(record["L_joint"], "student loss", epoch)
        history.append(record)
        _log_line(log_path, record)
    return net, history


def point_accuracy(predict, scene: PhantomScene, n: int = 10000,
                   seed: int = 123) -> float:
    """Fraction of uniform points whose argmax class matches the oracle."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xACC)))
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    probs = predict(pts)
    pred = np.argmax(probs, axis=1)
    truth = occupancy_labels(scene, pts)
    return float(np.mean(pred == truth))
