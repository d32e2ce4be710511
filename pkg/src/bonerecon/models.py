"""The three reconstruction networks and the point-wise implicit decoders.

TeacherNet consumes the synthetic CT through a reduced-capacity 3D
encoder-decoder and decodes 64-channel voxel-aligned features per query
point. StudentNet runs one independent 2D encoder per view (AP/RL) over
[original; enhanced] projections, concatenates pixel-aligned features
with per-view depth into a 514-vector, and decodes occupancy; a linear
head projects 514 -> 64 for feature distillation. SegNet is a small 2D
encoder-decoder producing per-pixel foreground probability for the
enhancement step. Encoder capacity is a knob; the interface dimensions
(64 / 256+1 per view / 514 / MLP widths) are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .drr import DOMAIN_INTENSITY, ProjectionImage, to_network_input
from .geometry import CameraGeometry, project_points, view_depths
from .phantom import Volume3D

TEACHER_FEATURE_DIM = 64
STUDENT_VIEW_CHANNELS = 256
STUDENT_FEATURE_DIM = (STUDENT_VIEW_CHANNELS + 1) * 2  # 514
TEACHER_MLP = (64, 128, 256, 128, 64, 5)
STUDENT_MLP = (514, 1024, 512, 256, 128, 5)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))


def _conv_param(rng, k_out: int, c_in: int, *kernel: int) -> tuple[T.Tensor, T.Tensor]:
    fan_in = c_in * int(np.prod(kernel))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k_out, c_in, *kernel))
    return T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(k_out), requires_grad=True)


def _linear_param(rng, d_in: int, d_out: int) -> tuple[T.Tensor, T.Tensor]:
    w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
    return T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(d_out), requires_grad=True)


def _mlp_params(rng, widths: tuple[int, ...], prefix: str) -> dict[str, T.Tensor]:
    params = {}
    for i, (din, dout) in enumerate(zip(widths[:-1], widths[1:])):
        w, b = _linear_param(rng, din, dout)
        params[f"{prefix}{i}_w"] = w
        params[f"{prefix}{i}_b"] = b
    return params


def _mlp_forward(params: dict, prefix: str, n_layers: int, x: T.Tensor) -> T.Tensor:
    for i in range(n_layers):
        x = T.linear(x, params[f"{prefix}{i}_w"], params[f"{prefix}{i}_b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def _encoder_params(rng, conv, in_ch: int, base: int, out_ch: int,
                    prefix: str, fuse_kernel: int = 3) -> dict[str, T.Tensor]:
    """Three-level encoder-decoder with skip concatenation, full-res output.

    fuse_kernel sets the kernel of the full-resolution fusion conv; 1 keeps
    the 3D path affordable (spatial mixing happens at the coarser levels).
    """
    nd = _nd(conv)
    p = {}
    p[f"{prefix}enc0_w"], p[f"{prefix}enc0_b"] = _conv_param(rng, base, in_ch, *(3,) * nd)
    p[f"{prefix}down1_w"], p[f"{prefix}down1_b"] = _conv_param(rng, 2 * base, base, *(2,) * nd)
    p[f"{prefix}enc1_w"], p[f"{prefix}enc1_b"] = _conv_param(rng, 2 * base, 2 * base, *(3,) * nd)
    p[f"{prefix}down2_w"], p[f"{prefix}down2_b"] = _conv_param(rng, 4 * base, 2 * base, *(2,) * nd)
    p[f"{prefix}enc2_w"], p[f"{prefix}enc2_b"] = _conv_param(rng, 4 * base, 4 * base, *(3,) * nd)
    p[f"{prefix}up1_w"], p[f"{prefix}up1_b"] = _conv_param(rng, 2 * base, 6 * base, *(3,) * nd)
    p[f"{prefix}up0_w"], p[f"{prefix}up0_b"] = _conv_param(rng, 2 * base, 3 * base, *(fuse_kernel,) * nd)
    p[f"{prefix}head_w"], p[f"{prefix}head_b"] = _conv_param(rng, out_ch, 2 * base, *(1,) * nd)
    return p


def _nd(conv) -> int:
    return 3 if conv is T.conv3d else 2


def _encoder_forward(params: dict, prefix: str, conv, up, x: T.Tensor) -> T.Tensor:
    def layer(name, h, stride=1, pad=0, act=True):
        h = conv(h, params[f"{prefix}{name}_w"], params[f"{prefix}{name}_b"],
                 stride=stride, pad=pad)
        return T.relu(h) if act else h

    e0 = layer("enc0", x, pad=1)
    d1 = layer("down1", e0, stride=2)
    e1 = layer("enc1", d1, pad=1)
    d2 = layer("down2", e1, stride=2)
    e2 = layer("enc2", d2, pad=1)
    u1 = layer("up1", T.concat([up(e2), e1], axis=1), pad=1)
    fuse_k = params[f"{prefix}up0_w"].shape[-1]
    u0 = layer("up0", T.concat([up(u1), e0], axis=1), pad=fuse_k // 2)
    return layer("head", u0, act=False)


@dataclass
class PointOutput:
    features: T.Tensor    # pixel/voxel-aligned feature batch
    logits: T.Tensor      # [N, 5]

    @property
    def probs(self) -> np.ndarray:
        return T.softmax(self.logits.data)


class TeacherNet:
    """CT-based occupancy network: 3D encoder + per-point MLP decoder."""

    kind = "teacher"

    def __init__(self, resolution: int, base_width: int = 8, seed: int = 0,
                 input_scale: float = 2.0):
        if resolution % 4:
            raise ValueError("teacher resolution must be divisible by 4")
        self.resolution = resolution
        self.base_width = base_width
        self.seed = seed
        self.input_scale = input_scale  # maps bone attenuation to O(1)
        rng = _rng(seed)
        self.params = _encoder_params(rng, T.conv3d, 1, base_width,
                                      TEACHER_FEATURE_DIM, "enc_", fuse_kernel=1)
        self.params.update(_mlp_params(rng, TEACHER_MLP, "mlp"))

    @property
    def hyperparams(self) -> dict:
        return {"resolution": self.resolution, "base_width": self.base_width,
                "seed": self.seed, "input_scale": self.input_scale}

    def encode(self, volume: Volume3D) -> T.Tensor:
        """Feature volume [64, R, R, R] at input resolution."""
        if volume.values.shape != (self.resolution,) * 3:
            raise ValueError(
                f"volume resolution {volume.values.shape} does not match "
                f"net config {self.resolution}"
            )
        x = T.Tensor(volume.values[None, None] * self.input_scale)
        f = _encoder_forward(self.params, "enc_", T.conv3d, T.upsample3d, x)
        return T.reshape(f, (TEACHER_FEATURE_DIM,) + (self.resolution,) * 3)

    def decode(self, feats: T.Tensor) -> T.Tensor:
        return _mlp_forward(self.params, "mlp", len(TEACHER_MLP) - 1, feats)

    def forward_points(self, volume: Volume3D, pts: np.ndarray,
                       feature_volume: T.Tensor | None = None) -> PointOutput:
        """Voxel-aligned features and occupancy logits for world points [N,3]."""
        fv = feature_volume if feature_volume is not None else self.encode(volume)
        idx = volume.world_to_index(np.atleast_2d(pts))
        feats = T.gather3d(fv, idx)
        return PointOutput(features=feats, logits=self.decode(feats))

    def save(self, path) -> None:
        T.save_checkpoint(self.params, path,
                          extra={"kind": self.kind, "hyperparams": self.hyperparams})

    @classmethod
    def load(cls, path) -> "TeacherNet":
        arrays, manifest = T.load_checkpoint(path)
        net = cls(**manifest["hyperparams"])
        _restore(net.params, arrays)
        return net


class StudentNet:
    """Biplanar occupancy network with per-view encoders and a 514-dim decoder."""

    kind = "student"
    views = ("AP", "RL")

    def __init__(self, image_size: int = 128, base_width: int = 16, seed: int = 0):
        if image_size % 4:
            raise ValueError("student image size must be divisible by 4")
        self.image_size = image_size
        self.base_width = base_width
        self.seed = seed
        rng = _rng(seed)
        self.params: dict[str, T.Tensor] = {}
        for view in self.views:  # independent, not weight-shared
            self.params.update(
                _encoder_params(rng, T.conv2d, 2, base_width,
                                STUDENT_VIEW_CHANNELS, f"{view.lower()}_")
            )
        self.params.update(_mlp_params(rng, STUDENT_MLP, "mlp"))
        gw, gb = _linear_param(rng, STUDENT_FEATURE_DIM, TEACHER_FEATURE_DIM)
        self.params["gamma_w"] = gw
        self.params["gamma_b"] = gb

    @property
    def hyperparams(self) -> dict:
        return {"image_size": self.image_size, "base_width": self.base_width,
                "seed": self.seed}

    def encode_view(self, view: str, image2: np.ndarray) -> T.Tensor:
        """256-channel feature map for one view's [2,H,W] input stack."""
        if image2.shape != (2, self.image_size, self.image_size):
            raise ValueError(
                f"view input must be [2,{self.image_size},{self.image_size}], "
                f"got {image2.shape}"
            )
        x = T.Tensor(image2[None])
        f = _encoder_forward(self.params, f"{view.lower()}_", T.conv2d,
                             T.upsample2d, x)
        return T.reshape(f, (STUDENT_VIEW_CHANNELS, self.image_size, self.image_size))

    def encode_views(self, inputs: dict[str, "ViewInput"]) -> dict[str, T.Tensor]:
        self._check_views(inputs)
        return {v: self.encode_view(v, inputs[v].image) for v in self.views}

    def decode_points(self, fmaps: dict[str, T.Tensor],
                      inputs: dict[str, "ViewInput"],
                      pts: np.ndarray) -> PointOutput:
        pts = np.atleast_2d(pts)
        parts: list[T.Tensor] = []
        for view in self.views:  # fixed order: [F_AP; z_AP; F_RL; z_RL]
            geom = inputs[view].geometry
            uv = project_points(geom, pts)
            parts.append(T.gather2d(fmaps[view], uv))
            parts.append(T.Tensor(view_depths(geom, pts)[:, None]))
        feats = T.concat(parts, axis=1)
        logits = _mlp_forward(self.params, "mlp", len(STUDENT_MLP) - 1, feats)
        return PointOutput(features=feats, logits=logits)

    def forward_points(self, inputs: dict[str, "ViewInput"],
                       pts: np.ndarray) -> PointOutput:
        return self.decode_points(self.encode_views(inputs), inputs, pts)

    def project_features(self, feats: T.Tensor) -> T.Tensor:
        """Distillation head: learnable affine map 514 -> 64."""
        if feats.shape[-1] != STUDENT_FEATURE_DIM:
            raise ValueError(
                f"project_features expects dim {STUDENT_FEATURE_DIM}, "
                f"got {feats.shape[-1]}"
            )
        flat = feats if feats.data.ndim == 2 else T.reshape(feats, (1, -1))
        out = T.linear(flat, self.params["gamma_w"], self.params["gamma_b"])
        return out if feats.data.ndim == 2 else T.reshape(out, (TEACHER_FEATURE_DIM,))

    def _check_views(self, inputs) -> None:
        for view in self.views:
            if view not in inputs:
                raise ValueError(f"missing {view} view input")
            if inputs[view].geometry is None:
                raise ValueError(f"{view} view has no geometry")

    def save(self, path) -> None:
        T.save_checkpoint(self.params, path,
                          extra={"kind": self.kind, "hyperparams": self.hyperparams})

    @classmethod
    def load(cls, path) -> "StudentNet":
        arrays, manifest = T.load_checkpoint(path)
        net = cls(**manifest["hyperparams"])
        _restore(net.params, arrays)
        return net


class SegNet:
    """Per-pixel foreground probability for X-ray enhancement."""

    kind = "segnet"

    def __init__(self, image_size: int = 128, base_width: int = 8, seed: int = 0):
        if image_size % 4:
            raise ValueError("segnet image size must be divisible by 4")
        self.image_size = image_size
        self.base_width = base_width
        self.seed = seed
        rng = _rng(seed)
        self.params = _encoder_params(rng, T.conv2d, 1, base_width, 1, "seg_")

    @property
    def hyperparams(self) -> dict:
        return {"image_size": self.image_size, "base_width": self.base_width,
                "seed": self.seed}

    def forward(self, images: np.ndarray) -> T.Tensor:
        """Logits [N,1,H,W] for a batch of single-channel images."""
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"segnet expects [N,1,H,W], got {images.shape}")
        return _encoder_forward(self.params, "seg_", T.conv2d, T.upsample2d,
                                T.Tensor(images))

    def predict_prob(self, image: np.ndarray) -> np.ndarray:
        """Foreground probability map in [0,1], same extents as the input."""
        with T.no_grad():
            logits = self.forward(image[None, None])
        z = logits.data[0, 0]
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                        np.exp(np.clip(z, -700, 0)) / (1.0 + np.exp(np.clip(z, -700, 0))))

    def save(self, path) -> None:
        T.save_checkpoint(self.params, path,
                          extra={"kind": self.kind, "hyperparams": self.hyperparams})

    @classmethod
    def load(cls, path) -> "SegNet":
        arrays, manifest = T.load_checkpoint(path)
        net = cls(**manifest["hyperparams"])
        _restore(net.params, arrays)
        return net


def _restore(params: dict[str, T.Tensor], arrays: dict[str, np.ndarray]) -> None:
    if set(params) != set(arrays):
        raise ValueError("checkpoint parameter names do not match the network")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}")
        p.data = np.ascontiguousarray(arrays[name])


# ---------------------------------------------------------------------------
# enhancement and inference helpers


@dataclass
class ViewInput:
    """Per-view network input: [original; enhanced] stack plus its geometry."""

    image: np.ndarray             # [2, H, W]
    geometry: CameraGeometry


def enhance_values(values: np.ndarray, mask: np.ndarray, w_m: float) -> np.ndarray:
    """Weighted masking: keep foreground, scale background by w_m."""
    if values.shape != mask.shape:
        raise ValueError(f"image/mask extents differ: {values.shape} vs {mask.shape}")
    return values * mask + w_m * values * (1.0 - mask)


def enhance_image(seg: SegNet, img: ProjectionImage, w_m: float = 0.5,
                  threshold: float = 0.5) -> ProjectionImage:
    """Foreground-enhanced image from a binarized segmentation mask."""
    if not 0.0 <= w_m <= 1.0:
        raise ValueError(f"w_m must be in [0,1], got {w_m}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    mask = (seg.predict_prob(img.values) > threshold).astype(np.float64)
    return ProjectionImage(values=enhance_values(img.values, mask, w_m),
                           geometry=img.geometry, domain=img.domain)


def prepare_view(img: ProjectionImage, seg: SegNet, w_m: float = 0.5,
                 threshold: float = 0.5, log_norm_max: float = 0.4) -> ViewInput:
    """Network input for one view from an intensity-domain projection."""
    if img.domain != DOMAIN_INTENSITY:
        raise ValueError("prepare_view expects an intensity-domain projection")
    base = to_network_input(img, log_norm_max=log_norm_max)
    normed = ProjectionImage(values=base, geometry=img.geometry, domain="lognorm")
    enhanced = enhance_image(seg, normed, w_m=w_m, threshold=threshold)
    return ViewInput(image=np.stack([base, enhanced.values]), geometry=img.geometry)


def one_hot_inference(s: np.ndarray) -> np.ndarray:
    """Probability vector(s) to one-hot at argmax; ties take the lowest class."""
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    out = np.zeros_like(s2)
    out[np.arange(len(s2)), np.argmax(s2, axis=1)] = 1.0
    return out[0] if single else out


class FrozenTeacher:
    """Cached teacher inference on one CT: the distillation/pseudo-label source."""

    def __init__(self, teacher: TeacherNet, volume: Volume3D):
        self.teacher = teacher
        self.volume = volume
        with T.no_grad():
            self.feature_volume = teacher.encode(volume).data

    def query(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(voxel-aligned features [N,64], occupancy probabilities [N,5])."""
        with T.no_grad():
            out = self.teacher.forward_points(
                self.volume, pts, feature_volume=T.Tensor(self.feature_volume)
            )
        return out.features.data, out.probs


def make_teacher_predictor(teacher: TeacherNet, volume: Volume3D):
    frozen = FrozenTeacher(teacher, volume)

    def predictor(pts: np.ndarray) -> np.ndarray:
        return frozen.query(pts)[1]

    return predictor


def make_student_predictor(student: StudentNet, inputs: dict[str, ViewInput],
                           seg: SegNet | None = None):
    """Point -> occupancy probabilities closure with feature maps cached.

    `inputs` may carry raw intensity projections (per-view ProjectionImage)
    in which case `seg` is required to build the enhanced stacks.
    """
    if inputs and isinstance(next(iter(inputs.values())), ProjectionImage):
        if seg is None:
            raise ValueError("segnet required to prepare raw projections")
        inputs = {v: prepare_view(img, seg) for v, img in inputs.items()}
    with T.no_grad():
        fmaps = {v: T.Tensor(f.data)
                 for v, f in student.encode_views(inputs).items()}

    def predictor(pts: np.ndarray) -> np.ndarray:
        with T.no_grad():
            out = student.decode_points(fmaps, inputs, pts)
        return out.probs

    return predictor
