"""Single-stage dense detector.

Small stride-16 convolutional backbone, a deformable-expand encoder
neck (DCNv2 stage, 1x1 projection to 128 channels, residual dilated
blocks), and parallel classification / box-regression heads. Also
anchor generation, uniform-matching target assignment, center-size box
coding, and score-ranked inference with NMS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .conv import conv2d, deform_conv2d
from .geometry import BBox, Detection, nms_array, pairwise_iou


@dataclass
class AnchorConfig:
    """Square anchors: one aspect ratio, several side lengths per cell."""

    stride: int = 16
    scales: tuple[float, ...] = (16.0, 32.0, 64.0, 96.0, 128.0)
    aspect_ratios: tuple[float, ...] = (1.0,)

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass
class DexEncoderConfig:
    in_channels: int = 128
    projected_channels: int = 128
    num_dilated_blocks: int = 3
    dilation_rates: tuple[int, ...] = (4, 6, 8)
    use_deformable: bool = True

    def __post_init__(self):
        if len(self.dilation_rates) != self.num_dilated_blocks:
            raise ValueError(
                f"{self.num_dilated_blocks} blocks but rates {self.dilation_rates}"
            )


@dataclass
class DetectorConfig:
    image_channels: int = 1
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    head_channels: int = 64
    num_classes: int = 1
    prior_prob: float = 0.01
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    encoder: DexEncoderConfig = field(default_factory=DexEncoderConfig)
    dtype: str = "float32"

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)


@dataclass
class DenseOutput:
    """Per-cell classification logits and box deltas."""

    cls_logits: Tensor  # (N, A*num_classes, H', W')
    box_deltas: Tensor  # (N, 4*A, H', W')


# ----------------------------------------------------------------- layers


class _ConvLayer:
    def __init__(self, name, cin, cout, k, rng, dtype, stride=1, padding=0,
                 dilation=1, bias_fill=0.0, zero_init=False):
        self.name = name
        self.stride, self.padding, self.dilation = stride, padding, dilation
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            std = math.sqrt(2.0 / (cin * k * k))
            w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(cout, bias_fill, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding,
                      self.dilation)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class _NormLayer:
    def __init__(self, name, channels, dtype):
        self.name = name
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine_channel_norm(x, self.gain, self.bias)

    def params(self):
        return [(f"{self.name}.gain", self.gain), (f"{self.name}.bias", self.bias)]


class _ConvNormRelu:
    def __init__(self, name, cin, cout, k, rng, dtype, **kw):
        self.conv = _ConvLayer(f"{name}.conv", cin, cout, k, rng, dtype, **kw)
        self.norm = _NormLayer(f"{name}.norm", cout, dtype)

    def __call__(self, x):
        return ad.relu(self.norm(self.conv(x)))

    def params(self):
        return self.conv.params() + self.norm.params()


class _DilatedBlock:
    """Residual block: 1x1 reduce, 3x3 dilated, 1x1 restore, skip add."""

    def __init__(self, name, channels, rate, rng, dtype):
        mid = channels // 2
        self.reduce = _ConvNormRelu(f"{name}.reduce", channels, mid, 1, rng, dtype)
        self.dilated = _ConvNormRelu(f"{name}.dilated", mid, mid, 3, rng, dtype,
                                     padding=rate, dilation=rate)
        self.restore = _ConvLayer(f"{name}.restore", mid, channels, 1, rng, dtype)
        self.norm = _NormLayer(f"{name}.norm", channels, dtype)

    def __call__(self, x):
        y = self.norm(self.restore(self.dilated(self.reduce(x))))
        return ad.relu(ad.add(x, y))

    def params(self):
        return (self.reduce.params() + self.dilated.params()
                + self.restore.params() + self.norm.params())


# ----------------------------------------------------------------- detector


class Detector:
    """Backbone -> encoder neck -> classification / regression heads."""

    def __init__(self, config: DetectorConfig, rng: np.random.Generator):
        self.config = config
        dtype = np.float32 if config.dtype == "float32" else np.float64
        self.np_dtype = dtype
        enc = config.encoder

        self.backbone = []
        cin = config.image_channels
        for i, cout in enumerate(config.backbone_channels):
            self.backbone.append(
                _ConvNormRelu(f"backbone.{i}", cin, cout, 3, rng, dtype,
                              stride=2, padding=1)
            )
            cin = cout
        if cin != enc.in_channels:
            raise ValueError(
                f"backbone output channels {cin} != encoder in_channels {enc.in_channels}"
            )

        c = enc.in_channels
        self.main_conv = _ConvLayer("encoder.main", c, c, 3, rng, dtype, padding=1)
        self.main_norm = _NormLayer("encoder.main_norm", c, dtype)
        if enc.use_deformable:
            # 3K channels: 2K offsets + K modulation logits, zero-initialized
            self.offset_conv = _ConvLayer("encoder.offset", c, 27, 3, rng, dtype,
                                          padding=1, zero_init=True)
        else:
            self.offset_conv = None
        p = enc.projected_channels
        self.project = _ConvNormRelu("encoder.project", c, p, 1, rng, dtype)
        self.blocks = [
            _DilatedBlock(f"encoder.block{i}", p, r, rng, dtype)
            for i, r in enumerate(enc.dilation_rates)
        ]

        a = config.anchors.num_anchors
        hc = config.head_channels
        prior_bias = -math.log((1.0 - config.prior_prob) / config.prior_prob)
        self.cls_tower = _ConvNormRelu("head.cls_tower", p, hc, 3, rng, dtype, padding=1)
        self.cls_out = _ConvLayer("head.cls_out", hc, a * config.num_classes, 1,
                                  rng, dtype, bias_fill=prior_bias)
        self.reg_tower = _ConvNormRelu("head.reg_tower", p, hc, 3, rng, dtype, padding=1)
        self.reg_out = _ConvLayer("head.reg_out", hc, 4 * a, 1, rng, dtype)

        self._modules = (
            self.backbone
            + [self.main_conv, self.main_norm]
            + ([self.offset_conv] if self.offset_conv else [])
            + [self.project]
            + self.blocks
            + [self.cls_tower, self.cls_out, self.reg_tower, self.reg_out]
        )

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for m in self._modules:
            out.extend(m.params())
        return out

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self):
        for _, t in self.parameters():
            t.grad = None

    def forward(self, image: Tensor) -> DenseOutput:
        stride = self.config.stride
        if image.ndim != 4 or image.shape[1] != self.config.image_channels:
            raise ShapeError(f"expected (N, {self.config.image_channels}, H, W), got {image.shape}")
        if image.shape[2] % stride or image.shape[3] % stride:
            raise ShapeError(
                f"input {image.shape[2]}x{image.shape[3]} not divisible by stride {stride}"
            )
        x = image
        for blk in self.backbone:
            x = blk(x)
        if self.offset_conv is not None:
            raw = self.offset_conv(x)
            offsets = ad.narrow(raw, 1, 0, 18)
            modulation = ad.sigmoid(ad.narrow(raw, 1, 18, 9))
            x = deform_conv2d(x, self.main_conv.weight, self.main_conv.bias,
                              offsets, modulation, padding=1)
        else:
            x = self.main_conv(x)
        x = ad.relu(self.main_norm(x))
        x = self.project(x)
        for blk in self.blocks:
            x = blk(x)
        cls_logits = self.cls_out(self.cls_tower(x))
        box_deltas = self.reg_out(self.reg_tower(x))
        return DenseOutput(cls_logits, box_deltas)

    # --------------------------------------------------------- state I/O

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, t.data) for name, t in self.parameters()]

    def load_state_arrays(self, named: list[tuple[str, np.ndarray]]):
        params = self.parameters()
        if len(named) != len(params):
            raise ValueError(f"expected {len(params)} parameters, got {len(named)}")
        for (name, arr), (pname, t) in zip(named, params):
            if name != pname or tuple(arr.shape) != t.shape:
                raise ValueError(f"parameter mismatch: {name}{arr.shape} vs {pname}{t.shape}")
            t.data = arr.astype(self.np_dtype)

    def clone(self) -> "Detector":
        other = Detector(self.config, np.random.default_rng(0))
        other.load_state_arrays([(n, a.copy()) for n, a in self.state_arrays()])
        return other

    def save(self, path, extra_meta: dict | None = None):
        meta = {"model_config": _config_to_dict(self.config)}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "Detector":
        named, meta = load_checkpoint(path)
        config = _config_from_dict(meta["model_config"])
        model = cls(config, np.random.default_rng(0))
        model.load_state_arrays(named)
        return model

    # -------------------------------------------------------- inference

    def infer_batch(self, images: Tensor, top_k: int = 300,
                    nms_iou: float = 0.6) -> list[list[Detection]]:
        """Decode, rank, suppress and clip detections for each image."""
        with ad.no_grad():
            out = self.forward(images)
        n = images.shape[0]
        h_img, w_img = images.shape[2], images.shape[3]
        fh, fw = out.cls_logits.shape[2], out.cls_logits.shape[3]
        anchors = anchor_array(fh, fw, self.config.anchors)
        scores_all = _sigmoid_np(flatten_cls(out.cls_logits).data)
        deltas_all = flatten_deltas(out.box_deltas, self.config.anchors.num_anchors).data
        results = []
        for i in range(n):
            scores = scores_all[i]
            order = np.argsort(-scores, kind="stable")[:top_k]
            boxes = decode_boxes(anchors[order], deltas_all[i][order])
            keep = nms_array(boxes, scores[order], nms_iou)
            results.append(
                [
                    Detection(
                        BBox(*map(float, boxes[j])).clipped(w_img, h_img),
                        float(min(max(scores[order[j]], 0.0), 1.0)),
                    )
                    for j in keep
                ]
            )
        return results

    def infer(self, image: Tensor, top_k: int = 300, nms_iou: float = 0.6) -> list[Detection]:
        img = image if image.ndim == 4 else ad.reshape(image, (1,) + image.shape)
        return self.infer_batch(img, top_k=top_k, nms_iou=nms_iou)[0]


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def flatten_cls(cls_logits: Tensor) -> Tensor:
    """(N, A, H, W) -> (N, H*W*A) matching anchor order."""
    n, a, h, w = cls_logits.shape
    return ad.reshape(ad.transpose(cls_logits, (0, 2, 3, 1)), (n, h * w * a))


def flatten_deltas(box_deltas: Tensor, num_anchors: int) -> Tensor:
    """(N, 4A, H, W) -> (N, H*W*A, 4); channels are anchor-major (dx,dy,dw,dh)."""
    n, c, h, w = box_deltas.shape
    if c != 4 * num_anchors:
        raise ShapeError(f"delta channels {c} != 4*{num_anchors}")
    t = ad.transpose(box_deltas, (0, 2, 3, 1))
    return ad.reshape(t, (n, h * w * num_anchors, 4))


# ------------------------------------------------------------------ anchors


def anchor_array(feature_h: int, feature_w: int, cfg: AnchorConfig) -> np.ndarray:
    """All anchors as an (H*W*A, 4) array, cells row-major, scales within."""
    if feature_h < 1 or feature_w < 1:
        raise ValueError(f"bad feature map {feature_h}x{feature_w}")
    sides = np.array(
        [s * math.sqrt(r) for s in cfg.scales for r in cfg.aspect_ratios],
        dtype=np.float64,
    )
    heights = np.array(
        [s / math.sqrt(r) for s in cfg.scales for r in cfg.aspect_ratios],
        dtype=np.float64,
    )
    cy = (np.arange(feature_h) + 0.5) * cfg.stride
    cx = (np.arange(feature_w) + 0.5) * cfg.stride
    cxg, cyg = np.meshgrid(cx, cy)
    centers = np.stack([cxg.ravel(), cyg.ravel()], axis=1)  # row-major cells
    out = np.empty((feature_h * feature_w, len(sides), 4), dtype=np.float64)
    out[:, :, 0] = centers[:, None, 0] - sides[None, :] / 2
    out[:, :, 1] = centers[:, None, 1] - heights[None, :] / 2
    out[:, :, 2] = centers[:, None, 0] + sides[None, :] / 2
    out[:, :, 3] = centers[:, None, 1] + heights[None, :] / 2
    return out.reshape(-1, 4)


def generate_anchors(feature_h: int, feature_w: int, cfg: AnchorConfig) -> list[BBox]:
    return [BBox(*map(float, row)) for row in anchor_array(feature_h, feature_w, cfg)]


# --------------------------------------------------------------- assignment

IGNORE = -2
NEGATIVE = -1


@dataclass
class Assignment:
    """Per-anchor labels: IGNORE, NEGATIVE, or a ground-truth index."""

    labels: np.ndarray  # (M,) int32
    gt_boxes: np.ndarray  # (T, 4)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.nonzero(self.labels >= 0)[0]

    @property
    def num_positive(self) -> int:
        return int((self.labels >= 0).sum())


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    pred_boxes: np.ndarray | None = None,
    k: int = 4,
    min_pos_iou: float = 0.15,
    ignore_iou: float = 0.7,
) -> Assignment:
    """Uniform matching: k nearest anchors per ground truth become
    positive candidates, demoted to negative below ``min_pos_iou``
    anchor-GT IoU; non-selected anchors whose predicted box overlaps any
    GT at ``ignore_iou`` or more are ignored.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    m = anchors.shape[0]
    labels = np.full(m, NEGATIVE, dtype=np.int32)
    if gt.shape[0] == 0:
        return Assignment(labels, gt)

    a_ctr = 0.5 * (anchors[:, :2] + anchors[:, 2:])
    g_ctr = 0.5 * (gt[:, :2] + gt[:, 2:])
    diff = g_ctr[:, None, :] - a_ctr[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))  # (G, M)

    # resolve anchors claimed by several GTs: closest GT wins, ties by index
    claimed: dict[int, tuple[float, int]] = {}
    for gi in range(gt.shape[0]):
        cand = np.argsort(dist[gi], kind="stable")[:k]
        for ai in cand:
            d = dist[gi, ai]
            prev = claimed.get(int(ai))
            if prev is None or d < prev[0]:
                claimed[int(ai)] = (d, gi)

    iou_mat = pairwise_iou(anchors, gt)
    for ai, (_, gi) in claimed.items():
        if iou_mat[ai, gi] >= min_pos_iou:
            labels[ai] = gi

    if pred_boxes is not None:
        pred_iou = pairwise_iou(np.asarray(pred_boxes, dtype=np.float64), gt)
        high = pred_iou.max(axis=1) >= ignore_iou
        labels[high & (labels == NEGATIVE)] = IGNORE
    return Assignment(labels, gt)


# --------------------------------------------------------------- box coding

DELTA_CLAMP = math.log(8.0)


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Center-size deltas (dx, dy, dw, dh) from anchors to targets."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)],
        axis=1,
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; dw/dh clamped to +-ln(8)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode(anchor: BBox, target: BBox) -> tuple[float, float, float, float]:
    row = encode_boxes(np.array([anchor.as_tuple()]), np.array([target.as_tuple()]))[0]
    return tuple(map(float, row))


def decode(anchor: BBox, delta) -> BBox:
    row = decode_boxes(np.array([anchor.as_tuple()]), np.asarray(delta, dtype=np.float64))[0]
    return BBox(*map(float, row))


# ------------------------------------------------------------------ config


def _config_to_dict(cfg: DetectorConfig) -> dict:
    return {
        "image_channels": cfg.image_channels,
        "backbone_channels": list(cfg.backbone_channels),
        "head_channels": cfg.head_channels,
        "num_classes": cfg.num_classes,
        "prior_prob": cfg.prior_prob,
        "dtype": cfg.dtype,
        "anchors": {
            "stride": cfg.anchors.stride,
            "scales": list(cfg.anchors.scales),
            "aspect_ratios": list(cfg.anchors.aspect_ratios),
        },
        "encoder": {
            "in_channels": cfg.encoder.in_channels,
            "projected_channels": cfg.encoder.projected_channels,
            "num_dilated_blocks": cfg.encoder.num_dilated_blocks,
            "dilation_rates": list(cfg.encoder.dilation_rates),
            "use_deformable": cfg.encoder.use_deformable,
        },
    }


def _config_from_dict(d: dict) -> DetectorConfig:
    return DetectorConfig(
        image_channels=d["image_channels"],
        backbone_channels=tuple(d["backbone_channels"]),
        head_channels=d["head_channels"],
        num_classes=d["num_classes"],
        prior_prob=d["prior_prob"],
        dtype=d["dtype"],
        anchors=AnchorConfig(
            stride=d["anchors"]["stride"],
            scales=tuple(d["anchors"]["scales"]),
            aspect_ratios=tuple(d["anchors"]["aspect_ratios"]),
        ),
        encoder=DexEncoderConfig(
            in_channels=d["encoder"]["in_channels"],
            projected_channels=d["encoder"]["projected_channels"],
            num_dilated_blocks=d["encoder"]["num_dilated_blocks"],
            dilation_rates=tuple(d["encoder"]["dilation_rates"]),
            use_deformable=d["encoder"]["use_deformable"],
        ),
    )
