"""Networks used for distillation and evaluation.

Models are stateless descriptions; parameters live in ordered ``dict``s of
leaf :class:`~mmdistill.tensor.Tensor` so that distillation can re-sample
them freely and differentiate with respect to them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict  # name -> Tensor, insertion ordered


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """He-uniform init for ReLU nets: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class ConvNetConfig:
    depth: int = 3
    width: int = 64
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 6
    norm: str = "groupnorm"
    groups: int = 4
    caption_dim: int = 0

    def __post_init__(self):
        c, h, w = self.input_shape
        if h % (2 ** self.depth) or w % (2 ** self.depth):
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{self.depth} (one 2x pool per block)"
            )
        if self.norm not in ("none", "groupnorm"):
            raise ValueError(f"unknown norm {self.norm!r}; expected 'none' or 'groupnorm'")
        if self.norm == "groupnorm" and self.width % self.groups:
            raise ValueError(f"width {self.width} not divisible into {self.groups} groups")


class Classifier:
    """Feature extractor followed by a linear head over ``[features, caption]``.

    Subclasses implement :meth:`_init_body` and :meth:`features`.
    With ``caption_dim == 0`` the head sees visual features only and the model
    is the plain baseline classifier.
    """

    name = "classifier"

    def __init__(self, input_shape: tuple, num_classes: int, caption_dim: int = 0):
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.caption_dim = int(caption_dim)

    @property
    def feature_dim(self) -> int:
        raise NotImplementedError

    def _init_body(self, rng: np.random.Generator) -> Params:
        raise NotImplementedError

    def features(self, params: Params, images: Tensor) -> Tensor:
        raise NotImplementedError

    def init(self, seed_or_rng, requires_grad: bool = True) -> Params:
        rng = np.random.default_rng(seed_or_rng)
        params = self._init_body(rng)
        fan_in = self.feature_dim + self.caption_dim
        params["fc.weight"] = kaiming_uniform(rng, (self.num_classes, fan_in), fan_in)
        params["fc.bias"] = np.zeros(self.num_classes)
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}

    def _check_images(self, images: Tensor) -> None:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.input_shape:
            raise T.ShapeError(
                f"{self.name}: expected images N×{'×'.join(map(str, self.input_shape))}, got {images.shape}"
            )

    def classify(self, params: Params, images, captions=None) -> Tensor:
        images = T._as_tensor(images)
        feats = self.features(params, images)
        if self.caption_dim == 0:
            if captions is not None:
                raise ValueError(f"{self.name}: caption embeddings given to a model built without a caption head")
        else:
            if captions is None:
                raise ValueError(f"{self.name}: caption head needs caption embeddings (dim {self.caption_dim})")
            captions = T._as_tensor(captions)
            if captions.shape != (images.shape[0], self.caption_dim):
                raise T.ShapeError(
                    f"{self.name}: caption embeddings {captions.shape} do not match "
                    f"({images.shape[0]}, {self.caption_dim})"
                )
            feats = T.concat(feats, captions)
        return T.linear(feats, params["fc.weight"], params["fc.bias"])

    __call__ = classify

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.init(0, requires_grad=False).values()]))


class ConvNet(Classifier):
    """``depth`` blocks of conv3x3 -> groupnorm -> relu -> avgpool2."""

    name = "convnet"

    def __init__(self, cfg: ConvNetConfig = ConvNetConfig()):
        super().__init__(cfg.input_shape, cfg.num_classes, cfg.caption_dim)
        self.cfg = cfg

    @property
    def feature_dim(self) -> int:
        _, h, w = self.input_shape
        s = 2 ** self.cfg.depth
        return self.cfg.width * (h // s) * (w // s)

    def _init_body(self, rng):
        params = {}
        cin = self.input_shape[0]
        for i in range(self.cfg.depth):
            fan_in = cin * 9
            params[f"conv{i}.weight"] = kaiming_uniform(rng, (self.cfg.width, cin, 3, 3), fan_in)
            params[f"conv{i}.bias"] = np.zeros(self.cfg.width)
            if self.cfg.norm == "groupnorm":
                params[f"norm{i}.weight"] = np.ones(self.cfg.width)
                params[f"norm{i}.bias"] = np.zeros(self.cfg.width)
            cin = self.cfg.width
        return params

    def features(self, params, images):
        images = T._as_tensor(images)
        self._check_images(images)
        h = images
        for i in range(self.cfg.depth):
            h = T.conv2d(h, params[f"conv{i}.weight"], 1, 1)
            h = T.add(h, T.reshape(params[f"conv{i}.bias"], (1, -1, 1, 1)))
            if self.cfg.norm == "groupnorm":
                h = T.group_norm(h, self.cfg.groups, params[f"norm{i}.weight"], params[f"norm{i}.bias"])
            h = T.relu(h)
            h = T.avgpool2d(h)
        return T.flatten(h)


class MLP(Classifier):
    name = "mlp"

    def __init__(self, input_shape, num_classes, caption_dim=0, hidden=(256, 256)):
        super().__init__(input_shape, num_classes, caption_dim)
        self.hidden = tuple(hidden)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def _init_body(self, rng):
        params = {}
        fan_in = int(np.prod(self.input_shape))
        for i, width in enumerate(self.hidden):
            params[f"fc{i}.weight"] = kaiming_uniform(rng, (width, fan_in), fan_in)
            params[f"fc{i}.bias"] = np.zeros(width)
            fan_in = width
        return params

    def features(self, params, images):
        images = T._as_tensor(images)
        self._check_images(images)
        h = T.flatten(images)
        for i in range(len(self.hidden)):
            h = T.relu(T.linear(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
        return h


class MiniVGG(Classifier):
    """Two VGG stacks, each (conv3x3 -> groupnorm -> relu) x2 -> avgpool2; width doubles."""

    name = "minivgg"

    def __init__(self, input_shape, num_classes, caption_dim=0, width=32, groups=4):
        super().__init__(input_shape, num_classes, caption_dim)
        _, h, w = self.input_shape
        if h % 4 or w % 4:
            raise ValueError(f"minivgg needs H, W divisible by 4, got {h}x{w}")
        self.width = width
        self.groups = groups

    def _layers(self):
        cin = self.input_shape[0]
        out = []
        for stack in range(2):
            width = self.width * 2 ** stack
            for j in range(2):
                out.append((f"s{stack}c{j}", cin, width))
                cin = width
        return out

    @property
    def feature_dim(self) -> int:
        _, h, w = self.input_shape
        return self.width * 2 * (h // 4) * (w // 4)

    def _init_body(self, rng):
        params = {}
        for name, cin, cout in self._layers():
            params[f"{name}.weight"] = kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9)
            params[f"{name}.bias"] = np.zeros(cout)
            params[f"{name}.gn_weight"] = np.ones(cout)
            params[f"{name}.gn_bias"] = np.zeros(cout)
        return params

    def features(self, params, images):
        images = T._as_tensor(images)
        self._check_images(images)
        h = images
        for k, (name, _, _) in enumerate(self._layers()):
            h = T.conv2d(h, params[f"{name}.weight"], 1, 1)
            h = T.add(h, T.reshape(params[f"{name}.bias"], (1, -1, 1, 1)))
            h = T.group_norm(h, self.groups, params[f"{name}.gn_weight"], params[f"{name}.gn_bias"])
            h = T.relu(h)
            if k % 2 == 1:
                h = T.avgpool2d(h)
        return T.flatten(h)


ARCHS = ("convnet", "mlp", "minivgg")


def make_transfer_arch(name: str, input_shape, num_classes: int, caption_dim: int = 0,
                       width: int | None = None, depth: int = 3) -> Classifier:
    """Build one of the evaluation architectures by name.

    ``width`` overrides the channel width of the convolutional archs
    (ConvNet default 64, MiniVGG default 32).
    """
    if name == "convnet":
        cfg = ConvNetConfig(depth=depth, width=width or 64, input_shape=tuple(input_shape),
                            num_classes=num_classes, caption_dim=caption_dim)
        return ConvNet(cfg)
    if name == "mlp":
        return MLP(input_shape, num_classes, caption_dim)
    if name == "minivgg":
        return MiniVGG(input_shape, num_classes, caption_dim, width=width or 32)
    raise ValueError(f"unknown architecture {name!r}; valid names: {', '.join(ARCHS)}")


class CaptionEncoder:
    """Small frozen ConvNet mapping images to caption-embedding space.

    Stands in for a pretrained vision-language captioner. Trained once by
    :func:`mmdistill.distill.calibrate_encoder`, then frozen.
    """

    def __init__(self, input_shape, caption_dim: int = 16, width: int = 32, depth: int = 2):
        self.caption_dim = caption_dim
        self.body = ConvNet(ConvNetConfig(depth=depth, width=width, input_shape=tuple(input_shape),
                                          num_classes=caption_dim))
        self.params: Params | None = None

    def init(self, seed) -> Params:
        self.params = self.body.init(seed)
        return self.params

    @property
    def frozen(self) -> bool:
        return self.params is not None and not any(p.requires_grad for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def encode(self, images, params: Params | None = None) -> Tensor:
        return self.body.classify(self.params if params is None else params, images)

    __call__ = encode
