"""Synthetic-set distillation: matching objectives and the outer loop.

Six methods share one loop and differ only in the per-iteration objective:

=========== ================================================================
dc          lambda1 * gradient matching on full images
dm          distribution matching (all-pairs feature distance) on full images
cap_cat     gradient matching through a classifier whose head also sees
            caption embeddings
cap_match   lambda1 * gradient matching + lambda2 * caption matching
masked_dc   gradient matching on full images + on foreground-masked images
masked_dm   lambda1 * gradient matching (full) + lambda2 * masked DM
=========== ================================================================
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .dataio import Batch, Dataset, Split, sample_class_batch, take
from .models import CaptionEncoder, Classifier, ConvNet, ConvNetConfig, Params
from .tensor import SGD, Tensor

log = logging.getLogger(__name__)

METHODS = ("dc", "dm", "cap_cat", "cap_match", "masked_dc", "masked_dm")
DISTANCES = ("channel_cosine", "l2sq")
# relative norm below which a gradient row counts as dead for channel_cosine
DEAD_ROW_RTOL = 1e-10


class DistillError(RuntimeError):
    pass


@dataclass
class DistillConfig:
    method: str = "dc"
    ipc: int = 1
    iterations: int = 1000
    batch_real: int = 64
    lambda1: float = 1.0
    lambda2: float = 0.1
    grad_distance: str = "channel_cosine"
    masked_distance: str = "l2sq"
    masked_full_term: bool = True
    image_lr: float = 0.1
    image_momentum: float = 0.5
    net_refresh_every: int = 50
    inner_steps: int = 1
    net_lr: float = 0.01
    net_momentum: float = 0.5
    net_width: int = 64
    net_depth: int = 3
    encoder_steps: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        for key in ("grad_distance", "masked_distance"):
            if getattr(self, key) not in DISTANCES:
                raise ValueError(f"{key} must be one of {DISTANCES}, got {getattr(self, key)!r}")
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValueError("lambda1 and lambda2 must be non-negative and not both zero")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.ipc < 1 or self.batch_real < 1:
            raise ValueError("ipc and batch_real must be positive")
        if self.net_refresh_every < 1 or self.inner_steps < 0:
            raise ValueError("net_refresh_every must be >= 1 and inner_steps >= 0")


@dataclass
class SyntheticSet:
    images: np.ndarray     # (C*ipc)×Cch×H×W, class-major
    labels: np.ndarray
    masks: np.ndarray      # inherited from the source real image, never optimised
    captions: np.ndarray   # class-mean real caption embedding, never optimised
    ipc: int
    source_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return len(self.labels) // self.ipc

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)


def init_synthetic(dataset: Dataset, ipc: int, rng: np.random.Generator) -> SyntheticSet:
    """Copy ``ipc`` randomly chosen real train images per class."""
    train = dataset.train
    chosen = []
    for c in range(dataset.num_classes):
        idx = train.class_indices(c)
        if ipc > len(idx):
            raise ValueError(f"ipc={ipc} exceeds the {len(idx)} train samples of class {c}")
        chosen.append(idx[rng.permutation(len(idx))[:ipc]])
    src = np.concatenate(chosen)
    means = dataset.class_mean_captions("train")
    labels = np.repeat(np.arange(dataset.num_classes), ipc)
    return SyntheticSet(
        images=np.array(train.images[src], dtype=np.float64),
        labels=labels,
        masks=np.array(train.masks[src], dtype=np.uint8),
        captions=means[labels].copy(),
        ipc=ipc,
        source_indices=src,
    )


# ---------------------------------------------------------------------------
# distances and losses
# ---------------------------------------------------------------------------

def grad_distance(ga: dict, gb: dict, mode: str = "channel_cosine") -> Tensor:
    """Distance between two parameter-gradient maps.

    ``l2sq``: sum over parameters of the squared L2 norm of the difference.
    ``channel_cosine``: sum over parameters of sum over output-channel rows of
    ``1 - cos``; dead rows contribute 0. 1-D parameters (biases, norm
    affines) are compared as one row.

    A row is dead when its norm is at most ``DEAD_ROW_RTOL`` times the largest
    gradient entry on its side. Without this, a bias feeding a per-channel
    normalisation (zero gradient up to rounding) would add the cosine of two
    rounding-noise vectors.
    """
    if set(ga) != set(gb):
        raise KeyError(f"gradient maps have different keys: {sorted(set(ga) ^ set(gb))}")
    if mode not in DISTANCES:
        raise ValueError(f"unknown distance {mode!r}; expected one of {DISTANCES}")
    if mode == "channel_cosine":
        tol_a, tol_b = (DEAD_ROW_RTOL * max((float(np.abs(T._as_tensor(t).data).max(initial=0.0))
                                             for t in g.values()), default=0.0)
                        for g in (ga, gb))
    total = None
    for name in ga:
        a, b = T._as_tensor(ga[name]), T._as_tensor(gb[name])
        if a.shape != b.shape:
            raise T.ShapeError(f"grad_distance: {name!r} shapes {a.shape} and {b.shape} differ")
        if mode == "l2sq":
            d = T.sub(a, b)
            term = T.sum(T.mul(d, d))
        else:
            rows = (a.shape[0], -1) if a.ndim > 1 else (1, -1)
            term = T.row_cosine_distance(T.reshape(a, rows), T.reshape(b, rows), tol_a, tol_b)
        total = term if total is None else T.add(total, term)
    return total


def _apply_mask(images: Tensor | np.ndarray, masks: np.ndarray) -> Tensor:
    return T.mask_mul(images, masks.astype(np.float64))


def param_grads(net: Classifier, params: Params, images, labels, captions=None,
                create_graph: bool = False) -> dict:
    # the forward graph is needed even when the caller is in no_grad mode
    with T.enable_grad():
        logits = net.classify(params, images, captions)
        loss = T.softmax_cross_entropy(logits, labels)
    return T.backward(loss, params, create_graph=create_graph)


def _captions_for(net: Classifier, captions):
    return captions if net.caption_dim > 0 else None


def dc_loss(net: Classifier, params: Params, syn_images: list, real: list, *,
            syn_masks: list | None = None, syn_captions: list | None = None,
            masked: bool = False, distance: str = "channel_cosine",
            masked_distance: str = "l2sq", full_term: bool = True) -> Tensor:
    """Gradient-matching loss summed over classes.

    ``syn_images[c]`` is a (ipc×C×H×W) tensor of class ``c``; ``real[c]`` a
    :class:`Batch` of that class. With ``masked`` the foreground-masked pair
    is matched under ``masked_distance``; ``full_term`` keeps the full-image
    term alongside it.
    """
    if masked and syn_masks is None:
        raise ValueError("masked gradient matching needs synthetic masks")
    # full and masked sums are accumulated separately so that all-ones masks
    # give exactly twice the unmasked loss
    full = part = None
    for c, (syn, batch) in enumerate(zip(syn_images, real)):
        syn_labels = np.full(syn.shape[0], c)
        real_cap = _captions_for(net, batch.captions)
        syn_cap = _captions_for(net, None if syn_captions is None else syn_captions[c])
        if full_term or not masked:
            g_real = param_grads(net, params, batch.images, batch.labels, real_cap)
            g_syn = param_grads(net, params, syn, syn_labels, syn_cap, create_graph=True)
            term = grad_distance(g_real, g_syn, distance)
            full = term if full is None else T.add(full, term)
        if masked:
            g_real = param_grads(net, params, _apply_mask(batch.images, batch.masks), batch.labels, real_cap)
            g_syn = param_grads(net, params, _apply_mask(syn, syn_masks[c]), syn_labels, syn_cap,
                                create_graph=True)
            term = grad_distance(g_real, g_syn, masked_distance)
            part = term if part is None else T.add(part, term)
    if full is None or part is None:
        return part if full is None else full
    return T.add(full, part)


def dm_loss(net: Classifier, params: Params, syn_images: list, real: list, *,
            syn_masks: list | None = None, masked: bool = False) -> Tensor:
    """Per class: (1/N_B) * sum_i sum_j ||f(real_i) - f(syn_j)||^2, summed over classes."""
    if masked and syn_masks is None:
        raise ValueError("masked distribution matching needs synthetic masks")
    total = None
    for c, (syn, batch) in enumerate(zip(syn_images, real)):
        real_in = batch.images
        syn_in = syn
        if masked:
            real_in = _apply_mask(batch.images, batch.masks)
            syn_in = _apply_mask(syn, syn_masks[c])
        with T.no_grad():
            f_real = net.features(params, real_in)
        f_syn = net.features(params, syn_in)
        term = T.div_scalar(T.pair_sqdist_sum(f_real.data, f_syn), len(batch.labels))
        total = term if total is None else T.add(total, term)
    return total


def caption_match_loss(encoder: CaptionEncoder, syn_images: list, real_captions: list) -> Tensor:
    """Per class: ||mean(encoder(syn_c)) - mean(real_captions_c)||^2, summed over classes."""
    if not encoder.frozen:
        raise DistillError("caption encoder must be frozen (requires_grad=False) during distillation")
    total = None
    for syn, caps in zip(syn_images, real_captions):
        caps = np.asarray(caps, dtype=np.float64)
        if caps.ndim != 2 or caps.shape[1] != encoder.caption_dim:
            raise T.ShapeError(
                f"caption_match_loss: real embeddings {caps.shape} do not match encoder dim {encoder.caption_dim}"
            )
        emb = T.mean(encoder(syn), axis=0)
        d = T.sub(emb, caps.mean(axis=0))
        term = T.sum(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class MatchContext:
    """Everything a method objective needs besides the synthetic pixels and real batches."""
    cfg: DistillConfig
    net: Classifier
    params: Params
    syn_masks: list
    syn_captions: list
    encoder: CaptionEncoder | None = None


def method_loss(ctx: MatchContext, syn_images: list, real: list) -> Tensor:
    cfg = ctx.cfg
    common = dict(syn_masks=ctx.syn_masks, syn_captions=ctx.syn_captions,
                  distance=cfg.grad_distance, masked_distance=cfg.masked_distance)
    m = cfg.method
    if m in ("dc", "cap_cat"):
        return T.mul(cfg.lambda1, dc_loss(ctx.net, ctx.params, syn_images, real, **common))
    if m == "dm":
        return dm_loss(ctx.net, ctx.params, syn_images, real)
    if m == "cap_match":
        if ctx.encoder is None:
            raise DistillError("cap_match needs a calibrated caption encoder")
        grad_term = T.mul(cfg.lambda1, dc_loss(ctx.net, ctx.params, syn_images, real, **common))
        cap_term = caption_match_loss(ctx.encoder, syn_images, [b.captions for b in real])
        return T.add(grad_term, T.mul(cfg.lambda2, cap_term))
    if m == "masked_dc":
        return dc_loss(ctx.net, ctx.params, syn_images, real, masked=True,
                       full_term=cfg.masked_full_term, **common)
    if m == "masked_dm":
        grad_term = T.mul(cfg.lambda1, dc_loss(ctx.net, ctx.params, syn_images, real, **common))
        dm_term = dm_loss(ctx.net, ctx.params, syn_images, real, syn_masks=ctx.syn_masks, masked=True)
        return T.add(grad_term, T.mul(cfg.lambda2, dm_term))
    raise ValueError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")


# ---------------------------------------------------------------------------
# caption encoder calibration
# ---------------------------------------------------------------------------

@dataclass
class Calibration:
    initial_mse: float
    final_mse: float
    max_class_mean_cosine: float
    steps: int


def calibrate_encoder(dataset: Dataset, seed: int = 0, steps: int = 500, batch_size: int = 64,
                      lr: float = 0.01, momentum: float = 0.9, width: int = 32) -> CaptionEncoder:
    """Fit the surrogate caption encoder to regress caption embeddings, then freeze it.

    The fitted encoder carries a :class:`Calibration` record in ``.calibration``.
    """
    train = dataset.train
    enc = CaptionEncoder(dataset.image_shape, dataset.caption_dim, width=width)
    params = enc.init(np.random.default_rng([seed, 1]))
    # a zero head starts every embedding at the origin; a random head starts far
    # off the unit-norm targets and the first steps spend themselves undoing it
    params["fc.weight"].data[:] = 0.0
    params["fc.bias"].data[:] = 0.0
    rng = np.random.default_rng([seed, 2])
    opt = SGD(params, lr=lr, momentum=momentum)
    probe = np.sort(rng.permutation(len(train))[:512])

    def probe_mse():
        with T.no_grad():
            pred = enc(train.images[probe]).data
        return float(np.mean((pred - train.captions[probe]) ** 2))

    initial = probe_mse()
    for step in range(steps):
        idx = rng.permutation(len(train))[:batch_size]
        d = T.sub(enc(train.images[idx]), train.captions[idx])
        loss = T.mean(T.mul(d, d))
        if not np.isfinite(loss.item()):
            raise DistillError(f"caption encoder calibration diverged at step {step}")
        opt.step(T.backward(loss, params))
    final = probe_mse()
    enc.freeze()

    with T.no_grad():
        emb = np.concatenate([enc(train.images[i:i + 256]).data for i in range(0, len(train), 256)])
    means = np.stack([emb[train.labels == c].mean(0) for c in range(dataset.num_classes)])
    unit = means / np.linalg.norm(means, axis=1, keepdims=True)
    sim = unit @ unit.T
    off = sim[~np.eye(len(sim), dtype=bool)]
    enc.calibration = Calibration(initial, final, float(off.max()) if off.size else 0.0, steps)
    log.info("encoder calibrated: mse %.4f -> %.4f, max class-mean cosine %.3f",
             initial, final, enc.calibration.max_class_mean_cosine)
    return enc


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass
class DistillResult:
    synthetic: SyntheticSet
    trace: list
    config: DistillConfig


def make_distill_net(dataset: Dataset, cfg: DistillConfig) -> ConvNet:
    caption_dim = dataset.caption_dim if cfg.method == "cap_cat" else 0
    return ConvNet(ConvNetConfig(depth=cfg.net_depth, width=cfg.net_width,
                                 input_shape=tuple(dataset.image_shape),
                                 num_classes=dataset.num_classes, caption_dim=caption_dim))


def distill(dataset: Dataset, cfg: DistillConfig, encoder: CaptionEncoder | None = None,
            callback=None) -> DistillResult:
    """Optimise a synthetic set for ``cfg.iterations`` outer steps.

    Every ``net_refresh_every`` iterations the matching ConvNet is re-drawn;
    between outer updates it is trained ``inner_steps`` SGD steps on the
    current synthetic set. Pixels are clamped to [0, 1] after every update.
    """
    cfg.validate()
    train = dataset.train
    if cfg.method.startswith("masked") and (train.masks is None or train.masks.size == 0):
        raise DistillError(f"method {cfg.method} needs foreground masks but the dataset has none")
    if cfg.method == "cap_match" and encoder is None:
        encoder = calibrate_encoder(dataset, seed=cfg.seed, steps=cfg.encoder_steps)

    init_ss, batch_ss, net_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    syn = init_synthetic(dataset, cfg.ipc, np.random.default_rng(init_ss))
    batch_rng = np.random.default_rng(batch_ss)
    net_rng = np.random.default_rng(net_ss)
    net = make_distill_net(dataset, cfg)
    C = dataset.num_classes
    syn_masks = [syn.masks[syn.class_slice(c)] for c in range(C)]
    syn_caps = [syn.captions[syn.class_slice(c)] for c in range(C)]
    velocity = np.zeros_like(syn.images)
    trace = []
    params = None
    net_opt = None

    for it in range(cfg.iterations):
        if it % cfg.net_refresh_every == 0:
            params = net.init(net_rng)
            net_opt = SGD(params, lr=cfg.net_lr, momentum=cfg.net_momentum)
        leaves = [Tensor(syn.images[syn.class_slice(c)], requires_grad=True) for c in range(C)]
        real = [sample_class_batch(train, c, cfg.batch_real, batch_rng) for c in range(C)]
        ctx = MatchContext(cfg, net, params, syn_masks, syn_caps, encoder)
        loss = method_loss(ctx, leaves, real)
        value = loss.item()
        if not np.isfinite(value):
            raise DistillError(f"non-finite {cfg.method} loss at iteration {it}")
        grads = T.backward(loss, leaves)
        g = np.concatenate([gr.data for gr in grads])
        if not np.all(np.isfinite(g)):
            raise DistillError(f"non-finite pixel gradient for {cfg.method} at iteration {it}")
        velocity *= cfg.image_momentum
        velocity += g
        syn.images = np.clip(syn.images - cfg.image_lr * velocity, 0.0, 1.0)
        trace.append(value)

        for _ in range(cfg.inner_steps):
            caps = syn.captions if net.caption_dim else None
            net_opt.step(param_grads(net, params, syn.images, syn.labels, caps))
        if callback is not None:
            callback(it, value, syn)
    return DistillResult(syn, trace, cfg)


def synthetic_to_container(result: DistillResult) -> tuple[dict, dict]:
    """Tensors and header for writing a distilled set with :func:`mmdistill.dataio.write_container`."""
    syn = result.synthetic
    tensors = {
        "synthetic/images": syn.images,
        "synthetic/labels": syn.labels.astype(np.uint8),
        "synthetic/masks": syn.masks.astype(np.uint8),
        "synthetic/captions": syn.captions,
        "trace/loss": np.asarray(result.trace, dtype=np.float64),
    }
    header = {
        "name": "distilled",
        "classes": syn.num_classes,
        "splits": {"synthetic": len(syn.labels)},
        "shape": list(syn.images.shape[1:]),
        "caption_dim": int(syn.captions.shape[1]),
        "seed": result.config.seed,
        "ipc": syn.ipc,
        "config": asdict(result.config),
    }
    return tensors, header


def synthetic_from_container(manifest: dict, arrays: dict) -> tuple[SyntheticSet, list]:
    ipc = int(manifest.get("ipc", 1))
    syn = SyntheticSet(arrays["synthetic/images"].copy(), arrays["synthetic/labels"].astype(np.int64),
                       arrays["synthetic/masks"].copy(), arrays["synthetic/captions"].copy(), ipc)
    return syn, list(arrays.get("trace/loss", np.zeros(0)))
