"""Morphology-aware semantic grouping.

Trains a small encoder-decoder segmentation network on (image patch,
proposal) pairs. Two mechanisms sit on top of the pixel cross-entropy:
a variation loss that pulls interior-pixel embeddings toward the mean
border embedding (the anchor, treated as constant), and an omission
refinement that relabels background pixels whose mean cosine similarity to
the border or interior set clears a threshold, yielding the refined
proposal the cross-entropy actually targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import (
    BACKGROUND,
    BORDER,
    INTERIOR,
    Image,
    LabelMap,
    Patch,
    proposal_map,
    slice_patches,
)
from .nn_core import (
    CHECK_DTYPE,
    FAST_DTYPE,
    AvgPool2,
    BilinearUp2,
    ChannelStandardize,
    Conv1x1,
    Conv3x3,
    ReLU,
    SgdConfig,
    load_checkpoint,
    poly_decay_lr,
    save_checkpoint,
    sgd_step,
    softmax_channels,
    softmax_vjp,
)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelWidths:
    """Channel widths of the encoder-decoder trunk."""

    c1: int = 24
    c2: int = 48
    c3: int = 64
    c4: int = 64
    d1: int = 48
    d2: int = 48


@dataclass(frozen=True)
class MsgConfig:
    """Knobs for semantic-grouping training."""

    beta: float = 0.7
    lambda_v: float = 1.0
    epochs: int = 20
    lr0: float = 5e-3
    power: float = 0.9
    batch: int = 16
    patch: int = 128
    stride: int = 128
    refine_every: int = 1
    embed_dim: int = 64
    seed: int = 0
    precision: str = "fast"
    symmetric_anchor: bool = False
    widths: ModelWidths = field(default_factory=ModelWidths)

    def __post_init__(self):
        if self.beta < -1:
            raise ValueError(f"beta must be >= -1, got {self.beta}")
        if self.lambda_v < 0:
            raise ValueError(f"lambda_v must be >= 0, got {self.lambda_v}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.patch < 4 or self.patch % 4:
            raise ValueError(f"patch must be a positive multiple of 4, got {self.patch}")
        if not 1 <= self.stride <= self.patch:
            raise ValueError(f"stride must be in [1, patch], got {self.stride}")
        if self.refine_every < 1:
            raise ValueError(f"refine_every must be >= 1, got {self.refine_every}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.precision not in ("fast", "check"):
            raise ValueError(f"precision must be 'fast' or 'check', got {self.precision!r}")

    @property
    def dtype(self):
        return CHECK_DTYPE if self.precision == "check" else FAST_DTYPE


class SegmentationModel:
    """Conv encoder-decoder to per-pixel embeddings plus a 3-class head.

    Two average-pool downsamples, two bilinear upsamples back to input
    resolution, a pointwise embedding layer standardized per channel (so
    pixel cosines measure correlation rather than a shared offset), and a
    pointwise classifier whose softmax gives the class probabilities.
    Spatial dims must be multiples of 4.
    """

    def __init__(self, embed_dim: int, rng: np.random.Generator,
                 widths: ModelWidths = ModelWidths(), dtype=FAST_DTYPE):
        self.embed_dim = embed_dim
        self.widths = widths
        w = widths
        self.conv1 = Conv3x3(3, w.c1, rng, dtype)
        self.conv2 = Conv3x3(w.c1, w.c2, rng, dtype)
        self.conv3 = Conv3x3(w.c2, w.c3, rng, dtype)
        self.conv4 = Conv3x3(w.c3, w.c4, rng, dtype)
        self.dconv1 = Conv3x3(w.c4, w.d1, rng, dtype)
        self.dconv2 = Conv3x3(w.d1, w.d2, rng, dtype)
        self.embed = Conv1x1(w.d2, embed_dim, rng, dtype)
        self.cls = Conv1x1(embed_dim, 3, rng, dtype)
        self._trunk = [self.conv1, ChannelStandardize(), ReLU(), AvgPool2(),
                       self.conv2, ChannelStandardize(), ReLU(),
                       self.conv3, ChannelStandardize(), ReLU(), AvgPool2(),
                       self.conv4, ChannelStandardize(), ReLU(),
                       self.dconv1, ChannelStandardize(), ReLU(), BilinearUp2(),
                       self.dconv2, ChannelStandardize(), ReLU(), BilinearUp2(),
                       self.embed, ChannelStandardize()]
        self._probs = None

    def forward(self, x: np.ndarray, train: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Return (embeddings D_emb x H x W, class probabilities 3 x H x W)."""
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ValueError(f"spatial dims must be multiples of 4, got {x.shape[1:]}")
        y = x.astype(self.conv1.w.dtype, copy=False)
        for layer in self._trunk:
            y = layer.forward(y, train=train)
        probs = softmax_channels(self.cls.forward(y, train=train))
        if train:
            self._probs = probs
        return y, probs

    def backward(self, g_emb: np.ndarray, g_probs: np.ndarray) -> None:
        """Accumulate parameter gradients from embedding- and probability-space grads."""
        g = self.cls.backward(softmax_vjp(self._probs, g_probs))
        g = g + g_emb
        for layer in reversed(self._trunk):
            g = layer.backward(g)

    def _layers(self):
        return [("conv1", self.conv1), ("conv2", self.conv2), ("conv3", self.conv3),
                ("conv4", self.conv4), ("dconv1", self.dconv1), ("dconv2", self.dconv2),
                ("embed", self.embed), ("cls", self.cls)]

    def params(self) -> list[np.ndarray]:
        return [p for _, layer in self._layers() for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for _, layer in self._layers() for g in layer.grads()]

    def zero_grads(self) -> None:
        for g in self.grads():
            g[...] = 0

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"{name}.{attr}": getattr(layer, attr)
                for name, layer in self._layers() for attr in ("w", "b")}


def save_model(path: str, model: SegmentationModel) -> None:
    """Write the model parameters to a checkpoint file."""
    save_checkpoint(path, model.tensors())


def load_model(path: str, dtype=FAST_DTYPE) -> SegmentationModel:
    """Rebuild a model from a checkpoint, widths inferred from tensor shapes."""
    t = load_checkpoint(path)
    widths = ModelWidths(c1=t["conv1.w"].shape[0], c2=t["conv2.w"].shape[0],
                         c3=t["conv3.w"].shape[0], c4=t["conv4.w"].shape[0],
                         d1=t["dconv1.w"].shape[0], d2=t["dconv2.w"].shape[0])
    model = SegmentationModel(t["embed.w"].shape[0], np.random.default_rng(0),
                              widths, dtype)
    for name, layer in model._layers():
        for attr in ("w", "b"):
            stored = t[f"{name}.{attr}"]
            current = getattr(layer, attr)
            if stored.shape != current.shape:
                raise ValueError(f"checkpoint tensor {name}.{attr} has shape "
                                 f"{stored.shape}, expected {current.shape}")
            setattr(layer, attr, stored.astype(dtype))
    return model


@dataclass(frozen=True)
class EmbeddingSets:
    """Pixel embeddings split by proposal class, indexed row-major."""

    vectors: np.ndarray
    g_idx: np.ndarray
    i_idx: np.ndarray
    n_idx: np.ndarray


def partition_embeddings(emb: np.ndarray, proposal: LabelMap) -> EmbeddingSets:
    """Split the embedding map into border (G), interior (I), background (N)."""
    d, h, w = emb.shape
    if proposal.data.shape != (h, w):
        raise ValueError(f"proposal extent {proposal.data.shape} does not match "
                         f"embedding extent {(h, w)}")
    flat = proposal.data.ravel()
    vectors = emb.reshape(d, h * w).T
    return EmbeddingSets(vectors,
                         np.flatnonzero(flat == BORDER),
                         np.flatnonzero(flat == INTERIOR),
                         np.flatnonzero(flat == BACKGROUND))


def loss_msgv(sets: EmbeddingSets) -> float:
    """Mean squared distance of interior embeddings to the mean border embedding."""
    if sets.g_idx.size == 0 or sets.i_idx.size == 0:
        return 0.0
    anchor = sets.vectors[sets.g_idx].mean(axis=0)
    diff = sets.vectors[sets.i_idx] - anchor
    return float(np.sum(diff * diff) / sets.i_idx.size)


def loss_msgv_grad(sets: EmbeddingSets,
                   symmetric: bool = False) -> tuple[float, np.ndarray]:
    """Variation loss and its gradient over all pixel embeddings.

    The anchor is constant by default, so only interior rows receive
    gradient; with symmetric=True the anchor's border members do too.
    """
    g = np.zeros_like(sets.vectors)
    if sets.g_idx.size == 0 or sets.i_idx.size == 0:
        return 0.0, g
    anchor = sets.vectors[sets.g_idx].mean(axis=0)
    diff = sets.vectors[sets.i_idx] - anchor
    k_i = sets.i_idx.size
    g[sets.i_idx] = (2.0 / k_i) * diff
    if symmetric:
        g[sets.g_idx] = (-2.0 / (k_i * sets.g_idx.size)) * diff.sum(axis=0)
    return float(np.sum(diff * diff) / k_i), g


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    return v / np.maximum(norms, LOG_FLOOR)


def similarity_to_set(n: np.ndarray, members: np.ndarray) -> float:
    """Mean cosine similarity of one embedding to every member of a set.

    An empty set yields -inf, which can never clear a threshold.
    """
    if members.shape[0] == 0:
        return -math.inf
    nn = n / max(float(np.linalg.norm(n)), LOG_FLOOR)
    return float(np.mean(_unit_rows(members) @ nn))


def refine_proposal(emb: np.ndarray, proposal: LabelMap, beta: float) -> LabelMap:
    """Relabel background pixels similar enough to the border or interior set.

    For each background pixel the mean cosine similarity to all border
    members and to all interior members is computed from a single snapshot
    of the sets; if the larger similarity exceeds beta the pixel joins the
    corresponding class (exact ties to border). Border and interior pixels
    never change.
    """
    sets = partition_embeddings(emb, proposal)
    out = proposal.data.copy()
    if sets.n_idx.size == 0 or (sets.g_idx.size == 0 and sets.i_idx.size == 0):
        return proposal_map(out)
    hat = _unit_rows(sets.vectors)
    nh = hat[sets.n_idx]
    s_g = nh @ hat[sets.g_idx].mean(axis=0) if sets.g_idx.size else \
        np.full(sets.n_idx.size, -np.inf)
    s_i = nh @ hat[sets.i_idx].mean(axis=0) if sets.i_idx.size else \
        np.full(sets.n_idx.size, -np.inf)
    best = np.maximum(s_g, s_i)
    relabel = best > beta
    target = np.where(s_g >= s_i, BORDER, INTERIOR).astype(np.uint8)
    flat = out.ravel()
    flat[sets.n_idx[relabel]] = target[relabel]
    return proposal_map(out)


def loss_msgo(probs: np.ndarray, rp: np.ndarray) -> float:
    """Pixel cross-entropy of predictions against the refined proposal."""
    h, w = rp.shape
    picked = probs[rp, np.arange(h)[:, None], np.arange(w)[None, :]]
    return float(-np.sum(np.log(np.maximum(picked, LOG_FLOOR))))


def loss_msgo_grad(probs: np.ndarray, rp: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy value and gradient w.r.t. the probability map."""
    h, w = rp.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    picked = probs[rp, rows, cols]
    val = float(-np.sum(np.log(np.maximum(picked, LOG_FLOOR))))
    g = np.zeros_like(probs)
    g[rp, rows, cols] = np.where(picked > LOG_FLOOR,
                                 -1.0 / np.maximum(picked, LOG_FLOOR), 0.0)
    return val, g


def total_loss(msgo: float, msgv: float, cfg: MsgConfig) -> float:
    """Cross-entropy plus the weighted variation term."""
    return msgo + cfg.lambda_v * msgv


def train_segmentation(pairs: list[Patch], cfg: MsgConfig,
                       seed: int) -> tuple[SegmentationModel, list[dict]]:
    """Train the segmentation network on patch/proposal pairs.

    Epochs where epoch % refine_every == 0 first refresh every patch's
    refined proposal from the current embeddings, always starting from the
    patch's original proposal. The cross-entropy targets the refined map,
    while the variation sets stay partitioned from the original proposal
    so the anchor never drifts from the mined evidence. Batches are drawn
    from a seeded shuffle;
    gradients average over the samples of a batch in deterministic order.
    Each sample's step objective is the combined loss divided by the patch
    pixel count (a per-pixel mean), so the learning rate transfers across
    patch sizes. Returns the model and a per-epoch history: mean per-pixel
    cross-entropy, mean variation loss, learning rate, relabeled-pixel
    count (None on non-refresh epochs).
    """
    if not pairs:
        raise ValueError("at least one training patch is required")
    shapes = {p.image.shape[1:] for p in pairs}
    if len(shapes) != 1:
        raise ValueError(f"patches must share one extent, got {sorted(shapes)}")
    for p in pairs:
        if p.labels is None:
            raise ValueError("every training patch needs proposal labels")
    rng_init = np.random.default_rng(np.random.SeedSequence([seed, 0x4D]))
    model = SegmentationModel(cfg.embed_dim, rng_init, cfg.widths, dtype=cfg.dtype)
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history
    rng_shuffle = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    originals = [proposal_map(p.labels) for p in pairs]
    images = [p.image.astype(cfg.dtype) for p in pairs]
    rp = list(originals)
    n = len(pairs)
    per_epoch = math.ceil(n / cfg.batch)
    sgd = SgdConfig(lr0=cfg.lr0, max_steps=cfg.epochs * per_epoch,
                    power=cfg.power, batch=cfg.batch)
    step = 0
    for epoch in range(cfg.epochs):
        relabeled = None
        if epoch % cfg.refine_every == 0:
            relabeled = 0
            for i in range(n):
                emb, _ = model.forward(images[i], train=False)
                refined = refine_proposal(emb, originals[i], cfg.beta)
                relabeled += int(np.sum(refined.data != originals[i].data))
                rp[i] = refined
        order = rng_shuffle.permutation(n)
        sum_msgo = sum_msgv = 0.0
        lr = poly_decay_lr(step, sgd)
        for start in range(0, n, cfg.batch):
            chunk = order[start:start + cfg.batch]
            model.zero_grads()
            for idx in chunk:
                emb, probs = model.forward(images[idx], train=True)
                px = emb.shape[1] * emb.shape[2]
                sets = partition_embeddings(emb, originals[idx])
                v_v, g_vec = loss_msgv_grad(sets, cfg.symmetric_anchor)
                v_o, g_probs = loss_msgo_grad(probs, rp[idx].data)
                if not np.isfinite(v_o + v_v):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, sample {idx}: "
                        f"msgo={v_o} msgv={v_v}")
                g_emb = (cfg.lambda_v / px * g_vec).T.reshape(emb.shape)
                model.backward(g_emb, g_probs / px)
                sum_msgo += v_o / px
                sum_msgv += v_v
            lr = poly_decay_lr(step, sgd)
            sgd_step(model.params(), model.grads(), lr / len(chunk))
            step += 1
        history.append({"epoch": epoch, "loss_msgo": sum_msgo / n,
                        "loss_msgv": sum_msgv / n, "lr": lr,
                        "relabeled": relabeled})
    return model, history


def predict(img: Image, model: SegmentationModel, patch: int = 128,
            stride: int = 128) -> tuple[np.ndarray, LabelMap]:
    """Per-pixel 3-class prediction stitched from patches.

    Overlapping patch probabilities are averaged before the argmax; the
    reflect-padded margins are cropped back to the input extent. Returns
    the binary gland mask (border or interior) and the full label map.
    """
    h, w = img.height, img.width
    patches = slice_patches(img, None, patch, stride)
    ph, pw = patches[0].image.shape[1:]
    hp = max(p.row for p in patches) + ph
    wp = max(p.col for p in patches) + pw
    acc = np.zeros((3, hp, wp), dtype=np.float64)
    cover = np.zeros((hp, wp), dtype=np.float64)
    for p in patches:
        _, probs = model.forward(p.image.astype(model.conv1.w.dtype), train=False)
        acc[:, p.row:p.row + ph, p.col:p.col + pw] += probs
        cover[p.row:p.row + ph, p.col:p.col + pw] += 1.0
    labels = np.argmax(acc / cover, axis=0).astype(np.uint8)[:h, :w]
    label_map = proposal_map(labels)
    gland = labels != BACKGROUND
    return gland, label_map
