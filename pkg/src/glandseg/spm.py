"""Selective proposal mining.

Per image: a shallow three-layer conv encoder is trained against its own
argmax labels plus a spatial continuity penalty, the resulting per-pixel
features are clustered with K-means into candidate regions, the region with
the highest mean gray level (inverted luminance, so darkest) is taken as the
gland border, and the areas it encloses become the interior. The output is a
three-class proposal map: 0 background, 1 border, 2 interior.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .imaging import BORDER, INTERIOR, Image, LabelMap, proposal_map, to_gray_level
from .nn_core import (
    CHECK_DTYPE,
    FAST_DTYPE,
    ChannelStandardize,
    Conv3x3,
    ReLU,
    SgdConfig,
    l2_normalize_channels,
    poly_decay_lr,
    sgd_step,
    softmax_channels,
    softmax_vjp,
)


@dataclass(frozen=True)
class SpmConfig:
    """Knobs for per-image proposal mining."""

    feature_dim: int = 32
    iterations: int = 50
    lr0: float = 1e-2
    power: float = 0.9
    sc_shift: int = 2
    sc_weight: float = 1.0
    kmeans_k: int = 5
    kmeans_restarts: int = 5
    kmeans_max_iters: int = 100
    seed: int = 0
    kmeans_seed: int = 0
    precision: str = "fast"

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.sc_shift < 1:
            raise ValueError(f"sc_shift must be >= 1, got {self.sc_shift}")
        if self.sc_weight < 0:
            raise ValueError(f"sc_weight must be >= 0, got {self.sc_weight}")
        if self.kmeans_k < 1:
            raise ValueError(f"kmeans_k must be >= 1, got {self.kmeans_k}")
        if self.kmeans_restarts < 1:
            raise ValueError(f"kmeans_restarts must be >= 1, got {self.kmeans_restarts}")
        if self.kmeans_max_iters < 1:
            raise ValueError(f"kmeans_max_iters must be >= 1, got {self.kmeans_max_iters}")
        if self.precision not in ("fast", "check"):
            raise ValueError(f"precision must be 'fast' or 'check', got {self.precision!r}")

    @property
    def dtype(self):
        return CHECK_DTYPE if self.precision == "check" else FAST_DTYPE


class ShallowEncoder:
    """Three 3x3 conv stages (3->D, D->D, D->D), standardize+ReLU between."""

    def __init__(self, feature_dim: int, rng: np.random.Generator, dtype=FAST_DTYPE):
        self.feature_dim = feature_dim
        self.conv1 = Conv3x3(3, feature_dim, rng, dtype)
        self.conv2 = Conv3x3(feature_dim, feature_dim, rng, dtype)
        self.conv3 = Conv3x3(feature_dim, feature_dim, rng, dtype)
        self._stack = [self.conv1, ChannelStandardize(), ReLU(),
                       self.conv2, ChannelStandardize(), ReLU(),
                       self.conv3]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y = x.astype(self.conv1.w.dtype, copy=False)
        for layer in self._stack:
            y = layer.forward(y, train=train)
        return y

    def backward(self, gy: np.ndarray) -> None:
        for layer in reversed(self._stack):
            gy = layer.backward(gy)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self._stack for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self._stack for g in layer.grads()]

    def zero_grads(self) -> None:
        for g in self.grads():
            g[...] = 0


def encoder_forward(img: Image, enc: ShallowEncoder) -> tuple[np.ndarray, np.ndarray]:
    """Channel-softmax probabilities and the L2-normalized map, one pass.

    The softmax map feeds the self-labeling loss (strictly positive, so the
    log is safe); the normalized map feeds K-means distance geometry.
    """
    raw = enc.forward(img.data, train=False)
    return softmax_channels(raw), l2_normalize_channels(raw)


def cluster_label(F: np.ndarray) -> LabelMap:
    """Per-pixel argmax over channels, ties to the lowest channel index."""
    labels = np.argmax(F, axis=0).astype(np.uint8)
    return LabelMap(labels, num_classes=F.shape[0])


def loss_ss(F: np.ndarray, C: LabelMap) -> float:
    """Sum over pixels of -ln F at each pixel's own label."""
    h, w = C.data.shape
    picked = F[C.data, np.arange(h)[:, None], np.arange(w)[None, :]]
    return float(-np.sum(np.log(picked)))


def loss_ss_grad(F: np.ndarray, C: LabelMap) -> tuple[float, np.ndarray]:
    """Self-labeling loss and its gradient w.r.t. F (labels held constant)."""
    h, w = C.data.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    picked = F[C.data, rows, cols]
    g = np.zeros_like(F)
    g[C.data, rows, cols] = -1.0 / picked
    return float(-np.sum(np.log(picked))), g


def loss_sc(F: np.ndarray, S: int) -> float:
    """Squared differences against vertical and horizontal shifts 1..S."""
    if S < 1:
        raise ValueError(f"shift range must be >= 1, got {S}")
    total = 0.0
    for s in range(1, S + 1):
        dv = F[:, s:, :] - F[:, :-s, :]
        dh = F[:, :, s:] - F[:, :, :-s]
        total += float(np.sum(dv * dv) + np.sum(dh * dh))
    return total


def loss_sc_grad(F: np.ndarray, S: int) -> tuple[float, np.ndarray]:
    """Continuity loss and its gradient w.r.t. F."""
    if S < 1:
        raise ValueError(f"shift range must be >= 1, got {S}")
    total = 0.0
    g = np.zeros_like(F)
    for s in range(1, S + 1):
        dv = F[:, s:, :] - F[:, :-s, :]
        dh = F[:, :, s:] - F[:, :, :-s]
        total += float(np.sum(dv * dv) + np.sum(dh * dh))
        g[:, s:, :] += 2.0 * dv
        g[:, :-s, :] -= 2.0 * dv
        g[:, :, s:] += 2.0 * dh
        g[:, :, :-s] -= 2.0 * dh
    return total, g


def train_encoder(img: Image, cfg: SpmConfig) -> tuple[ShallowEncoder, list[float]]:
    """Self-supervised per-image training; returns the encoder and loss curve.

    Each iteration recomputes the argmax pseudo-labels from the current
    softmax map, evaluates the self-labeling plus weighted continuity loss,
    backpropagates, and applies one SGD step under polynomial lr decay.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E]))
    enc = ShallowEncoder(cfg.feature_dim, rng, dtype=cfg.dtype)
    if cfg.iterations == 0:
        return enc, []
    sgd = SgdConfig(lr0=cfg.lr0, max_steps=cfg.iterations, power=cfg.power)
    x = img.data.astype(cfg.dtype)
    curve: list[float] = []
    for step in range(cfg.iterations):
        raw = enc.forward(x, train=True)
        F = softmax_channels(raw)
        C = cluster_label(F)
        v_ss, g_ss = loss_ss_grad(F, C)
        v_sc, g_sc = loss_sc_grad(F, cfg.sc_shift)
        total = v_ss + cfg.sc_weight * v_sc
        if not np.isfinite(total):
            raise FloatingPointError(
                f"non-finite mining loss at iteration {step}: ss={v_ss} sc={v_sc}")
        curve.append(total)
        enc.zero_grads()
        enc.backward(softmax_vjp(F, g_ss + cfg.sc_weight * g_sc))
        sgd_step(enc.params(), enc.grads(), poly_decay_lr(step, sgd))
    return enc, curve


@dataclass(frozen=True)
class RegionMap:
    """K-means assignment over pixels plus per-region pixel counts."""

    labels: LabelMap
    counts: tuple[int, ...]
    underpopulated: bool = False

    def __post_init__(self):
        h, w = self.labels.data.shape
        if sum(self.counts) != h * w:
            raise ValueError("region counts must sum to the pixel count")
        if len(self.counts) != self.labels.num_classes:
            raise ValueError("one count per region required")


def _kmeans_once(pts: np.ndarray, k: int, rng: np.random.Generator,
                 max_iters: int, reseed_empties: bool) -> tuple[np.ndarray, float]:
    """One Lloyd run with k-means++ seeding; returns assignment and WCSS."""
    n = pts.shape[0]
    centers = np.empty((k, pts.shape[1]), dtype=pts.dtype)
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = pts[0]
            continue
        idx = rng.choice(n, p=d2 / total)
        centers[j] = pts[idx]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    pnorm = np.sum(pts * pts, axis=1)
    for _ in range(max_iters):
        dist = pnorm[:, None] - 2.0 * (pts @ centers.T) + np.sum(centers * centers, axis=1)
        new_assign = np.argmin(dist, axis=1)
        counts = np.bincount(new_assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, new_assign, pts)
        nonzero = counts > 0
        centers[nonzero] = sums[nonzero] / counts[nonzero, None]
        reseeded = False
        if reseed_empties and not nonzero.all():
            own = np.take_along_axis(dist, new_assign[:, None], axis=1)[:, 0]
            taken = np.zeros(n, dtype=bool)
            for j in np.flatnonzero(~nonzero):
                cand = np.where(taken, -np.inf, own)
                far = int(np.argmax(cand))
                centers[j] = pts[far]
                taken[far] = True
                reseeded = True
        if not reseeded and np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    dist = pnorm[:, None] - 2.0 * (pts @ centers.T) + np.sum(centers * centers, axis=1)
    assign = np.argmin(dist, axis=1)
    wcss = float(np.take_along_axis(dist, assign[:, None], axis=1).sum())
    return assign, max(wcss, 0.0)


def kmeans(F_norm: np.ndarray, cfg: SpmConfig) -> RegionMap:
    """Best-of-restarts Lloyd clustering of per-pixel feature vectors.

    Deterministic: restart r draws from SeedSequence([kmeans_seed, r]); the
    restart with the lowest within-cluster sum of squares wins, earlier
    restarts winning ties. Empty clusters are re-seeded with the point
    farthest from its assigned centroid unless there are fewer distinct
    pixels than regions, in which case the surplus regions stay empty and
    the map is flagged underpopulated.
    """
    d, h, w = F_norm.shape
    pts = F_norm.reshape(d, h * w).T.astype(np.float64)
    distinct = np.unique(pts, axis=0).shape[0]
    underpopulated = distinct < cfg.kmeans_k
    best_assign, best_wcss = None, np.inf
    for r in range(cfg.kmeans_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.kmeans_seed, r]))
        assign, wcss = _kmeans_once(pts, cfg.kmeans_k, rng, cfg.kmeans_max_iters,
                                    reseed_empties=not underpopulated)
        if wcss < best_wcss:
            best_assign, best_wcss = assign, wcss
    labels = LabelMap(best_assign.reshape(h, w).astype(np.uint8),
                      num_classes=cfg.kmeans_k)
    counts = tuple(int(c) for c in np.bincount(best_assign, minlength=cfg.kmeans_k))
    return RegionMap(labels, counts, underpopulated)


def region_gray_means(regions: RegionMap, gray: np.ndarray) -> np.ndarray:
    """Mean gray level per region; NaN for empty regions."""
    k = regions.labels.num_classes
    sums = np.bincount(regions.labels.data.ravel(), weights=gray.ravel(), minlength=k)
    counts = np.asarray(regions.counts, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def select_border_region(regions: RegionMap, gray: np.ndarray) -> np.ndarray:
    """Mask of the non-empty region with the highest mean gray level.

    Gray here is inverted luminance, so the darkest region wins; ties go to
    the lowest region index.
    """
    means = region_gray_means(regions, gray)
    means = np.where(np.isnan(means), -np.inf, means)
    return regions.labels.data == int(np.argmax(means))


def fill_interior(border: np.ndarray) -> np.ndarray:
    """Non-border pixels unreachable from the image edge, 4-connected."""
    h, w = border.shape
    reached = np.zeros((h, w), dtype=bool)
    queue: deque[tuple[int, int]] = deque()
    for c in range(w):
        for r in (0, h - 1):
            if not border[r, c] and not reached[r, c]:
                reached[r, c] = True
                queue.append((r, c))
    for r in range(h):
        for c in (0, w - 1):
            if not border[r, c] and not reached[r, c]:
                reached[r, c] = True
                queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and not border[rr, cc] and not reached[rr, cc]:
                reached[rr, cc] = True
                queue.append((rr, cc))
    return ~border & ~reached


def assemble_proposal(border: np.ndarray, interior: np.ndarray) -> LabelMap:
    """Compose masks into the 3-class map: 1 border, 2 interior, 0 rest."""
    if border.shape != interior.shape:
        raise ValueError("border and interior extents differ")
    if np.any(border & interior):
        raise ValueError("border and interior masks overlap")
    out = np.zeros(border.shape, dtype=np.uint8)
    out[border] = BORDER
    out[interior] = INTERIOR
    return proposal_map(out)


@dataclass(frozen=True)
class MiningReport:
    """Proposal map plus the evidence that produced it."""

    proposal: LabelMap
    regions: RegionMap
    border_region: int
    region_gray: tuple[float, ...]
    loss_curve: tuple[float, ...]


def mine_report(img: Image, cfg: SpmConfig, invert_gray: bool = True) -> MiningReport:
    """Full per-image mining pass with diagnostics."""
    enc, curve = train_encoder(img, cfg)
    _, normed = encoder_forward(img, enc)
    regions = kmeans(normed.astype(np.float64), cfg)
    gray = to_gray_level(img, invert=invert_gray)
    means = region_gray_means(regions, gray)
    border_region = int(np.argmax(np.where(np.isnan(means), -np.inf, means)))
    border = regions.labels.data == border_region
    interior = fill_interior(border)
    proposal = assemble_proposal(border, interior)
    return MiningReport(proposal, regions, border_region,
                        tuple(float(m) for m in means), tuple(curve))


def mine_proposal(img: Image, cfg: SpmConfig, invert_gray: bool = True) -> LabelMap:
    """Train, cluster, select the border, fill: one image to one proposal."""
    return mine_report(img, cfg, invert_gray=invert_gray).proposal
