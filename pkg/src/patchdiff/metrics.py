"""Single-image Frechet distance and set diversity over patch features.

The feature extractor is a small convolutional stack with deterministic
seeded random weights by default; externally exported pretrained weights can
be loaded through the shared array container instead.  Fidelity compares the
Gaussian (mu, Sigma) fitted over the spatial positions of one designated
pre-pooling activation map; diversity averages a perceptual-style distance
(per-layer-weighted MSE of channel-unit-normalized feature maps) over all
unordered pairs of a sample set.

The matrix square root inside the Frechet formula goes through a symmetric
eigendecomposition of sqrt(Sx) Sy sqrt(Sx): eigenvalues below -1e-6 raise a
numerics warning, smaller negatives are clipped to zero.
"""

import dataclasses
import warnings

import numpy as np
import torch
from torch.nn import functional as F

from .archive import load_arrays, save_arrays
from .errors import (
    ArrayShapeError,
    CoefficientUndefinedError,
    MissingArrayError,
    TooFewRowsError,
    UnsupportedImageSizeError,
    ValidationError,
)
from .rng import make_generator

__all__ = [
    "LayerSpec",
    "FeatureExtractor",
    "FeatureStats",
    "DiversityReport",
    "seeded_extractor",
    "extract_patch_features",
    "fit_stats",
    "frechet_distance",
    "sifid",
    "diversity",
    "save_extractor_weights",
    "load_extractor_weights",
    "COEFFICIENT_MODES",
]

COEFFICIENT_MODES = ("pair-mean", "paper-literal")


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    """Convolutional stack description.

    ``pool_after`` lists 0-based conv indices followed by a 2x2 max pool;
    ``export_index`` picks whose post-activation map (taken before its pool)
    feeds the Frechet statistics; ``lpips_indices`` pick the maps entering
    the diversity distance.
    """

    in_channels: int = 3
    widths: tuple = (32, 64, 64, 64, 128)
    kernel: int = 3
    pool_after: tuple = (1, 3)
    export_index: int = 3
    lpips_indices: tuple = (1, 3, 4)

    def __post_init__(self):
        if not self.widths:
            raise ValidationError("widths must be non-empty")
        if not (0 <= self.export_index < len(self.widths)):
            raise ValidationError("export_index out of range")
        if any(not 0 <= i < len(self.widths) for i in self.lpips_indices):
            raise ValidationError("lpips_indices out of range")
        if self.kernel % 2 == 0:
            raise ValidationError("kernel must be odd")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("widths", "pool_after", "lpips_indices"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        for key in ("widths", "pool_after", "lpips_indices"):
            d[key] = tuple(d[key])
        return cls(**d)

    def min_side(self) -> int:
        """Smallest input side for which every pool output stays >= 1 px."""
        pools = len(self.pool_after)
        return 2 ** pools


@dataclasses.dataclass
class FeatureExtractor:
    layer_spec: LayerSpec
    weights: list  # [(weight, bias)] per conv, torch float32
    per_layer_weights: tuple
    provenance: str

    def __post_init__(self):
        if len(self.weights) != len(self.layer_spec.widths):
            raise ValidationError("one (weight, bias) pair per conv required")
        if len(self.per_layer_weights) != len(self.layer_spec.lpips_indices):
            raise ValidationError(
                "per_layer_weights must match lpips_indices in length"
            )
        if any(w < 0 for w in self.per_layer_weights):
            raise ValidationError("per_layer_weights must be nonnegative")

    def _activations(self, image: torch.Tensor) -> dict:
        spec = self.layer_spec
        if image.ndim != 3 or image.shape[0] != spec.in_channels:
            raise UnsupportedImageSizeError(
                f"expected ({spec.in_channels}, H, W) image, got "
                f"{tuple(image.shape)}"
            )
        h, w = image.shape[1:]
        if min(h, w) < spec.min_side():
            raise UnsupportedImageSizeError(
                f"image {h}x{w} too small; extractor needs >= "
                f"{spec.min_side()} px per side"
            )
        pad = spec.kernel // 2
        acts = {}
        with torch.no_grad():
            x = image.to(torch.float32).unsqueeze(0)
            for i, (wgt, b) in enumerate(self.weights):
                x = F.relu(F.conv2d(x, wgt, b, padding=pad))
                acts[i] = x[0]
                if i in spec.pool_after:
                    x = F.max_pool2d(x, 2)
        return acts

    def export_map(self, image: torch.Tensor) -> torch.Tensor:
        return self._activations(image)[self.layer_spec.export_index]

    def lpips_maps(self, image: torch.Tensor) -> list:
        acts = self._activations(image)
        return [acts[i] for i in self.layer_spec.lpips_indices]


def seeded_extractor(seed: int = 0,
                     layer_spec: LayerSpec = LayerSpec()) -> FeatureExtractor:
    """Deterministic random-weight extractor (the in-repo default)."""
    gen = make_generator(seed, "extractor")
    weights = []
    c_in = layer_spec.in_channels
    k = layer_spec.kernel
    for width in layer_spec.widths:
        fan_in = c_in * k * k
        w = torch.empty(width, c_in, k, k).normal_(
            0.0, (2.0 / fan_in) ** 0.5, generator=gen)
        b = torch.zeros(width)
        weights.append((w, b))
        c_in = width
    n_layers = len(layer_spec.lpips_indices)
    return FeatureExtractor(
        layer_spec=layer_spec,
        weights=weights,
        per_layer_weights=tuple(1.0 / n_layers for _ in range(n_layers)),
        provenance=f"seeded:{seed}",
    )


def extract_patch_features(extractor: FeatureExtractor,
                           image: torch.Tensor) -> np.ndarray:
    """Flatten the exported activation map to a (positions, dims) matrix."""
    fmap = extractor.export_map(image)
    c, h, w = fmap.shape
    return fmap.reshape(c, h * w).T.numpy().astype(np.float64)


@dataclasses.dataclass(frozen=True)
class FeatureStats:
    """Gaussian summary of a patch-feature set."""

    mu: np.ndarray
    sigma: np.ndarray


def fit_stats(features: np.ndarray) -> FeatureStats:
    """Column mean and unbiased sample covariance of the feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise TooFewRowsError(
            f"need a (rows >= 2, dims) matrix, got shape {features.shape}"
        )
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return FeatureStats(mu=mu, sigma=sigma)


def _clipped_psd_eigh(mat: np.ndarray):
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        warnings.warn(
            f"matrix eigenvalue {vals.min():.3e} below -1e-6; clipping",
            RuntimeWarning,
        )
    return np.clip(vals, 0.0, None), vecs


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = _clipped_psd_eigh(mat)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(stats_x: FeatureStats, stats_y: FeatureStats) -> float:
    """||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 (Sx Sy)^(1/2)).

    Stats-level entry point; `sifid` wraps it with feature extraction.
    """
    dmu = stats_x.mu - stats_y.mu
    mean_term = float(dmu @ dmu)
    sq = _sqrtm_psd(stats_x.sigma)
    inner = sq @ stats_y.sigma @ sq
    vals, _ = _clipped_psd_eigh(inner)
    trace_term = float(np.trace(stats_x.sigma) + np.trace(stats_y.sigma)
                       - 2.0 * np.sqrt(vals).sum())
    return mean_term + trace_term


def sifid(x: torch.Tensor, y: torch.Tensor,
          extractor: FeatureExtractor) -> float:
    """Frechet distance between the patch-feature Gaussians of two images.

    Tiny negative results from rounding are clipped to 0; anything below
    -1e-6 additionally raises a numerics warning.
    """
    stats_x = fit_stats(extract_patch_features(extractor, x))
    stats_y = fit_stats(extract_patch_features(extractor, y))
    value = frechet_distance(stats_x, stats_y)
    if value < -1e-6:
        warnings.warn(f"sifid came out {value:.3e} < -1e-6; clipping to 0",
                      RuntimeWarning)
    return max(value, 0.0)


@dataclasses.dataclass(frozen=True)
class DiversityReport:
    n: int
    pairwise: np.ndarray  # symmetric (n, n), zero diagonal
    mean_diversity: float
    coefficient_mode: str


def _normalized_maps(extractor: FeatureExtractor, image: torch.Tensor) -> list:
    maps = []
    for fmap in extractor.lpips_maps(image):
        norm = torch.sqrt((fmap ** 2).sum(dim=0, keepdim=True) + 1e-10)
        maps.append(fmap / norm)
    return maps


def _pair_distance(maps_a: list, maps_b: list, layer_weights) -> float:
    d = 0.0
    for w, fa, fb in zip(layer_weights, maps_a, maps_b):
        d += w * float(((fa - fb) ** 2).mean())
    return d


def diversity(images: list, extractor: FeatureExtractor,
              coefficient_mode: str = "pair-mean") -> DiversityReport:
    """Mean pairwise perceptual distance over a sample set.

    "pair-mean" divides the pair sum by n(n-1)/2.  "paper-literal" multiplies
    it by 2/((n-1)(n-2)) instead, which is undefined at n = 2 and rejected.
    """
    if coefficient_mode not in COEFFICIENT_MODES:
        raise ValidationError(
            f"coefficient_mode must be one of {COEFFICIENT_MODES}"
        )
    n = len(images)
    if n < 2:
        raise TooFewRowsError(f"diversity needs >= 2 images, got {n}")
    if coefficient_mode == "paper-literal" and n == 2:
        raise CoefficientUndefinedError(
            "paper-literal coefficient 2/((n-1)(n-2)) divides by zero at n=2"
        )
    all_maps = [_normalized_maps(extractor, img) for img in images]
    pairwise = np.zeros((n, n), dtype=np.float64)
    pair_sum = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d = _pair_distance(all_maps[i], all_maps[j],
                               extractor.per_layer_weights)
            pairwise[i, j] = pairwise[j, i] = d
            pair_sum += d
    if coefficient_mode == "pair-mean":
        mean = pair_sum / (n * (n - 1) / 2)
    else:
        mean = 2.0 * pair_sum / ((n - 1) * (n - 2))
    return DiversityReport(n=n, pairwise=pairwise, mean_diversity=mean,
                           coefficient_mode=coefficient_mode)


def _weight_arrays(extractor: FeatureExtractor) -> dict:
    arrays = {}
    for i, (w, b) in enumerate(extractor.weights):
        arrays[f"conv{i}/weight"] = w.numpy()
        arrays[f"conv{i}/bias"] = b.numpy()
    return arrays


def save_extractor_weights(extractor: FeatureExtractor, path) -> None:
    save_arrays(path, _weight_arrays(extractor), {
        "kind": "extractor-weights",
        "layer_spec": extractor.layer_spec.to_dict(),
        "per_layer_weights": list(extractor.per_layer_weights),
    })


def load_extractor_weights(path) -> FeatureExtractor:
    """Build an extractor from an external weight archive.

    Array shapes are validated against the embedded layer spec; failures name
    the offending array.
    """
    arrays, meta = load_arrays(path)
    spec = LayerSpec.from_dict(meta["layer_spec"])
    weights = []
    c_in = spec.in_channels
    k = spec.kernel
    for i, width in enumerate(spec.widths):
        pair = []
        for part, expected in (("weight", (width, c_in, k, k)),
                               ("bias", (width,))):
            name = f"conv{i}/{part}"
            if name not in arrays:
                raise MissingArrayError(name)
            arr = arrays[name]
            if tuple(arr.shape) != expected:
                raise ArrayShapeError(name, expected, arr.shape)
            pair.append(torch.from_numpy(np.ascontiguousarray(arr)).float())
        weights.append((pair[0], pair[1]))
        c_in = width
    return FeatureExtractor(
        layer_spec=spec,
        weights=weights,
        per_layer_weights=tuple(meta.get(
            "per_layer_weights",
            [1.0 / len(spec.lpips_indices)] * len(spec.lpips_indices))),
        provenance=f"archive:{path}",
    )
