"""Kernels over calibration samples and their parameter gradients.

Every composite kernel is built from two unit-variance base correlations, one
on the (standardized, padded) feature vector and one on the scalar confidence,
each scaled by its own variance:

    base(a, b) = feat_variance * rho(|za - zb|; feat_lengthscale)
               + conf_variance * rho(|sa - sb|; conf_lengthscale)

Variants:

    single_sum            base(a, b); the layer index is ignored
    hierarchical_layer    base_global(a, b) + [la == lb] * base_layer(a, b)
                          with independently parameterized base kernels
    icm_full              base(a, b) * B[la, lb], B = F F^T + diag(softplus)
    multilayer_additive   (global_weight + [la == lb] * layer_variances[la])
                          * base(a, b)  --  the diagonal-B reduction of icm_full

Positive parameters are optimized as logs; ICM factor entries are raw and the
ICM diagonal goes through softplus, so B stays positive semi-definite by
construction. Gradients are with respect to the unconstrained coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dumps import CalibrationSample

BASE_KINDS = ("rbf", "matern25")
VARIANTS = ("single_sum", "hierarchical_layer", "icm_full", "multilayer_additive")

_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    """Declarative kernel composition for a model.

    `layers` lists the original layer indices the layer axis ranges over (the
    ablation subsets G(1-3)/G(3-5) keep their dump indices); it defaults to
    1..layer_count.
    """

    base: str = "matern25"
    variant: str = "single_sum"
    layer_count: int = 1
    icm_rank: int = 1
    layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.base not in BASE_KINDS:
            raise ValueError(f"base must be one of {BASE_KINDS}, got {self.base!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.variant == "icm_full" and not (1 <= self.icm_rank <= self.layer_count):
            raise ValueError("icm_rank must be in [1, layer_count]")
        if not self.layers:
            object.__setattr__(self, "layers", tuple(range(1, self.layer_count + 1)))
        elif len(self.layers) != self.layer_count:
            raise ValueError("layers tuple must have layer_count entries")

    def layer_position(self, layer_index: int) -> int:
        try:
            return self.layers.index(layer_index)
        except ValueError:
            raise ValueError(
                f"layer index {layer_index} out of range; kernel covers {self.layers}"
            ) from None

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "variant": self.variant,
            "layer_count": self.layer_count,
            "icm_rank": self.icm_rank,
            "layers": list(self.layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(
            base=d["base"],
            variant=d["variant"],
            layer_count=int(d["layer_count"]),
            icm_rank=int(d["icm_rank"]),
            layers=tuple(int(l) for l in d["layers"]),
        )


@dataclass
class HyperParams:
    """Trainable kernel parameters; only the fields the variant uses matter.

    layer_variances aligns with KernelSpec.layers; icm_factor is (L, rank)
    and icm_diag holds the positive diagonal of B's corrective term.
    """

    feat_variance: float = 1.0
    feat_lengthscale: float = 1.0
    conf_variance: float = 1.0
    conf_lengthscale: float = 1.0
    layer_feat_variance: float = 1.0
    layer_feat_lengthscale: float = 1.0
    layer_conf_variance: float = 1.0
    layer_conf_lengthscale: float = 1.0
    global_weight: float = 1.0
    layer_variances: np.ndarray | None = None
    icm_factor: np.ndarray | None = None
    icm_diag: np.ndarray | None = None
    noise: float = 0.1

    def icm_b(self) -> np.ndarray:
        """Coregionalization matrix B = F F^T + diag(icm_diag); PSD by construction."""
        if self.icm_factor is None or self.icm_diag is None:
            raise ValueError("icm_factor/icm_diag are not set")
        f = np.atleast_2d(np.asarray(self.icm_factor, dtype=float))
        return f @ f.T + np.diag(np.asarray(self.icm_diag, dtype=float))

    def copy(self) -> "HyperParams":
        return replace(
            self,
            layer_variances=None if self.layer_variances is None else self.layer_variances.copy(),
            icm_factor=None if self.icm_factor is None else self.icm_factor.copy(),
            icm_diag=None if self.icm_diag is None else self.icm_diag.copy(),
        )

    def to_dict(self) -> dict:
        d = {
            "feat_variance": self.feat_variance,
            "feat_lengthscale": self.feat_lengthscale,
            "conf_variance": self.conf_variance,
            "conf_lengthscale": self.conf_lengthscale,
            "layer_feat_variance": self.layer_feat_variance,
            "layer_feat_lengthscale": self.layer_feat_lengthscale,
            "layer_conf_variance": self.layer_conf_variance,
            "layer_conf_lengthscale": self.layer_conf_lengthscale,
            "global_weight": self.global_weight,
            "noise": self.noise,
        }
        d["layer_variances"] = None if self.layer_variances is None else self.layer_variances.tolist()
        d["icm_factor"] = None if self.icm_factor is None else self.icm_factor.tolist()
        d["icm_diag"] = None if self.icm_diag is None else self.icm_diag.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        def arr(key):
            return None if d.get(key) is None else np.asarray(d[key], dtype=float)

        return cls(
            feat_variance=float(d["feat_variance"]),
            feat_lengthscale=float(d["feat_lengthscale"]),
            conf_variance=float(d["conf_variance"]),
            conf_lengthscale=float(d["conf_lengthscale"]),
            layer_feat_variance=float(d["layer_feat_variance"]),
            layer_feat_lengthscale=float(d["layer_feat_lengthscale"]),
            layer_conf_variance=float(d["layer_conf_variance"]),
            layer_conf_lengthscale=float(d["layer_conf_lengthscale"]),
            global_weight=float(d["global_weight"]),
            layer_variances=arr("layer_variances"),
            icm_factor=arr("icm_factor"),
            icm_diag=arr("icm_diag"),
            noise=float(d["noise"]),
        )


def default_hyperparams(spec: KernelSpec) -> HyperParams:
    """Unit variances, unit lengthscales, noise 0.1; layer arrays sized to spec."""
    hp = HyperParams()
    l = spec.layer_count
    if spec.variant == "multilayer_additive":
        hp.layer_variances = np.ones(l)
    elif spec.variant == "icm_full":
        hp.icm_factor = np.full((l, spec.icm_rank), 0.5)
        hp.icm_diag = np.ones(l)
    return hp


# ---------------------------------------------------------------------------
# scalar kernels (pair API; the matrix path below is the vectorized twin)
# ---------------------------------------------------------------------------


def _rho(sq: np.ndarray | float, lengthscale: float, kind: str):
    """Unit-variance correlation as a function of squared distance."""
    if kind == "rbf":
        return np.exp(-0.5 * sq / (lengthscale * lengthscale))
    t = _SQRT5 * np.sqrt(sq) / lengthscale
    return (1.0 + t + t * t / 3.0) * np.exp(-t)


def base_kernel(u, v, variance: float, lengthscale: float, kind: str = "rbf") -> float:
    """Evaluate one base kernel on a pair of real vectors.

    RBF: variance * exp(-|u-v|^2 / (2 lengthscale^2)).
    Matern-5/2: variance * (1 + sqrt5 r/l + 5 r^2/(3 l^2)) * exp(-sqrt5 r/l).
    """
    if kind not in BASE_KINDS:
        raise ValueError(f"kind must be one of {BASE_KINDS}, got {kind!r}")
    if variance <= 0 or lengthscale <= 0:
        raise ValueError("variance and lengthscale must be positive")
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    sq = float(np.sum((u - v) ** 2))
    return float(variance * _rho(sq, lengthscale, kind))


def _base_sum(a: CalibrationSample, b: CalibrationSample, fv, fl, cv, cl, kind) -> float:
    if a.features.shape != b.features.shape:
        raise ValueError(
            f"feature width mismatch: {a.features.shape} vs {b.features.shape}"
        )
    return base_kernel(a.features, b.features, fv, fl, kind) + base_kernel(
        [a.confidence], [b.confidence], cv, cl, kind
    )


def single_sum_kernel(
    a: CalibrationSample, b: CalibrationSample, hp: HyperParams, kind: str = "rbf"
) -> float:
    """Feature kernel plus confidence kernel; the layer index is ignored."""
    return _base_sum(
        a, b, hp.feat_variance, hp.feat_lengthscale, hp.conf_variance, hp.conf_lengthscale, kind
    )


def hierarchical_layer_kernel(
    a: CalibrationSample, b: CalibrationSample, hp: HyperParams, kind: str = "rbf"
) -> float:
    """Layer-agnostic sum kernel plus a same-layer-only second sum kernel.

    The layer index only gates the local term; it is excluded from both base
    kernels, so an index absent from training (the reserved -1) contributes
    the global part alone.
    """
    value = single_sum_kernel(a, b, hp, kind)
    if a.layer_index == b.layer_index:
        value += _base_sum(
            a,
            b,
            hp.layer_feat_variance,
            hp.layer_feat_lengthscale,
            hp.layer_conf_variance,
            hp.layer_conf_lengthscale,
            kind,
        )
    return value


def icm_kernel(
    a: CalibrationSample,
    b: CalibrationSample,
    hp: HyperParams,
    kind: str = "rbf",
    layers: tuple[int, ...] | None = None,
) -> float:
    """Shared sum kernel scaled by the coregionalization entry B[la, lb]."""
    b_matrix = hp.icm_b()
    layers = layers or tuple(range(1, b_matrix.shape[0] + 1))
    pa = _position(a.layer_index, layers)
    pb = _position(b.layer_index, layers)
    return single_sum_kernel(a, b, hp, kind) * float(b_matrix[pa, pb])


def multilayer_additive_kernel(
    a: CalibrationSample,
    b: CalibrationSample,
    hp: HyperParams,
    kind: str = "rbf",
    layers: tuple[int, ...] | None = None,
) -> float:
    """(global_weight + same-layer layer_variance) times the shared sum kernel.

    Equals icm_kernel with B = global_weight * 11^T + diag(layer_variances).
    """
    beta = np.asarray(hp.layer_variances, dtype=float)
    layers = layers or tuple(range(1, beta.shape[0] + 1))
    pa = _position(a.layer_index, layers)
    pb = _position(b.layer_index, layers)
    weight = hp.global_weight + (beta[pa] if pa == pb else 0.0)
    return weight * single_sum_kernel(a, b, hp, kind)


def _position(layer_index: int, layers: tuple[int, ...]) -> int:
    try:
        return layers.index(layer_index)
    except ValueError:
        raise ValueError(f"layer index {layer_index} out of range; kernel covers {layers}") from None


def self_kernel(spec: KernelSpec, hp: HyperParams, layer_index: int) -> float:
    """Prior variance k(x, x) at a point carrying the given layer index."""
    base = hp.feat_variance + hp.conf_variance
    if spec.variant == "single_sum":
        return base
    if spec.variant == "hierarchical_layer":
        return base + hp.layer_feat_variance + hp.layer_conf_variance
    p = spec.layer_position(layer_index)
    if spec.variant == "multilayer_additive":
        return (hp.global_weight + float(hp.layer_variances[p])) * base
    return float(hp.icm_b()[p, p]) * base


# ---------------------------------------------------------------------------
# vectorized assembly
# ---------------------------------------------------------------------------


@dataclass
class SampleArrays:
    """Struct-of-arrays view of a sample list."""

    features: np.ndarray
    confidence: np.ndarray
    layer_index: np.ndarray
    residual: np.ndarray
    correctness: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[CalibrationSample]) -> "SampleArrays":
        if not samples:
            raise ValueError("sample list is empty")
        width = samples[0].features.shape[0]
        for s in samples:
            if s.features.shape[0] != width:
                raise ValueError("samples disagree on feature width")
        return cls(
            features=np.stack([s.features for s in samples]).astype(float),
            confidence=np.array([s.confidence for s in samples], dtype=float),
            layer_index=np.array([s.layer_index for s in samples], dtype=int),
            residual=np.array([s.residual for s in samples], dtype=float),
            correctness=np.array([s.correctness for s in samples], dtype=int),
        )


def _sq_dists(a: np.ndarray, b: np.ndarray, symmetric: bool) -> np.ndarray:
    # |x - x'|^2 via the expansion; clipped at 0 and, for the square case,
    # symmetrized and zeroed on the diagonal so rounding cannot break either.
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.clip(sq, 0.0, None, out=sq)
    if symmetric:
        upper = np.triu(sq)
        sq = upper + upper.T - np.diag(np.diag(sq))
        np.fill_diagonal(sq, 0.0)
    return sq


@dataclass
class KernelWorkspace:
    """Cached pairwise distances for repeated kernel evaluation on one sample set.

    Distances never change during hyperparameter optimization; each iteration
    only re-applies elementwise transforms (sq and its root are both cached so
    the Matern path never recomputes sqrt).
    """

    spec: KernelSpec
    feat_sq: np.ndarray
    conf_sq: np.ndarray
    feat_r: np.ndarray
    conf_r: np.ndarray
    eq: np.ndarray
    pos_a: np.ndarray
    pos_b: np.ndarray

    @property
    def n(self) -> int:
        return self.feat_sq.shape[0]


def build_workspace(
    arrays_a: SampleArrays, arrays_b: SampleArrays | None, spec: KernelSpec
) -> KernelWorkspace:
    symmetric = arrays_b is None
    arrays_b = arrays_a if arrays_b is None else arrays_b
    feat_sq = _sq_dists(arrays_a.features, arrays_b.features, symmetric)
    conf_sq = (arrays_a.confidence[:, None] - arrays_b.confidence[None, :]) ** 2
    eq = arrays_a.layer_index[:, None] == arrays_b.layer_index[None, :]
    if spec.variant in ("multilayer_additive", "icm_full"):
        pos_a = np.array([spec.layer_position(int(l)) for l in arrays_a.layer_index])
        pos_b = np.array([spec.layer_position(int(l)) for l in arrays_b.layer_index])
    else:
        pos_a = np.zeros(len(arrays_a.layer_index), dtype=int)
        pos_b = np.zeros(len(arrays_b.layer_index), dtype=int)
    return KernelWorkspace(
        spec, feat_sq, conf_sq, np.sqrt(feat_sq), np.sqrt(conf_sq), eq, pos_a, pos_b
    )


def _rho_pair(sq, r, lengthscale, kind, want_grad):
    """(rho, d rho / d log lengthscale) sharing one exp evaluation."""
    if kind == "rbf":
        rho = np.exp(sq * (-0.5 / (lengthscale * lengthscale)))
        grad = rho * (sq * (1.0 / (lengthscale * lengthscale))) if want_grad else None
        return rho, grad
    t = r * (_SQRT5 / lengthscale)
    e = np.exp(-t)
    tt3 = t * t
    tt3 *= 1.0 / 3.0
    onep = 1.0 + t
    rho = (onep + tt3) * e
    if not want_grad:
        return rho, None
    grad = tt3 * onep
    grad *= e
    return rho, grad


@dataclass
class _EvalCache:
    """Intermediates shared between the kernel matrix and its gradients."""

    kf: np.ndarray
    kc: np.ndarray
    drho_f: np.ndarray | None
    drho_c: np.ndarray | None
    base: np.ndarray
    weight: np.ndarray | None = None   # multilayer_additive
    b_pairs: np.ndarray | None = None  # icm_full
    lkf: np.ndarray | None = None      # hierarchical_layer
    lkc: np.ndarray | None = None
    ldrho_f: np.ndarray | None = None
    ldrho_c: np.ndarray | None = None


def matrix_and_cache(
    ws: KernelWorkspace, hp: HyperParams, want_grads: bool = False
) -> tuple[np.ndarray, _EvalCache]:
    spec = ws.spec
    kind = spec.base
    rho_f, drho_f = _rho_pair(ws.feat_sq, ws.feat_r, hp.feat_lengthscale, kind, want_grads)
    rho_c, drho_c = _rho_pair(ws.conf_sq, ws.conf_r, hp.conf_lengthscale, kind, want_grads)
    kf = rho_f
    kf *= hp.feat_variance
    kc = rho_c
    kc *= hp.conf_variance
    base = kf + kc
    cache = _EvalCache(kf=kf, kc=kc, drho_f=drho_f, drho_c=drho_c, base=base)

    if spec.variant == "single_sum":
        return base, cache
    if spec.variant == "hierarchical_layer":
        lrho_f, ldrho_f = _rho_pair(
            ws.feat_sq, ws.feat_r, hp.layer_feat_lengthscale, kind, want_grads
        )
        lrho_c, ldrho_c = _rho_pair(
            ws.conf_sq, ws.conf_r, hp.layer_conf_lengthscale, kind, want_grads
        )
        lkf = lrho_f
        lkf *= hp.layer_feat_variance
        lkc = lrho_c
        lkc *= hp.layer_conf_variance
        cache.lkf, cache.lkc = lkf, lkc
        cache.ldrho_f, cache.ldrho_c = ldrho_f, ldrho_c
        return base + ws.eq * (lkf + lkc), cache
    if spec.variant == "multilayer_additive":
        beta = np.asarray(hp.layer_variances, dtype=float)
        weight = ws.eq * beta[ws.pos_a][:, None]
        weight += hp.global_weight
        cache.weight = weight
        return weight * base, cache
    b_matrix = hp.icm_b()
    b_pairs = b_matrix[np.ix_(ws.pos_a, ws.pos_b)]
    cache.b_pairs = b_pairs
    return base * b_pairs, cache


def evaluate_from_workspace(
    ws: KernelWorkspace, hp: HyperParams, want_grads: bool = False
) -> tuple[np.ndarray, dict[str, np.ndarray] | None]:
    """Kernel matrix and, optionally, its per-parameter gradient matrices.

    Gradients are with respect to the unconstrained coordinates (logs for
    positive parameters, raw ICM factors, softplus preimage for the ICM
    diagonal); the noise parameter is handled by the GP layer.
    """
    spec = ws.spec
    matrix, c = matrix_and_cache(ws, hp, want_grads)
    if not want_grads:
        return matrix, None

    d_base = {
        "feat_variance": c.kf,
        "feat_lengthscale": hp.feat_variance * c.drho_f,
        "conf_variance": c.kc,
        "conf_lengthscale": hp.conf_variance * c.drho_c,
    }
    if spec.variant == "single_sum":
        return matrix, d_base

    if spec.variant == "hierarchical_layer":
        eq = ws.eq
        d_base.update(
            {
                "layer_feat_variance": eq * c.lkf,
                "layer_feat_lengthscale": eq * (hp.layer_feat_variance * c.ldrho_f),
                "layer_conf_variance": eq * c.lkc,
                "layer_conf_lengthscale": eq * (hp.layer_conf_variance * c.ldrho_c),
            }
        )
        return matrix, d_base

    if spec.variant == "multilayer_additive":
        beta = np.asarray(hp.layer_variances, dtype=float)
        grads = {name: c.weight * mat for name, mat in d_base.items()}
        grads["global_weight"] = hp.global_weight * c.base
        for p, l in enumerate(spec.layers):
            mask = ws.eq & (ws.pos_a == p)[:, None]
            grads[f"layer_variance_{l}"] = beta[p] * (mask * c.base)
        return matrix, grads

    grads = {name: c.b_pairs * mat for name, mat in d_base.items()}
    factor = np.asarray(hp.icm_factor, dtype=float)
    for p, l in enumerate(spec.layers):
        row_a = (ws.pos_a == p).astype(float)
        row_b = (ws.pos_b == p).astype(float)
        for q in range(spec.icm_rank):
            db = row_a[:, None] * factor[ws.pos_b, q][None, :]
            db += factor[ws.pos_a, q][:, None] * row_b[None, :]
            grads[f"icm_factor_{l}_{q}"] = c.base * db
        # d softplus(x) / d x at the stored positive value: 1 - exp(-diag)
        chain = 1.0 - math.exp(-float(hp.icm_diag[p]))
        mask = ws.eq & (ws.pos_a == p)[:, None]
        grads[f"icm_diag_{l}"] = chain * (mask * c.base)
    return matrix, grads


def trace_gradients(
    ws: KernelWorkspace, hp: HyperParams, cache: _EvalCache, w: np.ndarray
) -> np.ndarray:
    """0.5 * tr(W dK/dtheta) per kernel parameter, without materializing dK.

    W must be symmetric (it is (aa^T - A^{-1}) in the marginal-likelihood
    gradient); block-structured terms reduce to row sums grouped by layer.
    Entries follow parameter_names(spec, include_noise=False).
    """
    spec = ws.spec
    c = cache

    def tsum(x, y):
        return 0.5 * float(np.sum(x * y))

    if spec.variant == "single_sum":
        wmul = w
    elif spec.variant == "hierarchical_layer":
        wmul = w
    elif spec.variant == "multilayer_additive":
        wmul = w * c.weight
    else:
        wmul = w * c.b_pairs

    out = [
        tsum(wmul, c.kf),
        hp.feat_variance * tsum(wmul, c.drho_f),
        tsum(wmul, c.kc),
        hp.conf_variance * tsum(wmul, c.drho_c),
    ]

    if spec.variant == "single_sum":
        return np.array(out)

    if spec.variant == "hierarchical_layer":
        weq = w * ws.eq
        out += [
            tsum(weq, c.lkf),
            hp.layer_feat_variance * tsum(weq, c.ldrho_f),
            tsum(weq, c.lkc),
            hp.layer_conf_variance * tsum(weq, c.ldrho_c),
        ]
        return np.array(out)

    wb = w * c.base
    if spec.variant == "multilayer_additive":
        beta = np.asarray(hp.layer_variances, dtype=float)
        out.append(hp.global_weight * 0.5 * float(np.sum(wb)))
        block = np.bincount(
            ws.pos_a, weights=(wb * ws.eq).sum(axis=1), minlength=spec.layer_count
        )
        out += [0.5 * beta[p] * block[p] for p in range(spec.layer_count)]
        return np.array(out)

    factor = np.asarray(hp.icm_factor, dtype=float)
    for p in range(spec.layer_count):
        sel = ws.pos_a == p
        for q in range(spec.icm_rank):
            # both terms of dB/dF coincide for symmetric W . base
            u = wb @ factor[ws.pos_b, q]
            out.append(0.5 * 2.0 * float(u[sel].sum()))
    block = np.bincount(
        ws.pos_a, weights=(wb * ws.eq).sum(axis=1), minlength=spec.layer_count
    )
    for p in range(spec.layer_count):
        chain = 1.0 - math.exp(-float(hp.icm_diag[p]))
        out.append(0.5 * chain * block[p])
    return np.array(out)


def matrix_from_workspace(ws: KernelWorkspace, hp: HyperParams) -> np.ndarray:
    return matrix_and_cache(ws, hp, want_grads=False)[0]


def kernel_matrix(
    samples: list[CalibrationSample], spec: KernelSpec, hp: HyperParams
) -> np.ndarray:
    """Symmetric kernel matrix over one sample list.

    Exact symmetry is guaranteed by symmetrizing the cached distance matrix
    (upper triangle mirrored) before any elementwise transform.
    """
    arrays = SampleArrays.from_samples(samples)
    ws = build_workspace(arrays, None, spec)
    return matrix_from_workspace(ws, hp)


def cross_matrix(
    train: SampleArrays, queries: SampleArrays, spec: KernelSpec, hp: HyperParams
) -> np.ndarray:
    """Rectangular kernel block k(train_i, query_j)."""
    ws = build_workspace(train, queries, spec)
    return matrix_from_workspace(ws, hp)


def global_cross_vector(
    train: SampleArrays,
    features: np.ndarray,
    confidence: np.ndarray,
    spec: KernelSpec,
    hp: HyperParams,
) -> np.ndarray:
    """Cross-covariance of training points against layer-agnostic queries.

    This is the variant kernel evaluated at the reserved query layer index -1
    (absent from training), where every same-layer term vanishes: the HL
    kernel keeps only its global sum kernel and the ML kernel keeps only
    global_weight * base. No layer-local hyperparameter is read.
    """
    if spec.variant not in ("hierarchical_layer", "multilayer_additive"):
        raise ValueError(f"global prediction is undefined for variant {spec.variant!r}")
    features = np.atleast_2d(np.asarray(features, dtype=float))
    confidence = np.atleast_1d(np.asarray(confidence, dtype=float))
    kind = spec.base
    feat_sq = _sq_dists(train.features, features, symmetric=False)
    conf_sq = (train.confidence[:, None] - confidence[None, :]) ** 2
    kf = hp.feat_variance * _rho(feat_sq, hp.feat_lengthscale, kind)
    kc = hp.conf_variance * _rho(conf_sq, hp.conf_lengthscale, kind)
    base = kf + kc
    if spec.variant == "multilayer_additive":
        return hp.global_weight * base
    return base


def global_prior_variance(spec: KernelSpec, hp: HyperParams) -> float:
    """Prior variance of the layer-agnostic component at any query point."""
    base = hp.feat_variance + hp.conf_variance
    if spec.variant == "multilayer_additive":
        return hp.global_weight * base
    if spec.variant == "hierarchical_layer":
        return base
    raise ValueError(f"global prediction is undefined for variant {spec.variant!r}")


# ---------------------------------------------------------------------------
# unconstrained parameterization and gradients
# ---------------------------------------------------------------------------

_SUM_PARAMS = ("feat_variance", "feat_lengthscale", "conf_variance", "conf_lengthscale")
_HL_PARAMS = _SUM_PARAMS + (
    "layer_feat_variance",
    "layer_feat_lengthscale",
    "layer_conf_variance",
    "layer_conf_lengthscale",
)


def parameter_names(spec: KernelSpec, include_noise: bool = True) -> list[str]:
    """Ordered names of the variant's free parameters (one entry per scalar)."""
    if spec.variant == "single_sum":
        names = list(_SUM_PARAMS)
    elif spec.variant == "hierarchical_layer":
        names = list(_HL_PARAMS)
    elif spec.variant == "multilayer_additive":
        names = list(_SUM_PARAMS) + ["global_weight"]
        names += [f"layer_variance_{l}" for l in spec.layers]
    else:
        names = list(_SUM_PARAMS)
        names += [
            f"icm_factor_{l}_{q}" for l in spec.layers for q in range(spec.icm_rank)
        ]
        names += [f"icm_diag_{l}" for l in spec.layers]
    if include_noise:
        names.append("noise")
    return names


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def pack_hyperparams(hp: HyperParams, spec: KernelSpec, include_noise: bool = True) -> np.ndarray:
    """Map HyperParams to the unconstrained optimization vector."""
    vec = []
    for name in parameter_names(spec, include_noise):
        if name.startswith("icm_factor_"):
            l, q = name.split("_")[-2:]
            vec.append(hp.icm_factor[spec.layer_position(int(l)), int(q)])
        elif name.startswith("icm_diag_"):
            l = int(name.split("_")[-1])
            vec.append(float(_inv_softplus(hp.icm_diag[spec.layer_position(l)])))
        elif name.startswith("layer_variance_"):
            l = int(name.split("_")[-1])
            vec.append(math.log(hp.layer_variances[spec.layer_position(l)]))
        else:
            vec.append(math.log(getattr(hp, name)))
    return np.array(vec, dtype=float)


def unpack_hyperparams(
    vec: np.ndarray, spec: KernelSpec, include_noise: bool = True
) -> HyperParams:
    hp = default_hyperparams(spec)
    for name, value in zip(parameter_names(spec, include_noise), vec):
        if name.startswith("icm_factor_"):
            l, q = name.split("_")[-2:]
            hp.icm_factor[spec.layer_position(int(l)), int(q)] = value
        elif name.startswith("icm_diag_"):
            l = int(name.split("_")[-1])
            hp.icm_diag[spec.layer_position(l)] = float(_softplus(value))
        elif name.startswith("layer_variance_"):
            l = int(name.split("_")[-1])
            hp.layer_variances[spec.layer_position(l)] = math.exp(value)
        else:
            setattr(hp, name, math.exp(value))
    return hp


def kernel_gradients_from_workspace(
    ws: KernelWorkspace, hp: HyperParams
) -> dict[str, np.ndarray]:
    """d K / d theta for every unconstrained kernel parameter (noise excluded)."""
    return evaluate_from_workspace(ws, hp, want_grads=True)[1]


def kernel_param_gradients(
    samples: list[CalibrationSample], spec: KernelSpec, hp: HyperParams
) -> dict[str, np.ndarray]:
    """Per-parameter gradient matrices of the kernel matrix on a sample list."""
    arrays = SampleArrays.from_samples(samples)
    ws = build_workspace(arrays, None, spec)
    return kernel_gradients_from_workspace(ws, hp)
