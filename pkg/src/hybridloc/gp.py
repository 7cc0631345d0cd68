"""Sparse variational GP regression over extractor features.

The variational distribution is whitened: with L the Cholesky factor of the
inducing-point Gram matrix, q(u) = N(L mu_w, L Sigma_w L'), Sigma_w = C C'
with C lower triangular (log-parametrised diagonal, so optimisation is
unconstrained and Sigma_w stays positive definite). The Sigma_w factor is
shared across the P output dimensions; means are independent per output.

An exact dense GP (and its log marginal likelihood) lives alongside as the
oracle the sparse path is validated against. The evidence lower bound is
maximised by minibatch gradient ascent; all gradients are hand-derived,
including the reverse-mode rule for the Cholesky factorisation, and are
checked against finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular

from . import geom
from .errors import (FormatError, InvalidArgumentError, InvalidStateError,
                     NumericalError)
from .features import FeatureExtractor, Optimizer, schedule_lr
from .observation import BevImage

MAGIC = b"HLGP"
VERSION = 1

JITTER = 1e-8
JITTER_MAX = 1e-4

#: Fixed orientation-sampling variances (rad^2) about the x/y/z axes.
DEFAULT_ROT_SPREAD = (0.0225, 0.25, 0.0225)


def sqdist(a, b):
    """Pairwise squared Euclidean distances, clipped at zero."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
         - 2.0 * a @ b.T)
    return np.maximum(d, 0.0)


@dataclass
class RbfKernel:
    """Isotropic RBF kernel with observation noise, log-parametrised."""

    lengthscale: float = 1.0
    signal_var: float = 1.0
    noise_var: float = 0.1

    def __post_init__(self):
        if min(self.lengthscale, self.signal_var, self.noise_var) <= 0:
            raise InvalidArgumentError("kernel hyperparameters must be positive")

    def K(self, a, b):
        return self.signal_var * np.exp(-sqdist(a, b) / (2.0 * self.lengthscale**2))

    def Kdiag(self, a):
        return np.full(np.atleast_2d(a).shape[0], self.signal_var)


def chol_jittered(a, jitter=JITTER, jitter_max=JITTER_MAX):
    """Cholesky with an escalating diagonal jitter: start at ``jitter``,
    double on failure up to ``jitter_max``, then report a numerical error.
    Returns (L, jitter_used)."""
    eye = np.eye(a.shape[0])
    j = jitter
    while True:
        try:
            return np.linalg.cholesky(a + j * eye), j
        except np.linalg.LinAlgError:
            j = j * 2.0 if j > 0 else JITTER
            if j > jitter_max:
                raise NumericalError(
                    f"Cholesky failed at jitter {j / 2:.2e} (limit {jitter_max:.2e})"
                ) from None


def chol_rev(L, Lbar):
    """Reverse-mode Cholesky: adjoint of K from the adjoint of L = chol(K).

    Returns the symmetric matrix Kbar with dF = sum(Kbar * dK) for symmetric
    perturbations dK.
    """
    P = np.tril(L.T @ Lbar)
    P[np.diag_indices_from(P)] *= 0.5
    S = P + P.T
    tmp = solve_triangular(L, S, lower=True, trans="T")
    return 0.5 * solve_triangular(L, tmp.T, lower=True, trans="T").T


# ---------------------------------------------------------------------------
# exact GP oracle
# ---------------------------------------------------------------------------

def exact_gp_predict(train_feats, train_targets, kernel: RbfKernel, test_feats):
    """Dense GP posterior at test inputs: (means (q,P), variances (q,)).

    The predictive variance is shared across outputs (one kernel, zero prior
    mean). Serves as the correctness oracle for the sparse path.
    """
    X = np.atleast_2d(train_feats)
    Y = np.asarray(train_targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 1:
        raise InvalidArgumentError("need at least one training point")
    Xs = np.atleast_2d(test_feats)
    Knn = kernel.K(X, X) + kernel.noise_var * np.eye(X.shape[0])
    L, _ = chol_jittered(Knn, 0.0)
    alpha = solve_triangular(L.T, solve_triangular(L, Y, lower=True), lower=False)
    Ksn = kernel.K(Xs, X)
    mean = Ksn @ alpha
    V = solve_triangular(L, Ksn.T, lower=True)
    var = kernel.Kdiag(Xs) - np.sum(V * V, axis=0)
    return mean, np.maximum(var, 0.0)


def exact_log_marginal(kernel: RbfKernel, train_feats, train_targets) -> float:
    """log N(Y | 0, K + noise I), summed over output columns."""
    X = np.atleast_2d(train_feats)
    Y = np.asarray(train_targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, p = Y.shape
    Knn = kernel.K(X, X) + kernel.noise_var * np.eye(n)
    L, _ = chol_jittered(Knn, 0.0)
    alpha = solve_triangular(L.T, solve_triangular(L, Y, lower=True), lower=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * np.sum(Y * alpha) - 0.5 * p * logdet
                 - 0.5 * n * p * np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# the sparse model
# ---------------------------------------------------------------------------

@dataclass
class SvgpModel:
    """Whitened sparse variational GP with an optional attached extractor."""

    kernel: RbfKernel
    Z: np.ndarray                 # (m, D) inducing inputs in feature space
    mu_w: np.ndarray              # (m, P) whitened variational means
    c_raw: np.ndarray             # (m, m) Cholesky storage, log diagonal
    y_mean: np.ndarray            # (P,) target normalisation
    y_scale: np.ndarray           # (P,)
    extractor: FeatureExtractor | None = None
    jitter: float = JITTER
    trained: bool = False

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.mu_w.shape[1]

    @property
    def C(self) -> np.ndarray:
        c = np.tril(self.c_raw, -1)
        c[np.diag_indices_from(c)] = np.exp(np.diag(self.c_raw))
        return c

    @staticmethod
    def c_raw_from_chol(C) -> np.ndarray:
        raw = np.tril(C, -1)
        raw[np.diag_indices_from(raw)] = np.log(np.diag(C))
        return raw

    def gp_params(self) -> dict:
        return {
            "mu_w": self.mu_w,
            "c_raw": self.c_raw,
            "Z": self.Z,
            "log_l": np.array(np.log(self.kernel.lengthscale)),
            "log_sf2": np.array(np.log(self.kernel.signal_var)),
            "log_s2": np.array(np.log(self.kernel.noise_var)),
        }

    def set_gp_params(self, params: dict) -> None:
        self.mu_w = params["mu_w"]
        self.c_raw = params["c_raw"]
        self.Z = params["Z"]
        self.kernel = RbfKernel(float(np.exp(params["log_l"])),
                                float(np.exp(params["log_sf2"])),
                                float(np.exp(params["log_s2"])))

    def normalize(self, targets):
        return (np.asarray(targets, dtype=float) - self.y_mean) / self.y_scale


@dataclass
class PosePrediction:
    """6-DOF pose distribution: Gaussian position plus mean orientation with
    a fixed orientation sampling spread."""

    position: np.ndarray
    cov: np.ndarray
    quat: np.ndarray
    rot_spread: np.ndarray = field(
        default_factory=lambda: np.array(DEFAULT_ROT_SPREAD))

    @property
    def uncertainty_magnitude(self) -> float:
        """L2 norm of the per-axis position variances."""
        return float(np.linalg.norm(np.diag(self.cov)))


def make_svgp(feats, targets, m, seed=0, lengthscale=None, signal_var=1.0,
              noise_var=0.05, jitter=JITTER, normalize=True,
              extractor=None) -> SvgpModel:
    """Assemble an untrained model: k-means inducing inputs, median-distance
    lengthscale, unit whitened covariance, zero means."""
    X = np.atleast_2d(np.asarray(feats, dtype=float))
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, p = Y.shape
    if m > n:
        raise InvalidArgumentError(f"m={m} inducing points exceed n={n} examples")
    if normalize:
        y_mean = Y.mean(axis=0)
        y_scale = np.maximum(Y.std(axis=0), 1e-3)
    else:
        y_mean = np.zeros(p)
        y_scale = np.ones(p)
    if lengthscale is None:
        rng = np.random.default_rng(seed)
        sub = X[rng.choice(n, size=min(n, 512), replace=False)]
        d2 = sqdist(sub, sub)
        med = np.median(d2[np.triu_indices_from(d2, 1)]) if len(sub) > 1 else 1.0
        lengthscale = float(np.sqrt(max(med, 1e-6)))
    if m == n:
        Z = X.copy()
    else:
        Z, _ = kmeans2(X, m, minit="++", seed=seed)
    return SvgpModel(
        kernel=RbfKernel(lengthscale, signal_var, noise_var),
        Z=np.asarray(Z, dtype=float),
        mu_w=np.zeros((m, p)),
        c_raw=np.zeros((m, m)),
        y_mean=y_mean,
        y_scale=y_scale,
        extractor=extractor,
        jitter=jitter,
    )


def optimal_variational(kernel: RbfKernel, Z, feats, targets_norm, jitter=JITTER):
    """Closed-form optimal whitened variational parameters for a Gaussian
    likelihood at fixed inducing inputs and hyperparameters.

    Returns (mu_w, C) with Sigma_w = (I + A A'/noise)^-1 and
    mu_w = Sigma_w A Y / noise, where A = L^-1 K_mn.
    """
    Y = np.asarray(targets_norm, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    L, _ = chol_jittered(kernel.K(Z, Z), jitter)
    A = solve_triangular(L, kernel.K(Z, feats), lower=True)
    M = np.eye(Z.shape[0]) + A @ A.T / kernel.noise_var
    Lm, _ = chol_jittered(M, 0.0)
    eye = np.eye(Z.shape[0])
    sigma_w = solve_triangular(Lm.T, solve_triangular(Lm, eye, lower=True),
                               lower=False)
    sigma_w = 0.5 * (sigma_w + sigma_w.T)
    mu_w = sigma_w @ (A @ Y) / kernel.noise_var
    C, _ = chol_jittered(sigma_w, 0.0)
    return mu_w, C


# ---------------------------------------------------------------------------
# evidence lower bound
# ---------------------------------------------------------------------------

def _elbo_core(model: SvgpModel, feats, targets, n_total, want_grads,
               want_x_grad=False):
    X = np.atleast_2d(np.asarray(feats, dtype=float))
    Y = model.normalize(targets)
    if Y.ndim == 1:
        Y = Y[:, None]
    b, p = Y.shape
    if b == 0:
        raise InvalidArgumentError("empty batch")
    scale = (n_total if n_total is not None else b) / b
    ker = model.kernel
    ell2 = ker.lengthscale**2
    s2 = ker.noise_var
    C = model.C
    mu = model.mu_w

    sq_mm = sqdist(model.Z, model.Z)
    K_mm = ker.signal_var * np.exp(-sq_mm / (2 * ell2))
    L, _ = chol_jittered(K_mm, model.jitter)
    sq_mb = sqdist(model.Z, X)
    K_mb = ker.signal_var * np.exp(-sq_mb / (2 * ell2))
    A = solve_triangular(L, K_mb, lower=True)          # (m, b)
    fbar = A.T @ mu                                    # (b, p)
    G = C.T @ A                                        # (m, b)
    kdiag = ker.Kdiag(X)
    v = kdiag - np.sum(A * A, axis=0) + np.sum(G * G, axis=0)
    r = Y - fbar
    ell = (-0.5 * b * p * np.log(2 * np.pi * s2)
           - (np.sum(r * r) + p * np.sum(v)) / (2 * s2))
    diag_c = np.diag(C)
    kl = 0.5 * (p * (np.sum(C * C) - model.m - 2 * np.sum(np.log(diag_c)))
                + np.sum(mu * mu))
    elbo_val = float(scale * ell - kl)
    if not want_grads:
        return elbo_val, None

    beta = -scale * p / (2 * s2)                       # d elbo / d v_i
    g_fbar = scale * r / s2                            # (b, p)
    g_mu = A @ g_fbar - mu
    g_G = 2 * beta * G
    g_C = A @ g_G.T - (p * C - p * np.diag(1.0 / diag_c))
    g_C = np.tril(g_C)
    g_craw = g_C.copy()
    g_craw[np.diag_indices_from(g_craw)] *= diag_c
    g_A = mu @ g_fbar.T - 2 * beta * A + C @ g_G
    Kbar_mb = solve_triangular(L.T, g_A, lower=False)
    Lbar = -Kbar_mb @ A.T
    Kbar_mm = chol_rev(L, Lbar)

    g_log_sf2 = (np.sum(Kbar_mm * K_mm) + np.sum(Kbar_mb * K_mb)
                 + beta * np.sum(kdiag))
    g_log_l = (np.sum(Kbar_mm * K_mm * sq_mm)
               + np.sum(Kbar_mb * K_mb * sq_mb)) / ell2
    g_log_s2 = scale * (-0.5 * b * p + (np.sum(r * r) + p * np.sum(v)) / (2 * s2))

    W_mb = Kbar_mb * K_mb / ell2
    S_mm = (Kbar_mm + Kbar_mm.T) * K_mm / ell2
    g_Z = (W_mb @ X - W_mb.sum(axis=1)[:, None] * model.Z
           + S_mm @ model.Z - S_mm.sum(axis=1)[:, None] * model.Z)

    grads = {
        "mu_w": g_mu,
        "c_raw": g_craw,
        "Z": g_Z,
        "log_l": np.array(g_log_l),
        "log_sf2": np.array(g_log_sf2),
        "log_s2": np.array(g_log_s2),
    }
    if want_x_grad:
        grads["X"] = W_mb.T @ model.Z - W_mb.sum(axis=0)[:, None] * X
    return elbo_val, grads


def elbo(model: SvgpModel, feats, targets, n_total=None) -> float:
    """Evidence lower bound on the batch, scaled to ``n_total`` examples."""
    val, _ = _elbo_core(model, feats, targets, n_total, want_grads=False)
    return val


def elbo_with_grads(model: SvgpModel, feats, targets, n_total=None,
                    want_x_grad=False):
    """ELBO and its gradients w.r.t. all GP parameters (and optionally the
    input features, for joint training through the extractor)."""
    return _elbo_core(model, feats, targets, n_total, True, want_x_grad)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class SvgpTrainConfig:
    m: int = 350
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-2
    lr_decay: float = 0.95
    lr_floor: float = 1e-7
    discount_heads: float = 0.1
    discount_trunk: float = 0.01
    freeze_trunk: bool = True
    optimizer: str = "adam"
    jitter: float = JITTER
    noise_var: float = 0.05
    warm_start: bool = True


def _rotation_head_grads(extractor: FeatureExtractor, feats, q_gt):
    """Angular-distance loss over a batch plus its head gradients; also
    returns the feature gradient for unfrozen-trunk training."""
    q_raw = feats @ extractor.params["Wr"].T + extractor.params["br"]
    norms = np.linalg.norm(q_raw, axis=1, keepdims=True)
    r_hat = q_raw / norms
    s = np.sum(r_hat * q_gt, axis=1)
    loss = float(np.mean(1.0 - s * s))
    b = len(feats)
    g_unit = -2.0 * s[:, None] * q_gt / b
    g_raw = (g_unit - r_hat * np.sum(r_hat * g_unit, axis=1, keepdims=True)) / norms
    grads = {"Wr": g_raw.T @ feats, "br": g_raw.sum(axis=0)}
    g_feat = g_raw @ extractor.params["Wr"]
    return loss, grads, g_feat


def train_svgp(model: SvgpModel, feats, targets, cfg: SvgpTrainConfig | None = None,
               seed=0, quats=None, inputs=None):
    """Minibatch ELBO ascent over the GP parameters.

    When ``quats`` is given and an extractor is attached, the rotation head
    keeps training with the angular-distance loss at a discounted learning
    rate. With ``cfg.freeze_trunk`` false and ``inputs`` (flattened extractor
    inputs) given, ELBO and rotation gradients also flow through the trunk
    at a further discounted rate. Returns (model, per-epoch mean ELBO).
    """
    cfg = cfg or SvgpTrainConfig()
    X = np.atleast_2d(np.asarray(feats, dtype=float))
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n <= cfg.batch_size:
        raise InvalidArgumentError(
            f"dataset ({n}) must be larger than the batch size ({cfg.batch_size})")
    rng = np.random.default_rng(seed)
    joint = (not cfg.freeze_trunk) and inputs is not None and model.extractor is not None
    if cfg.warm_start:
        model.mu_w, C0 = optimal_variational(model.kernel, model.Z, X,
                                             model.normalize(Y), model.jitter)
        model.c_raw = SvgpModel.c_raw_from_chol(C0)
    gp_opt = Optimizer(cfg.optimizer)
    head_opt = Optimizer(cfg.optimizer) if quats is not None and model.extractor else None
    curve = []
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg.lr, cfg.lr_decay, cfg.lr_floor, epoch)
        order = rng.permutation(n)
        vals = []
        for s in range(0, n, cfg.batch_size):
            rows = order[s:s + cfg.batch_size]
            if joint:
                cache = model.extractor.forward(inputs[rows])
                bx = cache["feat"]
            else:
                bx = X[rows]
            val, grads = elbo_with_grads(model, bx, Y[rows], n_total=n,
                                         want_x_grad=joint)
            vals.append(val)
            g_feat = grads.pop("X", None)
            params = model.gp_params()
            gp_opt.step(params, {k: -g for k, g in grads.items()}, lr)
            model.set_gp_params(params)
            if head_opt is not None:
                _, hgrads, hg_feat = _rotation_head_grads(model.extractor, bx,
                                                          quats[rows])
                if joint:
                    tg, _ = model.extractor.backward(
                        cache, np.zeros((len(rows), 3)), np.zeros((len(rows), 4)),
                        g_feat=hg_feat - g_feat)
                    trunk_keys = model.extractor.param_group("trunk")
                    hgrads.update({k: tg[k] for k in trunk_keys})
                    scales = {k: cfg.discount_trunk for k in trunk_keys}
                    scales.update({"Wr": cfg.discount_heads, "br": cfg.discount_heads})
                    head_opt.step(model.extractor.params, hgrads, lr, scales)
                else:
                    head_opt.step(model.extractor.params, hgrads,
                                  lr * cfg.discount_heads)
        curve.append(float(np.mean(vals)))
    model.trained = True
    return model, curve


# ---------------------------------------------------------------------------
# prediction and sampling
# ---------------------------------------------------------------------------

def predict_features(model: SvgpModel, feats):
    """Posterior mean (q,P) in target units and per-output variances (q,P)."""
    X = np.atleast_2d(np.asarray(feats, dtype=float))
    ker = model.kernel
    L, _ = chol_jittered(ker.K(model.Z, model.Z), model.jitter)
    A = solve_triangular(L, ker.K(model.Z, X), lower=True)
    mean_norm = A.T @ model.mu_w
    G = model.C.T @ A
    v = ker.Kdiag(X) - np.sum(A * A, axis=0) + np.sum(G * G, axis=0)
    v = np.maximum(v, 1e-12)
    mean = mean_norm * model.y_scale + model.y_mean
    var = v[:, None] * model.y_scale**2
    return mean, var


def predict(model: SvgpModel, img: BevImage,
            rot_spread=DEFAULT_ROT_SPREAD) -> PosePrediction:
    """Pose distribution for one BEV image: GP position posterior with the
    rotation head's quaternion and a fixed orientation spread."""
    if not model.trained:
        raise InvalidStateError("predict() requires a trained model")
    if model.extractor is None:
        raise InvalidStateError("predict() requires an attached extractor")
    feat, _, r_hat = model.extractor.extract(img)
    mean, var = predict_features(model, feat[None])
    return PosePrediction(mean[0], np.diag(var[0]), r_hat,
                          np.asarray(rot_spread, dtype=float))


def sample_poses(pred: PosePrediction, n: int, seed=0, rot_spread=None):
    """Draw n poses: positions from the Gaussian, orientations from the mean
    quaternion perturbed by per-axis Euler noise. Returns (positions (n,3),
    quats (n,4))."""
    if n < 1:
        raise InvalidArgumentError("need at least one sample")
    rng = np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(0.5 * (pred.cov + pred.cov.T))
    root = vecs * np.sqrt(np.maximum(vals, 0.0))
    positions = pred.position + rng.standard_normal((n, 3)) @ root.T
    spread = pred.rot_spread if rot_spread is None else np.asarray(rot_spread, dtype=float)
    e = rng.standard_normal((n, 3)) * np.sqrt(spread)
    dq = geom.quat_from_euler(e[:, 0], e[:, 1], e[:, 2])
    quats = geom.quat_multiply(np.broadcast_to(pred.quat, (n, 4)), dq)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return positions, quats


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

def save_model(model: SvgpModel, path) -> None:
    ex_blob = model.extractor.to_bytes() if model.extractor is not None else b""
    m, d = model.Z.shape
    p = model.n_outputs
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", MAGIC, VERSION, len(ex_blob)))
        fh.write(ex_blob)
        fh.write(struct.pack("<IIIB", m, d, p, 1 if model.trained else 0))
        fh.write(struct.pack("<4d", model.kernel.lengthscale,
                             model.kernel.signal_var, model.kernel.noise_var,
                             model.jitter))
        for arr in (model.Z, model.mu_w, model.c_raw, model.y_mean, model.y_scale):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> SvgpModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.Struct("<4sIQ")
    if len(raw) < head.size:
        raise FormatError(f"{path}: truncated model file")
    magic, version, ex_len = head.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: model version {version}, expected {VERSION}")
    off = head.size
    extractor = None
    if ex_len:
        extractor = FeatureExtractor.from_bytes(raw[off:off + ex_len], str(path))
        off += ex_len
    m, d, p, trained = struct.unpack_from("<IIIB", raw, off)
    off += struct.calcsize("<IIIB")
    ell, sf2, s2, jitter = struct.unpack_from("<4d", raw, off)
    off += 32

    def take(shape):
        nonlocal off
        cnt = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shape)
        off += 8 * cnt
        return arr.astype(float)

    try:
        Z = take((m, d))
        mu_w = take((m, p))
        c_raw = take((m, m))
        y_mean = take((p,))
        y_scale = take((p,))
    except ValueError as exc:
        raise FormatError(f"{path}: truncated model arrays") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return SvgpModel(RbfKernel(ell, sf2, s2), Z, mu_w, c_raw, y_mean, y_scale,
                     extractor=extractor, jitter=jitter, trained=bool(trained))
