"""Learnable feature extractor: a small MLP over downsampled BEV images with
a position head, a quaternion head, and a shared trunk feature used as the
GP kernel input.

Everything is plain numpy with hand-derived gradients; tests check every
gradient against central finite differences. Losses accept raw (not
necessarily unit) quaternion predictions and normalise internally so the
whole objective is differentiable in the raw head outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import FormatError, InvalidArgumentError
from .observation import BevImage

MAGIC = b"HLWT"
VERSION = 1


# ---------------------------------------------------------------------------
# image downsampling
# ---------------------------------------------------------------------------

def downsample_bilinear(cells: np.ndarray, out_px: int) -> np.ndarray:
    """Bilinear resize of one (S,S) image to (out_px, out_px)."""
    cells = np.asarray(cells, dtype=float)
    src = cells.shape[0]
    if src == out_px:
        return cells.copy()
    scale = src / out_px
    pos = np.clip((np.arange(out_px) + 0.5) * scale - 0.5, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = cells[i0][:, :] * (1 - frac)[:, None] + cells[i1][:, :] * frac[:, None]
    out = rows[:, i0] * (1 - frac)[None, :] + rows[:, i1] * frac[None, :]
    return out


def gaussian_blur(cells: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with reflect padding.

    Spreads sparse occupancy over neighbouring pixels so that small pose
    shifts become small input changes instead of disjoint patterns.
    """
    if sigma <= 0:
        return np.asarray(cells, dtype=float)
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(np.asarray(cells, dtype=float), radius, mode="reflect")
    rows = np.apply_along_axis(lambda v: np.convolve(v, kernel, "valid"), 1, padded)
    return np.apply_along_axis(lambda v: np.convolve(v, kernel, "valid"), 0, rows)


def preprocess_image(cells: np.ndarray, input_px: int, blur_px: float) -> np.ndarray:
    """Model input pipeline: bilinear downsample, then Gaussian blur."""
    return gaussian_blur(downsample_bilinear(cells, input_px), blur_px)


# ---------------------------------------------------------------------------
# quaternion calculus helpers
# ---------------------------------------------------------------------------

def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _rotate_jac(q, u):
    """d(rotate(q, u))/dq for the unnormalised rotation expression, (3,4)."""
    s = q[:3]
    w = q[3]
    su = np.cross(s, u)
    jac_s = 2.0 * (-w * _skew(u) - _skew(s) @ _skew(u) - _skew(su))
    jac_w = 2.0 * su
    return np.concatenate([jac_s, jac_w[:, None]], axis=1)


def _left_prod_mat(q):
    """L(q) with q * p = L(q) p, quaternions in xyzw order."""
    x, y, z, w = q
    return np.array(
        [
            [w, -z, y, x],
            [z, w, -x, y],
            [-y, x, w, z],
            [-x, -y, -z, w],
        ]
    )


def _right_prod_mat(p):
    """R(p) with q * p = R(p) q."""
    x, y, z, w = p
    return np.array(
        [
            [w, z, -y, x],
            [-z, w, x, y],
            [y, -x, w, z],
            [-x, -y, -z, w],
        ]
    )


_CONJ = np.diag([-1.0, -1.0, -1.0, 1.0])


def _normalize_with_grad(q_raw, grad_unit):
    """Pull a gradient w.r.t. the unit quaternion back to the raw vector."""
    n = np.linalg.norm(q_raw)
    q = q_raw / n
    return (grad_unit - q * np.dot(q, grad_unit)) / n


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pose_loss(p_hat, q_hat, p_gt, q_gt, lam=1.0) -> float:
    """Positional L2 distance plus lam * (1 - <r_hat, r_gt>^2).

    ``q_hat`` may be un-normalised (it is normalised internally); ``q_gt``
    must be unit. Zero iff positions match and rotations agree up to sign.
    """
    u = np.asarray(p_hat, dtype=float) - np.asarray(p_gt, dtype=float)
    r_hat = geom.quat_normalize(q_hat)
    s = float(np.dot(r_hat, q_gt))
    return float(np.linalg.norm(u) + lam * (1.0 - s * s))


def pose_loss_grad(p_hat, q_hat, p_gt, q_gt, lam=1.0):
    """Analytic (d/dp_hat, d/dq_hat) of :func:`pose_loss`; the quaternion
    gradient is w.r.t. the raw (pre-normalisation) prediction."""
    u = np.asarray(p_hat, dtype=float) - np.asarray(p_gt, dtype=float)
    n = np.linalg.norm(u)
    gp = u / n if n > 1e-12 else np.zeros(3)
    r_hat = geom.quat_normalize(q_hat)
    s = float(np.dot(r_hat, q_gt))
    g_unit = -2.0 * lam * s * np.asarray(q_gt, dtype=float)
    gq = _normalize_with_grad(np.asarray(q_hat, dtype=float), g_unit)
    return gp, gq


def _relative(p_a, q_a, p_b, q_b):
    """Relative pose (B in A's frame) of two unit-quaternion poses."""
    qc = geom.quat_conjugate(q_a)
    return geom.quat_rotate(qc, p_b - p_a), geom.quat_multiply(qc, q_b)


def consistency_loss(p_a, q_a, p_b, q_b, p_ga, q_ga, p_gb, q_gb, lam=1.0) -> float:
    """Pose loss between predicted and ground-truth relative transforms.

    Invariant to a common rigid transform applied to both predictions, which
    is what makes it useful as an auxiliary: only the relative motion is
    penalised. Predicted quaternions may be un-normalised.
    """
    qa = geom.quat_normalize(q_a)
    qb = geom.quat_normalize(q_b)
    pd, qd = _relative(np.asarray(p_a, dtype=float), qa,
                       np.asarray(p_b, dtype=float), qb)
    pgd, qgd = _relative(np.asarray(p_ga, dtype=float), np.asarray(q_ga, dtype=float),
                         np.asarray(p_gb, dtype=float), np.asarray(q_gb, dtype=float))
    return pose_loss(pd, qd, pgd, qgd, lam)


def consistency_loss_grad(p_a, q_a, p_b, q_b, p_ga, q_ga, p_gb, q_gb, lam=1.0):
    """Analytic gradients of :func:`consistency_loss` w.r.t. the four
    prediction inputs (quaternion gradients w.r.t. the raw vectors)."""
    p_a = np.asarray(p_a, dtype=float)
    p_b = np.asarray(p_b, dtype=float)
    q_a_raw = np.asarray(q_a, dtype=float)
    q_b_raw = np.asarray(q_b, dtype=float)
    qa = geom.quat_normalize(q_a_raw)
    qb = geom.quat_normalize(q_b_raw)
    qac = geom.quat_conjugate(qa)
    w = p_b - p_a
    pd = geom.quat_rotate(qac, w)
    qd = geom.quat_multiply(qac, qb)
    pgd, qgd = _relative(np.asarray(p_ga, dtype=float), np.asarray(q_ga, dtype=float),
                         np.asarray(p_gb, dtype=float), np.asarray(q_gb, dtype=float))
    gpd, gqd = pose_loss_grad(pd, qd, pgd, qgd, lam)

    # translation path: pd = rotate(conj(qa), p_b - p_a)
    rot_qac = geom.quat_to_matrix(qac)
    gp_b = rot_qac.T @ gpd
    gp_a = -gp_b
    gqa_unit = _CONJ @ _rotate_jac(qac, w).T @ gpd
    # rotation path: qd = conj(qa) * qb
    gqb_unit = _left_prod_mat(qac).T @ gqd
    gqa_unit = gqa_unit + _CONJ @ _right_prod_mat(qb).T @ gqd
    gq_a = _normalize_with_grad(q_a_raw, gqa_unit)
    gq_b = _normalize_with_grad(q_b_raw, gqb_unit)
    return gp_a, gq_a, gp_b, gq_b


# ---------------------------------------------------------------------------
# the extractor
# ---------------------------------------------------------------------------

TRUNK = "trunk"
HEADS = "heads"


class FeatureExtractor:
    """MLP trunk (input -> hidden ... -> D, tanh) with linear position and
    quaternion heads off the trunk feature.

    Position-head outputs live in normalised units and are mapped to metres
    through (pos_offset, pos_scale), which :func:`train` fits to the dataset
    so head weights stay O(1). The trunk feature is the GP kernel input.
    """

    def __init__(self, params, image_px, input_px, input_blur=0.0,
                 pos_offset=None, pos_scale=None):
        self.params = params
        self.image_px = int(image_px)
        self.input_px = int(input_px)
        self.input_blur = float(input_blur)
        self.pos_offset = np.zeros(3) if pos_offset is None else np.asarray(pos_offset, dtype=float)
        self.pos_scale = np.ones(3) if pos_scale is None else np.asarray(pos_scale, dtype=float)

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, image_px=188, input_px=64, layer_sizes=(512, 256),
               feature_dim=128, input_blur=0.0, seed=0) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        sizes = [input_px * input_px, *layer_sizes, feature_dim]
        params = {}
        for i in range(len(sizes) - 1):
            params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(sizes[i]),
                                         size=(sizes[i + 1], sizes[i]))
            params[f"b{i}"] = np.zeros(sizes[i + 1])
        d = feature_dim
        params["Wp"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(3, d))
        params["bp"] = np.zeros(3)
        params["Wr"] = rng.normal(0.0, 0.1 / np.sqrt(d), size=(4, d))
        params["br"] = np.array([0.0, 0.0, 0.0, 1.0])
        return cls(params, image_px, input_px, input_blur)

    @property
    def n_trunk_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("W") and k[1:].isdigit())

    @property
    def feature_dim(self) -> int:
        return self.params["Wp"].shape[1]

    def param_group(self, name: str):
        if name == TRUNK:
            return [k for k in self.params if k[1:].isdigit()]
        if name == HEADS:
            return ["Wp", "bp", "Wr", "br"]
        raise InvalidArgumentError(f"unknown parameter group {name!r}")

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray):
        """Forward pass on flattened inputs (B, input_px^2); returns a cache
        with activations, trunk features, and both head outputs."""
        acts = [x]
        h = x
        for i in range(self.n_trunk_layers):
            h = np.tanh(h @ self.params[f"W{i}"].T + self.params[f"b{i}"])
            acts.append(h)
        p_head = h @ self.params["Wp"].T + self.params["bp"]
        q_raw = h @ self.params["Wr"].T + self.params["br"]
        return {
            "acts": acts,
            "feat": h,
            "p_head": p_head,
            "p_hat": p_head * self.pos_scale + self.pos_offset,
            "q_raw": q_raw,
            "r_hat": q_raw / np.linalg.norm(q_raw, axis=-1, keepdims=True),
        }

    def backward(self, cache, gp_hat, gq_raw, g_feat=None):
        """Accumulate parameter gradients from head-output gradients.

        gp_hat: (B,3) gradient w.r.t. de-normalised positions. gq_raw:
        (B,4) gradient w.r.t. raw quaternion outputs. g_feat: optional
        (B,D) extra gradient flowing directly into the trunk feature.
        Returns (grads dict, gx) with gx the input gradient.
        """
        acts = cache["acts"]
        feat = cache["feat"]
        grads = {}
        gp_head = gp_hat * self.pos_scale
        grads["Wp"] = gp_head.T @ feat
        grads["bp"] = gp_head.sum(axis=0)
        grads["Wr"] = gq_raw.T @ feat
        grads["br"] = gq_raw.sum(axis=0)
        gh = gp_head @ self.params["Wp"] + gq_raw @ self.params["Wr"]
        if g_feat is not None:
            gh = gh + g_feat
        for i in range(self.n_trunk_layers - 1, -1, -1):
            gz = gh * (1.0 - acts[i + 1] ** 2)
            grads[f"W{i}"] = gz.T @ acts[i]
            grads[f"b{i}"] = gz.sum(axis=0)
            gh = gz @ self.params[f"W{i}"]
        return grads, gh

    # -- inference ----------------------------------------------------------

    def _flatten(self, images: np.ndarray) -> np.ndarray:
        out = np.stack([preprocess_image(img, self.input_px, self.input_blur)
                        for img in images])
        return out.reshape(len(images), -1)

    def extract_batch(self, images: np.ndarray):
        images = np.asarray(images, dtype=float)
        if images.shape[-1] != self.image_px:
            raise InvalidArgumentError(
                f"extractor expects {self.image_px}px images, got {images.shape[-1]}"
            )
        cache = self.forward(self._flatten(images))
        return cache["feat"], cache["p_hat"], cache["r_hat"]

    def extract(self, img: BevImage):
        """Feature vector, predicted position (m), and unit quaternion for
        one BEV image."""
        feats, ps, rs = self.extract_batch(img.cells[None])
        return feats[0], ps[0], rs[0]

    # -- weights file -------------------------------------------------------

    def _blocks(self):
        keys = []
        for i in range(self.n_trunk_layers):
            keys += [f"W{i}", f"b{i}"]
        keys += ["Wp", "bp", "Wr", "br"]
        return keys

    def to_bytes(self) -> bytes:
        sizes = [self.params["W0"].shape[1]] + [
            self.params[f"W{i}"].shape[0] for i in range(self.n_trunk_layers)
        ]
        out = [struct.pack("<4sIIIId", MAGIC, VERSION, self.image_px,
                           self.input_px, len(sizes), self.input_blur),
               struct.pack(f"<{len(sizes)}I", *sizes)]
        for key in self._blocks():
            out.append(np.ascontiguousarray(self.params[key], dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(self.pos_offset, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(self.pos_scale, dtype="<f8").tobytes())
        return b"".join(out)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_bytes(raw, path)

    @classmethod
    def from_bytes(cls, raw: bytes, label="weights") -> "FeatureExtractor":
        head = struct.Struct("<4sIIIId")
        if len(raw) < head.size:
            raise FormatError(f"{label}: truncated weights file")
        magic, version, image_px, input_px, n_sizes, input_blur = head.unpack_from(raw, 0)
        if magic != MAGIC:
            raise FormatError(f"{label}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{label}: weights version {version}, expected {VERSION}")
        off = head.size
        sizes = struct.unpack_from(f"<{n_sizes}I", raw, off)
        off += 4 * n_sizes
        params = {}

        def take(shape):
            nonlocal off
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            return arr.astype(float)

        try:
            for i in range(n_sizes - 1):
                params[f"W{i}"] = take((sizes[i + 1], sizes[i]))
                params[f"b{i}"] = take((sizes[i + 1],))
            d = sizes[-1]
            params["Wp"] = take((3, d))
            params["bp"] = take((3,))
            params["Wr"] = take((4, d))
            params["br"] = take((4,))
            pos_offset = take((3,))
            pos_scale = take((3,))
        except ValueError as exc:
            raise FormatError(f"{label}: truncated weight blocks") from exc
        if off != len(raw):
            raise FormatError(f"{label}: {len(raw) - off} trailing bytes")
        return cls(params, image_px, input_px, input_blur, pos_offset, pos_scale)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    """Flattened inputs with pose targets and frame-pair indices.

    ``x`` is (N, input_px^2) pre-downsampled; ``pairs`` rows index (earlier,
    later) frames within the superimposition window.
    """

    x: np.ndarray
    positions: np.ndarray
    quats: np.ndarray
    pairs: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class FeatureTrainConfig:
    epochs: int = 200
    batch_pairs: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.95
    lr_floor: float = 1e-7
    grad_clip: float = 5.0
    lam: float = 1.0
    consistency_weight: float = 1.0
    optimizer: str = "momentum"
    momentum: float = 0.9
    input_noise: float = 0.05  # train-time pixel jitter, smooths the map


def schedule_lr(lr0: float, decay: float, floor: float, epoch: int) -> float:
    """Exponentially decayed learning rate, floored."""
    return max(lr0 * decay**epoch, floor)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for key in grads:
            grads[key] = grads[key] * scale
    return total


def pose_objective(extractor: FeatureExtractor, tset: TrainingSet, rows,
                   lam=1.0):
    """Mean pose loss over individual entries plus parameter gradients."""
    rows = np.asarray(rows)
    cache = extractor.forward(tset.x[rows])
    p_hat = cache["p_hat"]
    q_raw = cache["q_raw"]
    gp_out = np.zeros_like(p_hat)
    gq_out = np.zeros_like(q_raw)
    total = 0.0
    for r, gt_i in enumerate(rows):
        total += pose_loss(p_hat[r], q_raw[r], tset.positions[gt_i],
                           tset.quats[gt_i], lam)
        dgp, dgq = pose_loss_grad(p_hat[r], q_raw[r], tset.positions[gt_i],
                                  tset.quats[gt_i], lam)
        gp_out[r] = dgp
        gq_out[r] = dgq
    n = len(rows)
    grads, _ = extractor.backward(cache, gp_out / n, gq_out / n)
    return total / n, grads


def consistency_objective(extractor: FeatureExtractor, tset: TrainingSet,
                          pair_rows, lam=1.0):
    """Mean relative-transform consistency loss over pairs plus gradients."""
    pairs = tset.pairs[np.asarray(pair_rows)]
    idx = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cache = extractor.forward(tset.x[idx])
    b = len(pairs)
    p_hat = cache["p_hat"]
    q_raw = cache["q_raw"]
    gp_out = np.zeros_like(p_hat)
    gq_out = np.zeros_like(q_raw)
    total = 0.0
    for k in range(b):
        ia, ib = pairs[k]
        ra, rb = k, k + b
        args = (p_hat[ra], q_raw[ra], p_hat[rb], q_raw[rb],
                tset.positions[ia], tset.quats[ia],
                tset.positions[ib], tset.quats[ib], lam)
        total += consistency_loss(*args)
        ga_p, ga_q, gb_p, gb_q = consistency_loss_grad(*args)
        gp_out[ra] += ga_p
        gq_out[ra] += ga_q
        gp_out[rb] += gb_p
        gq_out[rb] += gb_q
    grads, _ = extractor.backward(cache, gp_out / b, gq_out / b)
    return total / b, grads


def pair_objective(extractor: FeatureExtractor, tset: TrainingSet, pair_rows,
                   lam=1.0, consistency_weight=1.0):
    """Mean training loss over the given pair rows plus parameter gradients.

    Per pair: pose loss at both frames plus the weighted relative-transform
    consistency loss; the mean over pairs is returned.
    """
    pairs = tset.pairs[pair_rows]
    idx = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cache = extractor.forward(tset.x[idx])
    b = len(pairs)
    p_hat = cache["p_hat"]
    q_raw = cache["q_raw"]
    gp = np.zeros_like(p_hat)
    gq = np.zeros_like(q_raw)
    total = 0.0
    for row in range(2 * b):
        gt_i = idx[row]
        total += pose_loss(p_hat[row], q_raw[row], tset.positions[gt_i],
                           tset.quats[gt_i], lam)
        dgp, dgq = pose_loss_grad(p_hat[row], q_raw[row], tset.positions[gt_i],
                                  tset.quats[gt_i], lam)
        gp[row] += dgp
        gq[row] += dgq
    if consistency_weight > 0:
        for k in range(b):
            ia, ib = pairs[k]
            ra, rb = k, k + b
            args = (p_hat[ra], q_raw[ra], p_hat[rb], q_raw[rb],
                    tset.positions[ia], tset.quats[ia],
                    tset.positions[ib], tset.quats[ib], lam)
            total += consistency_weight * consistency_loss(*args)
            ga_p, ga_q, gb_p, gb_q = consistency_loss_grad(*args)
            gp[ra] += consistency_weight * ga_p
            gq[ra] += consistency_weight * ga_q
            gp[rb] += consistency_weight * gb_p
            gq[rb] += consistency_weight * gb_q
    total /= b
    grads, _ = extractor.backward(cache, gp / b, gq / b)
    return total, grads


class Optimizer:
    """Momentum SGD or Adam over a dict of parameter arrays."""

    def __init__(self, kind: str, momentum=0.9):
        if kind not in ("momentum", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.momentum = momentum
        self.state: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, lr_scale=None) -> None:
        self.t += 1
        for key, g in grads.items():
            eff = lr if lr_scale is None else lr * lr_scale.get(key, 1.0)
            if self.kind == "momentum":
                v = self.state.setdefault(key, np.zeros_like(g))
                v *= self.momentum
                v -= eff * g
                params[key] = params[key] + v
            else:
                m = self.state.setdefault(key + "/m", np.zeros_like(g))
                v = self.state.setdefault(key + "/v", np.zeros_like(g))
                m += (1 - 0.9) * (g - m)
                v += (1 - 0.999) * (g * g - v)
                mhat = m / (1 - 0.9**self.t)
                vhat = v / (1 - 0.999**self.t)
                params[key] = params[key] - eff * mhat / (np.sqrt(vhat) + 1e-8)


def train(extractor: FeatureExtractor, tset: TrainingSet,
          cfg: FeatureTrainConfig | None = None, seed=0):
    """Stage-1 training: pose loss swept over every entry, consistency loss
    over the frame pairs, interleaved within each epoch.

    Deterministic per seed. Fits the position-output normalisation to the
    dataset, applies exponential lr decay and global gradient-norm clipping,
    and returns the extractor plus the per-epoch mean loss curve (mean pose
    loss plus weighted mean consistency loss).
    """
    if len(tset) == 0:
        raise InvalidArgumentError("training set is empty")
    cfg = cfg or FeatureTrainConfig()
    extractor.pos_offset = tset.positions.mean(axis=0)
    extractor.pos_scale = np.maximum(tset.positions.std(axis=0), 0.05)
    rng = np.random.default_rng(seed)
    opt = Optimizer(cfg.optimizer, cfg.momentum)
    n_rows = len(tset)
    n_pairs = len(tset.pairs)
    batch_rows = 2 * cfg.batch_pairs
    use_pairs = cfg.consistency_weight > 0 and n_pairs > 0
    curve = []
    clean_x = tset.x
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg.lr, cfg.lr_decay, cfg.lr_floor, epoch)
        if cfg.input_noise > 0:
            tset = TrainingSet(
                clean_x + rng.normal(0.0, cfg.input_noise, size=clean_x.shape),
                tset.positions, tset.quats, tset.pairs)
        row_order = rng.permutation(n_rows)
        pair_order = rng.permutation(n_pairs) if use_pairs else np.zeros(0, int)
        pose_batches = [row_order[s:s + batch_rows]
                        for s in range(0, n_rows, batch_rows)]
        cons_batches = [pair_order[s:s + cfg.batch_pairs]
                        for s in range(0, n_pairs, cfg.batch_pairs)] if use_pairs else []
        pose_losses, cons_losses = [], []
        steps = [("pose", b) for b in pose_batches] + [("cons", b) for b in cons_batches]
        for kind, rows in steps:
            if kind == "pose":
                loss, grads = pose_objective(extractor, tset, rows, cfg.lam)
                pose_losses.append(loss)
            else:
                loss, grads = consistency_objective(extractor, tset, rows, cfg.lam)
                cons_losses.append(loss)
                for key in grads:
                    grads[key] = grads[key] * cfg.consistency_weight
            clip_gradients(grads, cfg.grad_clip)
            opt.step(extractor.params, grads, lr)
        epoch_loss = float(np.mean(pose_losses))
        if cons_losses:
            epoch_loss += cfg.consistency_weight * float(np.mean(cons_losses))
        curve.append(epoch_loss)
    return extractor, curve
