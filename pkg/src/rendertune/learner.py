"""The downstream task model: a small classifier/localizer with a smooth
loss, deterministic mini-batch training, and validation metrics.

Three model kinds share one parameter-vector layout contract:

  mlp              tanh (default) two-layer perceptron; cross-entropy over
                   classes plus an optional squared-error box-center head.
  linear           convex softmax regression; the exact-inner-solve oracle
                   path used by hypergradient correctness tests.
  quadratic_proxy  loss(x, theta) = 0.5 * ||theta - x||^2; the closed-form
                   bilevel test problem.

The loss is C2 in (theta, pixels) with the tanh head, which the mixed
second derivative of the hypergradient requires; relu is available behind
the activation flag for robustness experiments. Losses are built through
the autodiff ops so the same code produces plain values, gradients, and the
Hessian-vector products consumed by the conjugate-gradient solver. Training
batches enter the tape as constant data matrices (one matvec per hidden
unit), never per-example subgraphs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, grad, matvec
from .renderer import RenderedExample

CHECKPOINT_MAGIC = b"RTCKPT1\n"

__all__ = [
    "LearnerSpec",
    "ModelParams",
    "Dataset",
    "DivergenceError",
    "TrainResult",
    "init_params",
    "loss",
    "example_loss_expr",
    "dataset_loss_builder",
    "mean_loss",
    "train",
    "train_to_convergence",
    "val_loss",
    "val_grad",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
]


class DivergenceError(RuntimeError):
    """Inner training diverged (loss blew past the abort threshold)."""


@dataclass(frozen=True)
class LearnerSpec:
    input_dim: int
    classes: int = 2
    hidden: int = 8
    kind: str = "mlp"            # mlp | linear | quadratic_proxy
    activation: str = "tanh"     # tanh | relu
    box_head: bool = False
    box_weight: float = 0.5
    freeze_backbone: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mlp", "linear", "quadratic_proxy"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs at least one hidden unit")
        if self.freeze_backbone and self.kind != "mlp":
            raise ValueError("only the mlp has a backbone to freeze")

    # -- flat parameter layout -----------------------------------------------

    @property
    def m(self) -> int:
        d, h, c = self.input_dim, self.hidden, self.classes
        if self.kind == "quadratic_proxy":
            return d
        if self.kind == "linear":
            base = c * d + c
            return base + (2 * d + 2 if self.box_head else 0)
        base = h * d + h + c * h + c
        return base + (2 * h + 2 if self.box_head else 0)

    @property
    def head_offset(self) -> int:
        """Start of the classifier head in the flat vector (mlp only)."""
        return self.hidden * self.input_dim + self.hidden

    def trainable_range(self) -> tuple[int, int]:
        if self.freeze_backbone:
            return self.head_offset, self.m
        return 0, self.m

    @property
    def m_trainable(self) -> int:
        a, b = self.trainable_range()
        return b - a


@dataclass
class ModelParams:
    theta: np.ndarray
    spec: LearnerSpec

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.spec.m,):
            raise ValueError(f"theta has length {self.theta.shape}, spec needs {self.spec.m}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite values")


def init_params(spec: LearnerSpec, rng_seed: int = 0, scale: float = 0.1) -> ModelParams:
    rng = np.random.default_rng(rng_seed)
    return ModelParams(scale * rng.normal(size=spec.m), spec)


@dataclass
class Dataset:
    examples: list
    role: str = "train"

    def __post_init__(self):
        if not self.examples:
            raise ValueError("dataset is empty")
        d0 = self._pixels(self.examples[0]).shape[0]
        if any(self._pixels(e).shape[0] != d0 for e in self.examples):
            raise ValueError("inconsistent image dimensions in dataset")
        self._cache = None

    @staticmethod
    def _pixels(e):
        return e.pixels if isinstance(e, RenderedExample) else np.asarray(e[0])

    def __len__(self):
        return len(self.examples)

    @property
    def arrays(self):
        """(X, classes, centers) matrices cached for batched losses."""
        if self._cache is None:
            X = np.stack([self._pixels(e) for e in self.examples])
            ys = np.array([_class_of(e) for e in self.examples], dtype=np.int64)
            centers = np.stack([_center_of(e) for e in self.examples])
            self._cache = (X, ys, centers)
        return self._cache


def _class_of(e) -> int:
    return e.label.class_id if isinstance(e, RenderedExample) else int(e[1])


def _center_of(e) -> np.ndarray:
    if not isinstance(e, RenderedExample) or e.label.box is None:
        return np.zeros(2)
    c0, r0, c1, r1 = e.label.box
    res = int(round(np.sqrt(e.pixels.shape[0])))
    cx = ((c0 + c1) / 2 + 0.5) * 2.0 / res - 1.0
    cy = ((r0 + r1) / 2 + 0.5) * 2.0 / res - 1.0
    return np.array([cx, cy])


# --------------------------------------------------------------------------
# loss construction


def _act(spec, z):
    return ad.tanh(z) if spec.activation == "tanh" else ad.relu(z)


def _emax(a, b):
    """Elementwise maximum via relu (keeps batched logsumexp stable)."""
    return a + ad.relu(b - a)


def _theta_views(spec: LearnerSpec, theta):
    """Slice the flat vector into named pieces (generic over Var/ndarray)."""
    d, h, c = spec.input_dim, spec.hidden, spec.classes
    views = {}
    if spec.kind == "quadratic_proxy":
        return views
    if spec.kind == "linear":
        views["w"] = [ad.narrow(theta, i * d, (i + 1) * d) for i in range(c)]
        views["b"] = ad.narrow(theta, c * d, c * d + c)
        off = c * d + c
        if spec.box_head:
            views["wb"] = [ad.narrow(theta, off + i * d, off + (i + 1) * d) for i in range(2)]
            views["bb"] = ad.narrow(theta, off + 2 * d, off + 2 * d + 2)
        return views
    views["w1"] = [ad.narrow(theta, j * d, (j + 1) * d) for j in range(h)]
    views["b1"] = ad.narrow(theta, h * d, h * d + h)
    off = spec.head_offset
    views["w2"] = [ad.narrow(theta, off + i * h, off + (i + 1) * h) for i in range(c)]
    views["b2"] = ad.narrow(theta, off + c * h, off + c * h + c)
    off2 = off + c * h + c
    if spec.box_head:
        views["wb"] = [ad.narrow(theta, off2 + i * h, off2 + (i + 1) * h) for i in range(2)]
        views["bb"] = ad.narrow(theta, off2 + 2 * h, off2 + 2 * h + 2)
    return views


def example_loss_expr(spec: LearnerSpec, theta, x, class_id: int, center=None):
    """Loss of one example, generic over Var/ndarray theta and pixels.

    This is the form the mixed partial d^2 l / (dtheta dx) is taken from, so
    both arguments may live on the tape.
    """
    if spec.kind == "quadratic_proxy":
        r = theta - x
        return 0.5 * ad.vsum(r * r)
    v = _theta_views(spec, theta)
    if spec.kind == "linear":
        feats = x
        w_cls, b_cls = v["w"], v["b"]
    else:
        hidden = [_act(spec, ad.dot(row, x) + v["b1"][j]) for j, row in enumerate(v["w1"])]
        feats = ad.stack(hidden)
        w_cls, b_cls = v["w2"], v["b2"]
    logits = ad.stack([ad.dot(row, feats) + b_cls[i] for i, row in enumerate(w_cls)])
    mx = ad.vmax(logits)
    lse = mx + ad.log(ad.vsum(ad.exp(logits - mx)))
    out = lse - logits[class_id]
    if spec.box_head:
        pred = ad.stack([ad.dot(v["wb"][i], feats) + v["bb"][i] for i in range(2)])
        target = np.zeros(2) if center is None else np.asarray(center, dtype=np.float64)
        r = pred - target
        out = out + spec.box_weight * ad.vsum(r * r)
    if spec.weight_decay > 0.0:
        out = out + 0.5 * spec.weight_decay * ad.dot(theta, theta)
    return out


def loss(params: ModelParams, example) -> float:
    """Training loss l(x, theta) for one example."""
    x = Dataset._pixels(example)
    if x.shape[0] != params.spec.input_dim:
        raise ValueError("example dimension does not match the model")
    value = example_loss_expr(params.spec, params.theta, x,
                              _class_of(example), _center_of(example))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite activation in loss")
    return float(value)


def _batched_loss(spec: LearnerSpec, theta, X, ys, centers):
    """Mean loss over a batch; theta may be a Var, data is constant.

    Hidden activations are h matvec nodes against the batch matrix; with a
    frozen backbone they are precomputed constants.
    """
    n, d = X.shape
    if spec.kind == "quadratic_proxy":
        xbar = X.mean(axis=0)
        sq = float(np.mean(np.sum(X * X, axis=1)))
        return 0.5 * ad.dot(theta, theta) - ad.dot(theta, xbar) + 0.5 * sq

    onehots = [(ys == c) * 1.0 for c in range(spec.classes)]
    v = _theta_views(spec, theta)
    if spec.kind == "linear":
        logits = [matvec(X, v["w"][c]) + v["b"][c] for c in range(spec.classes)]
        head_w, head_b = v.get("wb"), v.get("bb")
        feat_mat = X
    else:
        hidden = [_act(spec, matvec(X, v["w1"][j]) + v["b1"][j]) for j in range(spec.hidden)]
        logits = []
        for c in range(spec.classes):
            z = v["b2"][c] * np.ones(n)
            for j in range(spec.hidden):
                z = z + v["w2"][c][j] * hidden[j]
            logits.append(z)
        head_w, head_b = v.get("wb"), v.get("bb")
        feat_mat = hidden
    mx = logits[0]
    for z in logits[1:]:
        mx = _emax(mx, z)
    se = ad.exp(logits[0] - mx)
    for z in logits[1:]:
        se = se + ad.exp(z - mx)
    lse = mx + ad.log(se)
    picked = logits[0] * onehots[0]
    for c in range(1, spec.classes):
        picked = picked + logits[c] * onehots[c]
    out = ad.vsum(lse - picked) / n
    if spec.box_head:
        for axis in range(2):
            if spec.kind == "linear":
                pred = matvec(X, head_w[axis]) + head_b[axis]
            else:
                pred = head_b[axis] * np.ones(n)
                for j in range(spec.hidden):
                    pred = pred + head_w[axis][j] * feat_mat[j]
            r = pred - centers[:, axis]
            out = out + spec.box_weight * ad.vsum(r * r) / n
    if spec.weight_decay > 0.0:
        out = out + 0.5 * spec.weight_decay * ad.dot(theta, theta)
    return out


def _frozen_batched_loss(spec: LearnerSpec, head_var, frozen_theta, X, ys, centers):
    """Batched loss as a function of the head slice only; the backbone
    activations become a constant feature matrix."""
    v_frozen = _theta_views(spec, frozen_theta)
    H = np.stack(
        [_act(spec, X @ row + v_frozen["b1"][j]) for j, row in enumerate(v_frozen["w1"])],
        axis=1,
    )
    head_spec = LearnerSpec(
        input_dim=spec.hidden, classes=spec.classes, hidden=0, kind="linear",
        activation=spec.activation, box_head=spec.box_head,
        box_weight=spec.box_weight, weight_decay=spec.weight_decay,
    )
    return _batched_loss(head_spec, head_var, H, ys, centers)


def dataset_loss_builder(spec: LearnerSpec, data: Dataset, indices=None,
                         frozen_theta: np.ndarray | None = None):
    """Builder(tape, theta_var) -> scalar mean loss over the (sub)set.

    ``theta_var`` covers the trainable range only; with a frozen backbone
    ``frozen_theta`` supplies the rest.
    """
    X, ys, centers = data.arrays
    if indices is not None:
        X, ys, centers = X[indices], ys[indices], centers[indices]
    if spec.freeze_backbone:
        if frozen_theta is None:
            raise ValueError("frozen backbone requires frozen_theta")

        def build(tape, theta_var):
            return _frozen_batched_loss(spec, theta_var, frozen_theta, X, ys, centers)
    else:

        def build(tape, theta_var):
            return _batched_loss(spec, theta_var, X, ys, centers)

    return build


def mean_loss(params: ModelParams, data: Dataset, indices=None) -> float:
    X, ys, centers = data.arrays
    if indices is not None:
        X, ys, centers = X[indices], ys[indices], centers[indices]
    spec = params.spec
    if spec.freeze_backbone:
        a, b = spec.trainable_range()
        value = _frozen_batched_loss(spec, params.theta[a:b], params.theta, X, ys, centers)
    else:
        value = _batched_loss(spec, params.theta, X, ys, centers)
    return float(value)


# --------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainResult:
    params: ModelParams
    final_loss: float
    grad_norm: float
    steps: int


DIVERGENCE_THRESHOLD = 1e6


def _trainable_grad(params: ModelParams, data: Dataset, indices=None):
    spec = params.spec
    a, b = spec.trainable_range()
    build = dataset_loss_builder(spec, data, indices, frozen_theta=params.theta)
    tape = Tape(label="learner")
    tv = tape.leaf(params.theta[a:b])
    value = build(tape, tv)
    (g,) = grad(value, [tv])
    return float(value.value), np.asarray(g)


def train(params0: ModelParams, data: Dataset, epochs: int, lr: float,
          rng_seed: int, batch_size: int = 10) -> TrainResult:
    """Deterministic mini-batch SGD; returns the trained parameters with the
    final full-data loss and gradient norm. Warm starts are just a non-fresh
    ``params0``."""
    if epochs < 1:
        raise ValueError("need at least one epoch")
    spec = params0.spec
    a, b = spec.trainable_range()
    theta = params0.theta.copy()
    rng = np.random.default_rng(rng_seed)
    n = len(data)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            cur = ModelParams(theta, spec)
            batch_loss, g = _trainable_grad(cur, data, idx)
            if not np.isfinite(batch_loss) or batch_loss > DIVERGENCE_THRESHOLD:
                raise DivergenceError(
                    f"training diverged at step {steps}: batch loss {batch_loss:.3e} "
                    f"(lr {lr}, batch {batch_size})"
                )
            theta[a:b] -= lr * g
            steps += 1
    result = ModelParams(theta, spec)
    final_loss, g = _trainable_grad(result, data)
    return TrainResult(result, final_loss, float(np.linalg.norm(g)), steps)


def train_to_convergence(params0: ModelParams, data: Dataset, tol: float = 1e-12) -> ModelParams:
    """Solve the inner problem to (near) optimality; oracle path for
    hypergradient tests. Convex kinds only."""
    spec = params0.spec
    if spec.kind == "quadratic_proxy":
        X, _, _ = data.arrays
        return ModelParams(X.mean(axis=0), spec)
    if spec.kind != "linear" and not spec.freeze_backbone:
        raise ValueError("exact inner solve requires a convex model")
    from scipy.optimize import minimize

    a, b = spec.trainable_range()
    theta = params0.theta.copy()

    def fun(t):
        full = theta.copy()
        full[a:b] = t
        cur = ModelParams(full, spec)
        value, g = _trainable_grad(cur, data)
        return value, g

    res = minimize(fun, theta[a:b], jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 0.0, "maxiter": 2000})
    out = theta.copy()
    out[a:b] = res.x
    return ModelParams(out, spec)


def val_loss(params: ModelParams, data: Dataset) -> float:
    if data.role != "val":
        raise ValueError(f"val_loss expects a validation set, got role {data.role!r}")
    return mean_loss(params, data)


def val_grad(params: ModelParams, data: Dataset) -> np.ndarray:
    """Gradient of the mean validation loss over the trainable slice."""
    if data.role != "val":
        raise ValueError(f"val_grad expects a validation set, got role {data.role!r}")
    _, g = _trainable_grad(params, data)
    return g


def _predict_logits(params: ModelParams, X: np.ndarray):
    spec = params.spec
    v = _theta_views(spec, params.theta)
    if spec.kind == "linear":
        W = np.stack(v["w"])
        return X @ W.T + v["b"]
    H = np.stack(
        [_act(spec, X @ row + v["b1"][j]) for j, row in enumerate(v["w1"])],
        axis=1,
    )
    W2 = np.stack(v["w2"])
    logits = H @ W2.T + v["b2"]
    if spec.box_head:
        Wb = np.stack(v["wb"])
        return logits, H @ Wb.T + v["bb"]
    return logits


def accuracy(params: ModelParams, data: Dataset, box_tol: float | None = None) -> float:
    """Fraction of correct argmax predictions (optionally requiring the
    predicted box center within ``box_tol`` normalized units)."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    X, ys, centers = data.arrays
    out = _predict_logits(params, X)
    if params.spec.box_head:
        logits, pred_centers = out
    else:
        logits, pred_centers = out, None
    correct = np.argmax(logits, axis=1) == ys
    if box_tol is not None:
        if pred_centers is None:
            raise ValueError("box tolerance requires a box head")
        dist = np.linalg.norm(pred_centers - centers, axis=1)
        correct = correct & (dist <= box_tol)
    return float(np.mean(correct))


# --------------------------------------------------------------------------
# checkpoints: short descriptor header + flat little-endian float64 vector


def save_checkpoint(path, params: ModelParams) -> None:
    desc = {
        "kind": params.spec.kind,
        "input_dim": params.spec.input_dim,
        "classes": params.spec.classes,
        "hidden": params.spec.hidden,
        "activation": params.spec.activation,
        "box_head": params.spec.box_head,
        "box_weight": params.spec.box_weight,
        "freeze_backbone": params.spec.freeze_backbone,
        "weight_decay": params.spec.weight_decay,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(desc, sort_keys=True) + "\n").encode())
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        desc = json.loads(fh.readline().decode())
        theta = np.frombuffer(fh.read(), dtype="<f8")
    return ModelParams(theta.copy(), LearnerSpec(**desc))
