"""Assembly of the outer gradient and the outer optimization loop.

The validation loss's gradient with respect to the generation parameters
splits into two pieces:

  * an inverse-Hessian-vector product z = (H + damping I)^-1 grad_theta(L_val)
    solved by conjugate gradient using only Hessian-vector products, and
  * per-sample contractions of z against the mixed partial
    d/dx [dl/dtheta], pushed through the renderer patch by patch and then
    through the reparametrized sampling chain down to the distribution
    logits.

The contractions run strictly vector-first: z hits the mixed partial first
(one reverse-over-reverse sweep producing a length-d vector), that vector
hits each rendered patch (one sweep per patch), so no m-by-d or d-by-k
matrix is ever materialized.

Sampling/rendering happens twice per iteration: a cheap forward pass that
renders the training set and records every random draw, and a replay pass
with gradients on that must reproduce the pass-1 pixels bit for bit
(enforced; a mismatch is an invariant breach, not a warning).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .learner import (
    Dataset,
    LearnerSpec,
    ModelParams,
    _center_of,
    accuracy,
    dataset_loss_builder,
    example_loss_expr,
    init_params,
    mean_loss,
    train,
    train_to_convergence,
    val_grad,
    val_loss,
)
from .renderer import RenderedExample, RenderParams, make_label, patch_expr, patch_ranges, pixel_grid
from .sampler import (
    BinDistribution,
    LightingMixture,
    SampleTrace,
    _mix,
    _pose_from_noise,
    mix_lighting,
    project_simplex,
    score_function_grad,
    softmax,
)

RHO_SALT = 1 << 40       # sub-draw seed offsets inside one image sample
ZOOM_SALT = 1 << 41
HESSIAN_SALT = 1 << 42
ITERATION_STRIDE = 1_000_003

__all__ = [
    "CGConfig",
    "CGStats",
    "CGBreakdownError",
    "ReplayMismatchError",
    "GenerationModel",
    "ImageDraw",
    "InnerConfig",
    "HypergradReport",
    "IterationRecord",
    "OuterOptimizer",
    "cg_solve",
    "solve_tv",
    "grad_nerf_sample",
    "render_draws",
    "outer_gradient",
    "optimize",
]


class CGBreakdownError(RuntimeError):
    """CG met a non-positive curvature direction; raise the damping."""


class ReplayMismatchError(RuntimeError):
    """Pass-2 replay produced different pixels than pass 1 (invariant breach)."""


@dataclass(frozen=True)
class CGConfig:
    max_iters: int | None = None    # defaults to min(m, 100)
    residual_tol: float = 1e-6
    damping: float = 1e-3

    def __post_init__(self):
        if self.residual_tol <= 0:
            raise ValueError("residual tolerance must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


@dataclass
class CGStats:
    residual: float
    iters: int
    converged: bool


def cg_solve(hvp_fn, g: np.ndarray, cfg: CGConfig) -> tuple[np.ndarray, CGStats]:
    """Solve (H + damping I) z = g with plain conjugate gradient.

    ``hvp_fn(p)`` supplies H p. Deterministic; aborts on non-positive
    curvature with a diagnostic recommending more damping.
    """
    g = np.asarray(g, dtype=np.float64)
    m = g.shape[0]
    max_iters = cfg.max_iters if cfg.max_iters is not None else min(m, 100)
    gnorm = float(np.linalg.norm(g))
    x = np.zeros(m)
    if gnorm == 0.0:
        return x, CGStats(0.0, 0, True)
    r = g.copy()
    p = r.copy()
    rs = float(r @ r)
    iters = 0
    while iters < max_iters and np.sqrt(rs) > cfg.residual_tol * gnorm:
        Hp = hvp_fn(p) + cfg.damping * p
        pHp = float(p @ Hp)
        if pHp <= 0.0 or not np.isfinite(pHp):
            raise CGBreakdownError(
                f"non-positive curvature {pHp:.3e} at CG iteration {iters}; "
                f"increase damping (currently {cfg.damping:g})"
            )
        alpha = rs / pHp
        x += alpha * p
        r -= alpha * Hp
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        iters += 1
    # report the true residual, not the recurrence estimate
    true_res = float(np.linalg.norm(g - hvp_fn(x) - cfg.damping * x)) / gnorm
    return x, CGStats(true_res, iters, true_res <= cfg.residual_tol)


def _train_hvp(spec: LearnerSpec, theta_hat: ModelParams, train_data: Dataset):
    """Reusable Hessian-vector-product closure over the training loss.

    The forward pass and the differentiable first sweep are recorded once;
    each product appends scratch nodes for dot(g, v) plus the second sweep
    and truncates them afterwards.
    """
    a, b = spec.trainable_range()
    build = dataset_loss_builder(spec, train_data, frozen_theta=theta_hat.theta)
    tape = Tape(label="train-hvp")
    tv = tape.leaf(theta_hat.theta[a:b])
    loss = build(tape, tv)
    (g_var,) = ad.grad_vars(loss, [tv])
    mark = tape.mark()

    def hvp_fn(v: np.ndarray) -> np.ndarray:
        s = ad.dot(g_var, v)
        (h,) = ad.grad_vars(s, [tv])
        out = np.array(h.value, dtype=np.float64, copy=True)
        tape.reset_to(mark)
        if not np.all(np.isfinite(out)):
            raise ad.NonFiniteError("non-finite Hessian-vector product")
        return out

    return hvp_fn, float(loss.value)


def solve_tv(theta_hat: ModelParams, train_data: Dataset, val_data: Dataset,
             cfg: CGConfig) -> tuple[np.ndarray, CGStats]:
    """z = (H_train + damping I)^-1 grad(L_val), by CG over HVPs only."""
    g = val_grad(theta_hat, val_data)
    hvp_fn, _ = _train_hvp(theta_hat.spec, theta_hat, train_data)
    return cg_solve(hvp_fn, g, cfg)


# --------------------------------------------------------------------------
# generation model: the learnable distributions and their replay machinery


@dataclass
class ImageDraw:
    """Every random choice behind one rendered training image."""

    seed: int
    pose: SampleTrace
    rho: float
    zoom: float
    rho_trace: SampleTrace | None = None
    zoom_trace: SampleTrace | None = None
    lighting: np.ndarray | None = None


@dataclass
class GenerationModel:
    """Bundle of (learnable) generation distributions.

    pose/rho/zoom are bin distributions (rho defaults to fixed-uniform,
    zoom to a fixed factor); lighting is a simplex mixture applied
    deterministically to every image.
    """

    pose: BinDistribution
    tau: float = 0.1
    rho: BinDistribution | None = None
    zoom: BinDistribution | None = None
    fixed_zoom: float = 1.0
    lighting: LightingMixture | None = None
    learn_pose: bool = True
    learn_rho: bool = False
    learn_zoom: bool = False
    learn_lighting: bool = False

    def learnable(self) -> tuple[str, ...]:
        names = []
        if self.learn_pose:
            names.append("pose")
        if self.learn_rho and self.rho is not None:
            names.append("rho")
        if self.learn_zoom and self.zoom is not None:
            names.append("zoom")
        if self.learn_lighting and self.lighting is not None:
            names.append("lighting")
        return tuple(names)

    def draw(self, seed: int) -> ImageDraw:
        """Sample one image's rendering parameters (records all noise)."""
        from .sampler import draw_pose

        pose = draw_pose(self.pose, self.pose.geometry(), self.tau, seed)
        rho_trace = None
        if self.rho is not None:
            rho_trace = draw_pose(self.rho, self.rho.geometry(), self.tau, seed + RHO_SALT)
            rho = rho_trace.value
        else:
            rho = float(np.random.default_rng(seed + RHO_SALT).uniform(0.0, 360.0))
        zoom_trace = None
        if self.zoom is not None:
            zoom_trace = draw_pose(self.zoom, self.zoom.geometry(), self.tau, seed + ZOOM_SALT)
            zoom = zoom_trace.value
        else:
            zoom = self.fixed_zoom
        lighting = mix_lighting(self.lighting) if self.lighting is not None else None
        return ImageDraw(seed, pose, rho, zoom, rho_trace, zoom_trace, lighting)

    def replay(self, tape: Tape, draw: ImageDraw):
        """Rebuild the draw on a tape. Returns (phi, rho, zoom, lighting)
        expressions plus {name: leaf Var} for the learnable groups."""
        leaves = {}

        def replayed(dist, trace, learn, name):
            if not learn:
                return trace.value
            leaf = tape.leaf(dist.logits)
            leaves[name] = leaf
            _y, _c, _s, _e, value = _pose_from_noise(
                leaf, dist.geometry(), self.tau, trace.gumbels, trace.eps)
            return value

        phi = replayed(self.pose, draw.pose, self.learn_pose, "pose")
        rho = (replayed(self.rho, draw.rho_trace, self.learn_rho, "rho")
               if self.rho is not None else draw.rho)
        zoom = (replayed(self.zoom, draw.zoom_trace, self.learn_zoom, "zoom")
                if self.zoom is not None else draw.zoom)
        lighting = draw.lighting
        if self.lighting is not None and self.learn_lighting:
            leaf = tape.leaf(self.lighting.coeffs)
            leaves["lighting"] = leaf
            lighting = _mix(leaf, self.lighting.embeddings)
        return phi, rho, zoom, lighting, leaves


# --------------------------------------------------------------------------
# pass 1: render the training set, recording draws


def _render_example(scene, draw: ImageDraw) -> RenderedExample:
    """Forward render from recorded draw values (no tape, no angle wrap, so
    pass-2 replay sees the identical inputs)."""
    px, py = pixel_grid(scene.resolution)
    pixels = scene.field(draw.pose.value, draw.rho, draw.zoom, draw.lighting, px, py)
    label = make_label(scene, RenderParams(draw.pose.value, draw.rho, draw.zoom,
                                           lighting=draw.lighting))
    d = scene.resolution * scene.resolution
    return RenderedExample(pixels, label, RenderParams(draw.pose.value, draw.rho, draw.zoom),
                           patch_ranges(d, scene.patches))


def render_draws(gen: GenerationModel, scenes, n_per_class: int, rng_seed: int):
    """Sample N draws per class and render the training set (gradients off).

    Per-sample seeds are rng_seed + sample index, so draws are independent
    of iteration order and safe to parallelize.
    """
    draws, examples = [], []
    for ci, scene in enumerate(scenes):
        for j in range(n_per_class):
            d = gen.draw(rng_seed + ci * n_per_class + j)
            draws.append((d, scene))
            examples.append(_render_example(scene, d))
    return draws, Dataset(examples, role="train")


# --------------------------------------------------------------------------
# pass 2: replay with gradients, contracting z through the chain


def grad_nerf_sample(draw: ImageDraw, scene, theta_hat: ModelParams, z: np.ndarray,
                     gen: GenerationModel, example: RenderedExample) -> dict[str, np.ndarray]:
    """One sample's contribution z^T d/dpsi [dl/dtheta], per learnable group.

    Order of contractions is strictly vector-first:
      1. q = d/dx (z . grad_theta l)  -- one tape, largest value max(m, d);
      2. for each patch, q_patch^T d(patch)/d(psi) through the renderer and
         the sampling reparametrization -- one small tape per patch.

    The replayed patch pixels must equal the pass-1 pixels bitwise.
    """
    spec = theta_hat.spec
    a, b = spec.trainable_range()
    pixels = example.pixels
    label = example.label

    mixed_spec = spec if spec.weight_decay == 0.0 else replace(spec, weight_decay=0.0)
    tape = Tape(label="mixed")
    tvar = tape.leaf(theta_hat.theta[a:b])
    if (a, b) == (0, spec.m):
        theta_expr = tvar
    else:
        frozen = theta_hat.theta.copy()
        frozen[a:b] = 0.0
        theta_expr = ad.embed(tvar, a, spec.m) + frozen
    xvar = tape.leaf(pixels)
    l = example_loss_expr(mixed_spec, theta_expr, xvar, label.class_id, _center_of(example))
    (g_var,) = ad.grad_vars(l, [tvar])
    s = ad.dot(g_var, z)
    (q,) = ad.grad(s, [xvar])
    q = np.atleast_1d(np.asarray(q))

    grads: dict[str, np.ndarray] = {}
    for (start, stop) in example.patch_layout:
        ptape = Tape(label="render")
        phi, rho, zoom, lighting, leaves = gen.replay(ptape, draw)
        if not leaves:
            raise ValueError("no learnable generation parameters to differentiate")
        pix = patch_expr(scene, phi, rho, zoom, lighting, (start, stop))
        if not np.array_equal(np.atleast_1d(pix.value), pixels[start:stop]):
            raise ReplayMismatchError(
                f"replayed patch [{start},{stop}) differs from the pass-1 render "
                f"(seed {draw.seed})"
            )
        contribs = ad.vjp([pix], q[start:stop], list(leaves.values()))
        for name, contrib in zip(leaves.keys(), contribs):
            acc = grads.get(name)
            grads[name] = np.atleast_1d(contrib) if acc is None else acc + np.atleast_1d(contrib)
    return grads


# --------------------------------------------------------------------------
# full outer gradient


@dataclass(frozen=True)
class InnerConfig:
    epochs: int = 2
    lr: float = 1e-2
    batch_size: int = 10
    exact: bool = False          # solve the inner problem to convergence
    init_seed: int = 0
    init_scale: float = 0.1


@dataclass
class HypergradReport:
    grads: dict[str, np.ndarray]
    cg: CGStats
    tv_norm: float
    sample_norms: list[float]
    sample_seeds: list[int]
    theta_hat: ModelParams
    train_loss: float
    val_loss: float
    n_images: int

    @property
    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(g @ g) for g in self.grads.values())))


def _train_inner(learner_spec: LearnerSpec, train_data: Dataset, inner: InnerConfig,
                 theta0: ModelParams | None, rng_seed: int) -> tuple[ModelParams, float]:
    start = theta0 if theta0 is not None else init_params(
        learner_spec, inner.init_seed, inner.init_scale)
    if inner.exact:
        params = train_to_convergence(start, train_data)
        return params, mean_loss(params, train_data)
    result = train(start, train_data, inner.epochs, inner.lr,
                   rng_seed=rng_seed, batch_size=inner.batch_size)
    return result.params, result.final_loss


def outer_gradient(gen: GenerationModel, scenes, learner_spec: LearnerSpec,
                   val_data: Dataset, n_per_class: int, cfg: CGConfig, rng_seed: int,
                   inner: InnerConfig = InnerConfig(), theta0: ModelParams | None = None,
                   fresh_hessian_samples: bool = False) -> HypergradReport:
    """One full hypergradient evaluation (Pass 1, inner training, CG, Pass 2).

    Returns d L_val / d psi per learnable group; the minus sign of the outer
    update formula is applied here, once.
    """
    if n_per_class < 1:
        raise ValueError("need at least one image per class")
    draws, train_data = render_draws(gen, scenes, n_per_class, rng_seed)
    theta_hat, train_loss = _train_inner(learner_spec, train_data, inner, theta0, rng_seed)

    hessian_data = train_data
    if fresh_hessian_samples:
        _, hessian_data = render_draws(gen, scenes, n_per_class, rng_seed + HESSIAN_SALT)
    z, cg_stats = solve_tv(theta_hat, hessian_data, val_data, cfg)

    totals: dict[str, np.ndarray] = {}
    sample_norms = []
    for (draw, scene), example in zip(draws, train_data.examples):
        grads = grad_nerf_sample(draw, scene, theta_hat, z, gen, example)
        norm = 0.0
        for name, g in grads.items():
            acc = totals.get(name)
            totals[name] = g.copy() if acc is None else acc + g
            norm += float(g @ g)
        sample_norms.append(float(np.sqrt(norm)))
    n = len(draws)
    final = {name: -(g / n) for name, g in totals.items()}
    for name, g in final.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite outer gradient for {name!r}")
    return HypergradReport(
        grads=final,
        cg=cg_stats,
        tv_norm=float(np.linalg.norm(z)),
        sample_norms=sample_norms,
        sample_seeds=[d.seed for d, _ in draws],
        theta_hat=theta_hat,
        train_loss=train_loss,
        val_loss=val_loss(theta_hat, val_data),
        n_images=n,
    )


def score_function_outer_gradient(gen: GenerationModel, scenes, learner_spec: LearnerSpec,
                                  val_data: Dataset, n_per_class: int, rng_seed: int,
                                  inner: InnerConfig = InnerConfig(),
                                  theta0: ModelParams | None = None,
                                  baseline: float = 0.0) -> HypergradReport:
    """REINFORCE-style outer gradient: the whole-batch validation loss is the
    payoff for every sampled bin. Shares Pass 1 and training with the
    pathwise estimator; no second pass."""
    draws, train_data = render_draws(gen, scenes, n_per_class, rng_seed)
    theta_hat, train_loss = _train_inner(learner_spec, train_data, inner, theta0, rng_seed)
    reward = val_loss(theta_hat, val_data)
    grads = {}
    bins = [d.pose.hard_bin for d, _ in draws]
    payoff = np.full(gen.pose.k, reward - baseline)
    grads["pose"] = score_function_grad(gen.pose, payoff, len(bins), rng_seed, bins=bins)
    if gen.learn_zoom and gen.zoom is not None:
        zbins = [d.zoom_trace.hard_bin for d, _ in draws]
        zpay = np.full(gen.zoom.k, reward - baseline)
        grads["zoom"] = score_function_grad(gen.zoom, zpay, len(zbins), rng_seed, bins=zbins)
    return HypergradReport(
        grads=grads,
        cg=CGStats(0.0, 0, True),
        tv_norm=0.0,
        sample_norms=[],
        sample_seeds=[d.seed for d, _ in draws],
        theta_hat=theta_hat,
        train_loss=train_loss,
        val_loss=reward,
        n_images=len(draws),
    )


# --------------------------------------------------------------------------
# outer optimization


class OuterOptimizer:
    """SGD with momentum on the bin logits (v <- momentum v + g;
    logits <- logits - lr v); plain projected gradient descent on lighting
    coefficients."""

    def __init__(self, lr: float, momentum: float = 0.9, lighting_lr: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.lighting_lr = lighting_lr if lighting_lr is not None else lr
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, gen: GenerationModel, grads: dict[str, np.ndarray]) -> GenerationModel:
        updates = {}
        for name in ("pose", "rho", "zoom"):
            if name not in grads:
                continue
            dist: BinDistribution = getattr(gen, name)
            g = grads[name]
            v = self.velocity.get(name, np.zeros_like(g))
            v = self.momentum * v + g
            self.velocity[name] = v
            new_logits = dist.logits - self.lr * v
            if not np.all(np.isfinite(new_logits)):
                raise ad.NonFiniteError(f"non-finite update for {name!r} logits")
            updates[name] = BinDistribution(new_logits, dist.range)
        if "lighting" in grads:
            mix = gen.lighting
            coeffs = project_simplex(mix.coeffs - self.lighting_lr * grads["lighting"])
            updates["lighting"] = LightingMixture(coeffs, mix.embeddings)
        return replace(gen, **updates)


@dataclass
class IterationRecord:
    iteration: int
    pose_probs: np.ndarray
    val_accuracy: float
    val_loss: float
    train_loss: float
    grad_norm: float
    cg_residual: float
    cg_iters: int
    wall_ms: int
    lighting_coeffs: np.ndarray | None = None
    zoom_probs: np.ndarray | None = None


def optimize(gen: GenerationModel, scenes, learner_spec: LearnerSpec, val_data: Dataset,
             budget: int, outer_lr: float, cfg: CGConfig = CGConfig(),
             inner: InnerConfig = InnerConfig(), momentum: float = 0.9,
             master_seed: int = 0, warm_start: bool = True, method: str = "pathwise",
             lighting_lr: float | None = None, n_per_class: int = 50,
             clock=None) -> tuple[list[IterationRecord], GenerationModel]:
    """Iterate outer_gradient + update for ``budget`` steps.

    method 'pathwise' is the full hypergradient; 'score' swaps the
    data-generation gradient for the REINFORCE estimate (same outer loop,
    same inner training). ``clock`` (ms counter) defaults to a null clock so
    artifacts stay byte-reproducible.
    """
    if budget < 1:
        raise ValueError("need at least one outer iteration")
    if method not in ("pathwise", "score"):
        raise ValueError(f"unknown method {method!r}")
    opt = OuterOptimizer(outer_lr, momentum, lighting_lr)
    records = []
    theta_prev = None
    rewards: list[float] = []
    for t in range(budget):
        t0 = clock() if clock is not None else 0
        seed_t = master_seed + ITERATION_STRIDE * t
        if method == "pathwise":
            report = outer_gradient(gen, scenes, learner_spec, val_data, n_per_class,
                                    cfg, seed_t, inner=inner, theta0=theta_prev)
        else:
            baseline = float(np.mean(rewards)) if rewards else 0.0
            report = score_function_outer_gradient(gen, scenes, learner_spec, val_data,
                                                   n_per_class, seed_t, inner=inner,
                                                   theta0=theta_prev, baseline=baseline)
            rewards.append(report.val_loss)
        acc = accuracy(report.theta_hat, val_data)
        records.append(IterationRecord(
            iteration=t,
            pose_probs=np.asarray(softmax(gen.pose.logits)),
            val_accuracy=acc,
            val_loss=report.val_loss,
            train_loss=report.train_loss,
            grad_norm=report.grad_norm,
            cg_residual=report.cg.residual,
            cg_iters=report.cg.iters,
            wall_ms=int((clock() - t0)) if clock is not None else 0,
            lighting_coeffs=(gen.lighting.coeffs.copy() if gen.lighting is not None else None),
            zoom_probs=(np.asarray(softmax(gen.zoom.logits)) if gen.zoom is not None else None),
        ))
        gen = opt.step(gen, report.grads)
        if warm_start:
            theta_prev = report.theta_hat
    return records, gen
