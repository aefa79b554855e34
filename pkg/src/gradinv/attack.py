"""Optimisation-based gradient inversion and the encoding decode step.

The attacker minimises

    (1 - cos(grad(x, y), observed grad)) + alpha_tv * TV(x) + alpha_bn * R_BN(x)

over a candidate batch ``x`` with Adam, differentiating through the parameter
gradient. R_BN only applies when the attacker infers BatchNorm statistics from
the candidate itself.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .labels import infer_batch_labels
from .metrics import MetricReport, match_batch, score
from .models import BNMode, GradientPacket, Model, attacker_forward

log = logging.getLogger(__name__)

# best alpha_tv per defense from the reference sweep
ALPHA_TV_BY_DEFENSE = {"none": 0.05, "gradprune": 0.05, "mixup": 0.1, "instahide": 0.01}
ALPHA_TV_GRID = (0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5)
ALPHA_BN_GRID = (0, 0.0005, 0.001, 0.01, 0.05)
LABEL_MODES = ("granted", "inferred", "optimized")


@dataclass
class AttackConfig:
    alpha_tv: float = 0.05
    alpha_bn: float = 0.001
    iterations: int = 10_000
    lr: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    decay_fractions: tuple[float, ...] = (3 / 8, 5 / 8, 7 / 8)
    decay_factor: float = 0.1
    restarts: int = 1
    seed: int = 0
    bn_mode: str = "none"
    labels: str = "granted"
    abs_tv: bool = False
    pixel_range: tuple[float, float] = (0.0, 1.0)
    epochs: int = 20  # eavesdropped epochs T for encoding defenses

    def __post_init__(self):
        if self.alpha_tv < 0 or self.alpha_bn < 0:
            raise ValueError("regulariser weights must be non-negative")
        if self.iterations < 0 or self.restarts < 1:
            raise ValueError("iterations must be >= 0 and restarts >= 1")
        if self.labels not in LABEL_MODES:
            raise ValueError(f"labels must be one of {LABEL_MODES}, got {self.labels!r}")
        BNMode(self.bn_mode)
        self.betas = tuple(self.betas)
        self.decay_fractions = tuple(self.decay_fractions)
        self.pixel_range = tuple(self.pixel_range)

    def milestones(self) -> list[int]:
        return [math.floor(f * self.iterations) for f in self.decay_fractions]

    def lr_at(self, step: int) -> float:
        return self.lr * self.decay_factor ** sum(step >= m for m in self.milestones())


# ---------------------------------------------------------------- loss terms

def tv(x) -> Tensor:
    """Anisotropic total variation, summed over pixels and channels, averaged over the batch."""
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"tv expects (batch, channels, H, W), got {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ValueError(f"tv needs H and W >= 2, got {x.shape[2:]}")
    dh = ad.abs_(x[:, :, :, 1:] - x[:, :, :, :-1])
    dv = ad.abs_(x[:, :, 1:, :] - x[:, :, :-1, :])
    return (ad.sum_(dh) + ad.sum_(dv)) * (1.0 / x.shape[0])


def bn_reg(batch_stats, running) -> Tensor:
    """Sum over layers of ||mean - mu||_2 + ||var - sigma^2||_2."""
    batch_stats, running = list(batch_stats), list(running)
    if len(batch_stats) != len(running):
        raise ValueError(f"bn_reg: {len(batch_stats)} layers of statistics vs {len(running)} priors")
    total = Tensor(0.0)
    for (m, v), (mu, var) in zip(batch_stats, running):
        total = total + ad.l2_norm(ad.as_tensor(m) - mu) + ad.l2_norm(ad.as_tensor(v) - var)
    return total


def grad_match_loss(candidate, target) -> tuple[Tensor, bool]:
    """1 - cosine similarity of the concatenated gradients.

    Returns ``(loss, degenerate)``; a zero-norm side gives loss 1 and
    ``degenerate=True``.
    """
    candidate, target = list(candidate), list(target)
    if len(candidate) != len(target):
        raise ValueError(f"grad_match_loss: {len(candidate)} vs {len(target)} parameter tensors")
    dot = Tensor(0.0)
    cc = Tensor(0.0)
    tt = 0.0
    for c, t in zip(candidate, target):
        c, t = ad.as_tensor(c), ad.as_tensor(t)
        if c.shape != t.shape:
            raise ValueError(f"grad_match_loss: shapes {c.shape} and {t.shape} differ")
        dot = dot + ad.inner_product(c, t)
        cc = cc + ad.inner_product(c, c)
        tt += float(np.sum(t.data * t.data))
    if tt == 0.0 or cc.item() == 0.0:
        return Tensor(1.0), True
    return 1.0 - dot / (ad.power(cc, 0.5) * math.sqrt(tt)), False


# ---------------------------------------------------------------- inversion

@dataclass
class RestartResult:
    x: np.ndarray
    objective: float
    trajectory: np.ndarray  # rows: iteration, grad_match, tv, bn_reg, total
    label_probs: np.ndarray | None = None
    aborted: str | None = None


@dataclass
class ReconstructionReport:
    x_hat: np.ndarray
    objective: float
    best_restart: int
    restarts: list[RestartResult]
    labels_used: str
    config: dict
    metrics: MetricReport | None = None
    permutation: list[int] | None = None

    @property
    def trajectory(self) -> np.ndarray:
        return self.restarts[self.best_restart].trajectory

    def summary(self) -> dict:
        out = {"objective": self.objective, "best_restart": self.best_restart,
               "restart_objectives": [r.objective for r in self.restarts],
               "aborted": [r.aborted for r in self.restarts],
               "labels_used": self.labels_used, "config": self.config}
        if self.metrics is not None:
            out["metrics"] = self.metrics.to_dict()
        return out


class _Objective:
    """Builds one evaluation of the attack objective on a fresh graph."""

    def __init__(self, model: Model, packet: GradientPacket, cfg: AttackConfig, labels):
        self.model = model
        self.packet = packet
        self.cfg = cfg
        self.mode = BNMode(cfg.bn_mode)
        self.labels = labels
        self.target = [Tensor(packet.grads[n]) for n in model.param_names]
        self.prior = [model.running[n] for n in model.bn_names]

    def __call__(self, x: np.ndarray, label_logits: np.ndarray | None = None, need_grad=True):
        cfg = self.cfg
        g = Graph()
        xt = g.leaf(x)
        params = self.model.leaves(g)
        lt = None
        if label_logits is not None:
            lt = g.leaf(label_logits)
            target_labels = ad.softmax(lt, axis=1)
        else:
            target_labels = self.labels
        logits, stats = attacker_forward(self.model, xt, self.mode, params, self.packet)
        loss = ad.softmax_cross_entropy(logits, target_labels)
        cand = ad.backward(loss, list(params.values()), create_graph=True)
        gm, _ = grad_match_loss(cand, self.target)
        tv_term = tv(ad.abs_(xt) if cfg.abs_tv else xt)
        total = gm + cfg.alpha_tv * tv_term
        bn_term = 0.0
        if self.mode is BNMode.INFER and stats:
            r = bn_reg(stats, self.prior)
            bn_term = r.item()
            total = total + cfg.alpha_bn * r
        parts = (gm.item(), tv_term.item(), bn_term, total.item())
        if not need_grad:
            g.release()
            return parts, None, None
        leaves = [xt] + ([lt] if lt is not None else [])
        if total.node is None:
            grads = [np.zeros_like(t.data) for t in leaves]
        else:
            grads = [t.data for t in ad.backward(total, leaves)]
        g.release()
        return parts, grads[0], (grads[1] if lt is not None else None)


class _Adam:
    def __init__(self, shape, betas, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, param, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return param - lr * mhat / (np.sqrt(vhat) + self.eps)


def _resolve_labels(packet, model, cfg):
    if cfg.labels == "granted":
        if packet.labels is None:
            raise ValueError("labels=granted but the packet carries no labels")
        return packet.labels
    if cfg.labels == "inferred":
        return infer_batch_labels(packet, model).as_vector()
    return None


def _run_restart(obj: _Objective, model, packet, cfg, restart, x0=None) -> RestartResult:
    rng = np.random.default_rng([cfg.seed, restart])
    lo, hi = cfg.pixel_range
    shape = (packet.batch_size,) + model.input_shape
    x = np.clip(rng.normal(0.0, 1.0, size=shape), lo, hi) if x0 is None else np.array(x0, float)
    logits = None
    if cfg.labels == "optimized":
        logits = rng.normal(0.0, 0.1, size=(packet.batch_size, model.num_classes))
        opt_l = _Adam(logits.shape, cfg.betas, cfg.eps)
    opt_x = _Adam(x.shape, cfg.betas, cfg.eps)
    traj = np.empty((cfg.iterations + 1, 5))
    for it in range(cfg.iterations):
        parts, gx, gl = obj(x, logits)
        traj[it] = (it,) + parts
        if not (np.isfinite(parts[3]) and np.all(np.isfinite(gx))):
            msg = f"non-finite objective at iteration {it} (restart {restart})"
            log.warning(msg)
            return RestartResult(x, float("nan"), traj[:it + 1], None, aborted=msg)
        lr = cfg.lr_at(it)
        x = np.clip(opt_x.step(x, gx, lr), lo, hi)
        if logits is not None:
            logits = opt_l.step(logits, gl, lr)
    parts, _, _ = obj(x, logits, need_grad=False)
    traj[cfg.iterations] = (cfg.iterations,) + parts
    if not np.isfinite(parts[3]):
        return RestartResult(x, float("nan"), traj, None, aborted="non-finite final objective")
    probs = None
    if logits is not None:
        with ad.no_record():
            probs = ad.softmax(Tensor(logits), axis=1).data
    return RestartResult(x, parts[3], traj, probs)


def invert(packet: GradientPacket, model: Model, cfg: AttackConfig, x_true=None,
           x_init=None) -> ReconstructionReport:
    """Recover the batch behind ``packet``.

    ``x_true`` is only used to score the result after the attack; the attacker
    never sees it. ``x_init`` overrides the random initialisation.
    """
    missing = set(model.param_names) ^ set(packet.grads)
    if missing:
        raise ValueError(f"packet and model parameter sets differ: {sorted(missing)}")
    if BNMode(cfg.bn_mode) is not BNMode.NONE and not model.has_batchnorm:
        raise ValueError(f"bn_mode={cfg.bn_mode} on a model without BatchNorm")
    if model.has_batchnorm and BNMode(cfg.bn_mode) is BNMode.NONE:
        raise ValueError(f"{model.arch} has BatchNorm layers; choose bn_mode exact, proxy or infer")
    labels = _resolve_labels(packet, model, cfg)
    obj = _Objective(model, packet, cfg, labels)
    results = [_run_restart(obj, model, packet, cfg, r, x_init) for r in range(cfg.restarts)]
    finite = [i for i, r in enumerate(results) if r.aborted is None]
    if not finite:
        raise FloatingPointError("; ".join(r.aborted for r in results))
    best = min(finite, key=lambda i: results[i].objective)
    x_hat = results[best].x
    report = ReconstructionReport(x_hat, results[best].objective, best, results, cfg.labels,
                                  asdict(cfg))
    if x_true is not None:
        perm = match_batch(x_hat, x_true)
        report.permutation = perm.tolist()
        report.metrics = score(x_hat, x_true, perm)
    return report


def objective_at(packet: GradientPacket, model: Model, cfg: AttackConfig, x) -> tuple:
    """(grad_match, tv, bn_reg, total) at a given candidate, labels resolved as in ``invert``."""
    obj = _Objective(model, packet, cfg, _resolve_labels(packet, model, cfg))
    parts, _, _ = obj(np.asarray(x, float), None, need_grad=False)
    return parts


# ---------------------------------------------------------------- decode

@dataclass
class DecodeResult:
    images: np.ndarray
    underdetermined: bool
    missing: list[int] = field(default_factory=list)
    rank: int = 0


def decode_encodings(recovered, records, n_private: int, use_signs: bool = True) -> DecodeResult:
    """Per-pixel least squares from mixed encodings back to private images.

    ``recovered`` holds one encoding per record (any image shape). With
    ``use_signs`` the granted sign pattern is undone first; otherwise the
    absolute value is used, which is equivalent for non-negative images.
    """
    recovered = np.asarray(recovered, dtype=np.float64)
    if len(recovered) != len(records):
        raise ValueError(f"{len(recovered)} encodings but {len(records)} records")
    img_shape = recovered.shape[1:]
    y = recovered.reshape(len(recovered), -1).copy()
    lam = np.zeros((len(records), n_private))
    for m, rec in enumerate(records):
        for idx, c in zip(rec.indices, rec.coefficients):
            lam[m, idx] += c
        if use_signs:
            y[m] *= np.asarray(rec.signs, dtype=np.float64).reshape(-1)
        else:
            y[m] = np.abs(y[m])
    covered = np.abs(lam).sum(axis=0) > 0
    z, _, rank, _ = np.linalg.lstsq(lam, y, rcond=None)
    return DecodeResult(z.reshape((n_private,) + img_shape), bool(rank < n_private),
                        [int(i) for i in np.flatnonzero(~covered)], int(rank))
