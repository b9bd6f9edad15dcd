"""L-infinity evasion attacks and the evaluation protocols built on them.

Every attack works on a whole batch at once and returns adversarial inputs
inside both the epsilon-ball around ``x`` and the valid input box.  Iterative
attacks keep the best candidate per sample rather than the last iterate:
a candidate that flips the prediction beats one that does not, and among
candidates with the same outcome the higher loss wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .network import Model
from .tensor import ContractError, GradientTape, Tensor

KINDS = ("fgsm", "pgd", "pgd_margin", "random_search")
PAPER_EPSILONS = tuple(k / 255 for k in (1, 2, 4, 8, 16, 32, 64, 96))


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None
    restarts: int = 1
    seed: int = 0
    kappa: float = 0.0
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon >= 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0 or (self.steps == 0 and self.kind in ("pgd", "pgd_margin")):
            raise ContractError(f"{self.kind} needs a positive step count, got {self.steps}")
        if self.restarts < 1:
            raise ContractError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_size is not None and not self.step_size >= 0:
            raise ContractError(f"step_size must be >= 0, got {self.step_size}")

    @property
    def alpha(self) -> float:
        """Step size; defaults to 2.5 * epsilon / steps."""
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.steps, 1)

    def describe(self) -> str:
        return (
            f"kind={self.kind};eps={self.epsilon!r};steps={self.steps};alpha={self.alpha!r};"
            f"restarts={self.restarts};seed={self.seed}"
        )


@dataclass
class AttackResult:
    config: AttackConfig
    clean_accuracy: float
    robust_accuracy: float
    success: np.ndarray = field(repr=False)
    x_adv: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.success)


def _project(v: np.ndarray, x: np.ndarray, eps: float, lo: float, hi: float) -> np.ndarray:
    return np.clip(np.clip(v, x - eps, x + eps), lo, hi)


def _loss_value(model: Model, x: np.ndarray, y: np.ndarray, loss: str, kappa: float):
    logits = model.forward(x)
    if loss == "ce":
        per = T.softmax_cross_entropy(logits, y, reduction="none")
    else:
        per = T.scale(T.margin(logits, y, kappa), -1.0)
    return logits, per


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray, loss: str = "ce", kappa: float = 0.0):
    """Per-sample attack loss, predictions, and the input gradient of the summed loss.

    ``loss`` is ``"ce"`` (cross-entropy) or ``"margin"`` (negated margin, so
    that larger is better for the attacker in both cases).
    """
    xt = Tensor(x)
    with GradientTape() as tape:
        tape.watch(xt)
        logits, per = _loss_value(model, xt, y, loss, kappa)
        total = T.tsum(per)
    (g,) = tape.gradient(total, [xt])
    g = g.data
    bad = ~np.isfinite(g.reshape(len(x), -1)).all(axis=1)
    if bad.any():
        raise AttackError(f"non-finite input gradient for sample {int(np.flatnonzero(bad)[0])}")
    return per.data.copy(), logits.data.argmax(axis=1), g


def _evaluate(model, x, y, loss, kappa):
    logits, per = _loss_value(model, Tensor(x), y, loss, kappa)
    return per.data.copy(), logits.data.argmax(axis=1)


class _Best:
    """Per-sample running best candidate under the (fooled, loss) ordering."""

    def __init__(self, x, loss, pred, y):
        self.x = x.copy()
        self.loss = loss.copy()
        self.fooled = pred != y
        self.y = y

    def offer(self, x, loss, pred):
        fooled = pred != self.y
        better = (fooled & ~self.fooled) | ((fooled == self.fooled) & (loss > self.loss))
        if better.any():
            self.x[better] = x[better]
            self.loss[better] = loss[better]
            self.fooled[better] = fooled[better]


def _prep(x, y):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ContractError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def fgsm(model: Model, x, y, epsilon: float, clip_min: float = 0.0, clip_max: float = 1.0) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` on the cross-entropy loss."""
    x, y = _prep(x, y)
    if not epsilon >= 0:
        raise ContractError(f"epsilon must be >= 0, got {epsilon}")
    _, _, g = loss_and_grad(model, x, y, "ce")
    return _project(x + epsilon * np.sign(g), x, epsilon, clip_min, clip_max)


def _pgd(model, x, y, cfg: AttackConfig, loss: str, init=None) -> np.ndarray:
    eps, alpha, lo, hi = cfg.epsilon, cfg.alpha, cfg.clip_min, cfg.clip_max
    rng = np.random.default_rng(cfg.seed)
    loss0, _, g0 = loss_and_grad(model, x, y, loss, cfg.kappa)

    # the one-step point is always a candidate, so PGD never does worse than FGSM
    x1 = _project(x + eps * np.sign(g0), x, eps, lo, hi)
    l1, p1 = _evaluate(model, x1, y, loss, cfg.kappa)
    best = _Best(x1, l1, p1, y)

    starts = [x]
    for _ in range(1, cfg.restarts):
        starts.append(np.clip(x + rng.uniform(-eps, eps, size=x.shape), lo, hi))
    if init is not None:
        init = _project(np.asarray(init, dtype=np.float64), x, eps, lo, hi)
        li, pi = _evaluate(model, init, y, loss, cfg.kappa)
        best.offer(init, li, pi)
        starts.append(init)

    for r, xr in enumerate(starts):
        g = g0 if r == 0 else loss_and_grad(model, xr, y, loss, cfg.kappa)[2]
        for _ in range(cfg.steps):
            xr = _project(xr + alpha * np.sign(g), x, eps, lo, hi)
            lr, pr, g = loss_and_grad(model, xr, y, loss, cfg.kappa)
            best.offer(xr, lr, pr)
    return best.x


def pgd(model: Model, x, y, config: AttackConfig, init=None) -> np.ndarray:
    """Projected signed-gradient ascent on cross-entropy.

    Restart 0 starts at ``x``; further restarts start uniformly in the ball.
    ``init`` (e.g. an adversary found at a smaller radius) is both a
    candidate and the start of one extra restart.
    """
    x, y = _prep(x, y)
    return _pgd(model, x, y, config, "ce", init)


def pgd_margin(model: Model, x, y, config: AttackConfig, init=None) -> np.ndarray:
    """PGD on the margin loss ``max(z_y - max_{j != y} z_j, -kappa)``.

    Samples that are already misclassified are returned unchanged.
    """
    x, y = _prep(x, y)
    x_adv = _pgd(model, x, y, config, "margin", init)
    wrong = model.predict(x) != y
    x_adv[wrong] = x[wrong]
    return x_adv


def random_search_attack(model: Model, x, y, config: AttackConfig) -> np.ndarray:
    """Gradient-free baseline: ``config.steps`` random sign-pattern corners of the ball."""
    x, y = _prep(x, y)
    eps, lo, hi = config.epsilon, config.clip_min, config.clip_max
    rng = np.random.default_rng(config.seed)
    l0, p0 = _evaluate(model, x, y, "ce", 0.0)
    best = _Best(x, l0, p0, y)
    for _ in range(config.steps):
        signs = rng.integers(0, 2, size=x.shape) * 2.0 - 1.0
        cand = _project(x + eps * signs, x, eps, lo, hi)
        lc, pc = _evaluate(model, cand, y, "ce", 0.0)
        best.offer(cand, lc, pc)
    return best.x


def craft(model: Model, x, y, config: AttackConfig, init=None) -> np.ndarray:
    if config.kind == "fgsm":
        return fgsm(model, x, y, config.epsilon, config.clip_min, config.clip_max)
    if config.kind == "pgd":
        return pgd(model, x, y, config, init)
    if config.kind == "pgd_margin":
        return pgd_margin(model, x, y, config, init)
    return random_search_attack(model, x, y, config)


def evaluate(model: Model, x, y, x_adv, config: AttackConfig, keep: bool = False) -> AttackResult:
    """Score ``x_adv`` on ``model``; a sample is robust only if clean and adversarial are both right."""
    x, y = _prep(x, y)
    clean = model.predict(x) == y
    adv = model.predict(x_adv) == y
    robust = clean & adv
    n = max(len(y), 1)
    return AttackResult(
        config=config,
        clean_accuracy=float(clean.sum() / n),
        robust_accuracy=float(robust.sum() / n),
        success=~robust,
        x_adv=np.asarray(x_adv).copy() if keep else None,
    )


def run_attack(model: Model, x, y, config: AttackConfig, init=None, keep: bool = False) -> AttackResult:
    x_adv = craft(model, x, y, config, init)
    return evaluate(model, x, y, x_adv, config, keep=keep)


def transfer_attack(source: Model, target: Model, x, y, config: AttackConfig,
                    keep: bool = False) -> AttackResult:
    """Craft with PGD (or ``config.kind``) on ``source``, score on ``target``."""
    if source.input_shape != target.input_shape:
        raise ContractError(f"input shapes differ: {source.input_shape} vs {target.input_shape}")
    cfg = config if config.kind != "random_search" else replace(config, kind="pgd")
    x_adv = craft(source, x, y, cfg)
    return evaluate(target, x, y, x_adv, cfg, keep=keep)


def epsilon_sweep(model: Model, x, y, kinds: Sequence[str] = ("fgsm", "pgd"),
                  epsilons: Sequence[float] = PAPER_EPSILONS,
                  base: AttackConfig | None = None) -> list[AttackResult]:
    """Robust accuracy for every (kind, epsilon) pair.

    PGD-type attacks at each radius are seeded with the adversary from the
    previous (smaller) radius, so their accuracy column cannot increase.
    """
    eps = [float(e) for e in epsilons]
    if not eps:
        raise ContractError("epsilon grid is empty")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ContractError(f"epsilons must be strictly increasing: {eps}")
    base = base or AttackConfig()
    x, y = _prep(x, y)
    out = []
    for kind in kinds:
        prev = None
        for e in eps:
            cfg = replace(base, kind=kind, epsilon=e)
            nested = kind in ("pgd", "pgd_margin")
            x_adv = craft(model, x, y, cfg, init=prev if nested else None)
            out.append(evaluate(model, x, y, x_adv, cfg))
            if nested:
                prev = x_adv
    return out
