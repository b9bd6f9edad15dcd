"""Evaluation protocols that populate report sections.

Each builder takes models and data, runs the relevant module operations,
and writes tables whose rows carry a ``provenance`` column naming the model,
data, and configuration that produced the numbers.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attacks import PAPER_EPSILONS, AttackConfig, epsilon_sweep, run_attack, transfer_attack
from .data import Dataset
from .lipschitz import layer_bound_report
from .network import Model, insert_forge
from .report import FAILED, PASS, WARN, Report, Section
from .smoothing import SmoothingConfig, certified_accuracy_curve
from .tensor import ContractError, counters
from .train import accuracy, calibrate_forge

logger = logging.getLogger(__name__)

C_RATIO_GRID = (2.0**-8, 2.0**-7, 2.0**-6)
DEFAULT_RADII = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.75, 1.0)

SUITE_LABEL = "fgsm, pgd (CE), pgd_margin (CW-style margin loss, kappa=0), random_search; not AutoAttack"
CW_NOTE = "CW-Linf realized as PGD on the margin loss max(z_y - max_{j!=y} z_j, -kappa)"


def _prov(model: Model, data: Dataset, extra: str = "") -> str:
    parts = [f"model={model.name}", f"data={data.provenance}"]
    if extra:
        parts.append(extra)
    return ";".join(parts)


# -- bounds ------------------------------------------------------------------


def bounds_section(section: Section, model: Model, data: Dataset, seed: int = 0,
                   per_sample: bool = True, label: str | None = None) -> bool:
    """Per-layer bound table; returns whether every masked bound is <= its unmasked one."""
    rep = layer_bound_report(model, data.inputs, seed=seed)
    label = label or model.name
    prov = _prov(model, data, f"power_seed={seed}")
    layers = section.table("layers", [
        "model", "layer", "kind", "rows", "cols", "spectral_norm", "gershgorin_bound",
        "empirical_lipschitz", "forge_threshold", "masked_gershgorin_mean", "masked_gershgorin_max",
        "masked_sigma_mean", "masked_sigma_max", "masked_le_unmasked", "shape_conditional", "provenance",
    ])
    samples = section.table("samples", [
        "model", "layer", "sample", "masked_gershgorin", "gershgorin_bound", "masked_sigma",
        "spectral_norm", "provenance",
    ]) if per_sample else None
    all_ok = True
    for lb in rep.layers:
        ok = None
        if lb.masked_gershgorin is not None:
            ok = bool(np.all(lb.masked_gershgorin <= lb.gershgorin_bound)
                      and np.all(lb.masked_sigma <= lb.spectral_norm + 1e-9))
            all_ok &= ok
            if samples is not None:
                for s, (g, m) in enumerate(zip(lb.masked_gershgorin, lb.masked_sigma)):
                    samples.add(label, lb.index, s, float(g), lb.gershgorin_bound, float(m),
                                lb.spectral_norm, prov)
        layers.add(label, lb.index, lb.kind, lb.matrix_shape[0], lb.matrix_shape[1], lb.spectral_norm,
                   lb.gershgorin_bound, lb.empirical_lipschitz, lb.forge_threshold,
                   lb.masked_gershgorin_mean, lb.masked_gershgorin_max, lb.masked_sigma_mean,
                   lb.masked_sigma_max, ok, lb.shape_conditional, prov)
    section.set(**{f"{label}.product_bound": rep.product_bound,
                   f"{label}.product_bound_with_activations": rep.product_bound_with_activations})
    if rep.activation_flags:
        section.set(**{f"{label}.activation_constants": "; ".join(rep.activation_flags)})
    return all_ok


# -- attacks and sweeps ------------------------------------------------------


def sweep_rows(section: Section, model: Model, data: Dataset, kinds: Sequence[str],
               epsilons: Sequence[float], base: AttackConfig, label: str | None = None) -> list:
    results = epsilon_sweep(model, data.inputs, data.labels, kinds, epsilons, base)
    t = section.table("sweep", ["model", "kind", "epsilon", "clean_accuracy", "robust_accuracy", "provenance"])
    for r in results:
        t.add(label or model.name, r.config.kind, r.config.epsilon, r.clean_accuracy, r.robust_accuracy,
              _prov(model, data, r.config.describe() + ";nested=1"))
    return results


def curve_rows(section: Section, model: Model, data: Dataset, radii: Sequence[float],
               config: SmoothingConfig, label: str | None = None, certificates: bool = False):
    curve = certified_accuracy_curve(model, data.inputs, data.labels, radii, config)
    label = label or model.name
    prov = _prov(model, data, config.describe())
    t = section.table("curve", ["model", "radius", "certified_accuracy", "provenance"])
    for r, a in zip(curve.radii, curve.accuracy):
        t.add(label, float(r), float(a), prov)
    if certificates:
        c = section.table("certificates", ["model", "index", "class", "radius", "pa_lower", "provenance"])
        for i, cert in enumerate(curve.certificates):
            c.add(label, i, cert.prediction, cert.radius, cert.pa_lower, prov)
    section.set(**{f"{label}.smoothed_accuracy": curve.smoothed_accuracy})
    return curve


# -- gradient-masking checklist ------------------------------------------------


@dataclass(frozen=True)
class MaskingConfig:
    """Settings for the five-item gradient-masking checklist."""

    epsilon: float = 8 / 255
    steps: int = 10
    budget: int = 100
    seeds: int = 5
    epsilons: tuple = PAPER_EPSILONS
    terminal_accuracy: float = 0.01
    radii: tuple = DEFAULT_RADII
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    seed: int = 0

    def attack(self, **kw) -> AttackConfig:
        return replace(AttackConfig(kind="pgd", epsilon=self.epsilon, steps=self.steps, seed=self.seed), **kw)


SECTIONS = ("whitebox_vs_blackbox", "iterative_vs_onestep", "epsilon_to_zero", "transfer", "smoothing")


def _guard(report: Report, name: str, fn) -> None:
    section = report.section(name)
    try:
        section.verdict = fn(section)
    except Exception as e:  # a failing item must not stop the others
        logger.exception("checklist section %s failed", name)
        section.verdict = FAILED
        section.set(error=f"{type(e).__name__}: {e}")


def verify_masking(original: Model, forged: Model, data: Dataset, config: MaskingConfig = MaskingConfig(),
                   baseline: Model | None = None, report: Report | None = None) -> Report:
    """Run the five checklist items on ``original`` and ``forged``.

    ``baseline`` is an optional undefended model that joins the epsilon sweep.
    """
    if original.input_shape != forged.input_shape:
        raise ContractError(f"input shapes differ: {original.input_shape} vs {forged.input_shape}")
    report = report or Report("verify-masking")
    models = [("original", original), ("forged", forged)]
    x, y = data.inputs, data.labels

    def whitebox(sec: Section) -> str:
        sec.set(budget=config.budget, seeds=config.seeds, rule="pgd <= random_search for every seed")
        t = sec.table("seeds", ["model", "seed", "pgd_accuracy", "random_search_accuracy", "provenance"])
        ok = True
        for label, m in models:
            diffs = []
            for s in range(config.seeds):
                p = config.attack(steps=config.budget, seed=config.seed + s)
                r = replace(p, kind="random_search")
                a_p = run_attack(m, x, y, p).robust_accuracy
                a_r = run_attack(m, x, y, r).robust_accuracy
                diffs.append(a_r - a_p)
                t.add(label, s, a_p, a_r, _prov(m, data, p.describe() + f";queries={r.steps}"))
            ok &= min(diffs) >= 0
            sec.set(**{f"{label}.mean_gap": float(np.mean(diffs)), f"{label}.min_gap": float(min(diffs))})
        return PASS if ok else WARN

    sweeps = {}

    def onestep(sec: Section) -> str:
        base = config.attack()
        sec.set(rule="pgd <= fgsm at every epsilon", nesting="pgd at each radius seeded with the previous adversary")
        ok = True
        swept = models + ([("baseline", baseline)] if baseline is not None else [])
        for label, m in swept:
            res = sweep_rows(sec, m, data, ("fgsm", "pgd"), config.epsilons, base, label)
            sweeps[label] = res
            n = len(config.epsilons)
            f, p = res[:n], res[n:]
            ok &= all(b.robust_accuracy <= a.robust_accuracy for a, b in zip(f, p))
        return PASS if ok else WARN

    def to_zero(sec: Section) -> str:
        if not sweeps:
            raise RuntimeError("epsilon sweep unavailable")
        sec.set(rule=f"pgd non-increasing in epsilon and <= {config.terminal_accuracy!r} at the largest epsilon")
        t = sec.table("terminal", ["model", "clean_accuracy", "epsilon", "robust_accuracy", "non_increasing",
                                   "provenance"])
        ok = True
        n = len(config.epsilons)
        for label, res in sweeps.items():
            p = res[n:]
            mono = all(b.robust_accuracy <= a.robust_accuracy for a, b in zip(p, p[1:]))
            last = p[-1]
            ok &= mono and last.robust_accuracy <= config.terminal_accuracy
            t.add(label, last.clean_accuracy, last.config.epsilon, last.robust_accuracy, mono,
                  f"model={label};{last.config.describe()}")
        return PASS if ok else WARN

    def transfer(sec: Section) -> str:
        cfg = config.attack()
        direct_o = run_attack(original, x, y, cfg).robust_accuracy
        direct_f = run_attack(forged, x, y, cfg).robust_accuracy
        moved = transfer_attack(original, forged, x, y, cfg).robust_accuracy
        sec.set(rule="transfer accuracy on forged >= direct accuracy of original")
        t = sec.table("transfer", ["source", "target", "robust_accuracy", "provenance"])
        prov = f"data={data.provenance};{cfg.describe()}"
        t.add("original", "original", direct_o, prov)
        t.add("forged", "forged", direct_f, prov)
        t.add("original", "forged", moved, prov)
        return PASS if moved >= direct_o else WARN

    def smoothing(sec: Section) -> str:
        sec.set(rule="certified accuracy non-increasing in radius",
                note="forge thresholds are not recalibrated under noise; noisy inputs can leave the "
                     "calibration distribution")
        ok = True
        for label, m in models:
            c = curve_rows(sec, m, data, config.radii, config.smoothing, label)
            ok &= bool(np.all(np.diff(c.accuracy) <= 0))
        return PASS if ok else WARN

    for name, fn in zip(SECTIONS, (whitebox, onestep, to_zero, transfer, smoothing)):
        _guard(report, name, fn)
    return report


# -- c_ratio ablation ---------------------------------------------------------


def ablation(model: Model, calib: Dataset, test: Dataset, grid: Sequence[float] = C_RATIO_GRID,
             attack: AttackConfig = AttackConfig(), policy="all", bound_data: Dataset | None = None,
             report: Report | None = None) -> Report:
    """Standard, PGD and margin-PGD accuracy of ``model`` forged at each grid point.

    The first row is the unforged model.  A second table checks, per layer
    and grid point, that every sample's masked bound is at most the unmasked one.
    """
    report = report or Report("ablation")
    sec = report.section("ablation")
    bound_data = bound_data or test
    sec.set(suite=SUITE_LABEL, cw=CW_NOTE, policy=str(policy))
    grid_t = sec.table("grid", ["c_ratio", "standard_accuracy", "pgd_accuracy", "cw_accuracy", "provenance"])
    mask_t = sec.table("masked", ["c_ratio", "layer", "samples", "masked_gershgorin_le_fraction",
                                  "masked_sigma_le_fraction", "masked_gershgorin_mean", "gershgorin_bound",
                                  "masked_sigma_mean", "spectral_norm", "provenance"])
    x, y = test.inputs, test.labels
    pgd_cfg = replace(attack, kind="pgd")
    cw_cfg = replace(attack, kind="pgd_margin")

    def row(c_ratio, m):
        grid_t.add(c_ratio, accuracy(m, test), run_attack(m, x, y, pgd_cfg).robust_accuracy,
                   run_attack(m, x, y, cw_cfg).robust_accuracy,
                   _prov(m, test, f"c_ratio={c_ratio!r};{pgd_cfg.describe()}"))

    row(None, model)
    base = insert_forge(model, policy)
    all_ok = True
    for c in grid:
        before = counters.backward_passes
        t0 = time.perf_counter()
        forged = calibrate_forge(base, calib, c_ratio=c)
        cost = time.perf_counter() - t0
        if counters.backward_passes != before:
            raise AssertionError("calibration ran a backward pass")
        row(c, forged)
        rep = layer_bound_report(forged, bound_data.inputs)
        for lb in rep.layers:
            if lb.masked_gershgorin is None:
                continue
            g_ok = lb.masked_gershgorin <= lb.gershgorin_bound
            s_ok = lb.masked_sigma <= lb.spectral_norm + 1e-9
            all_ok &= bool(g_ok.all() and s_ok.all())
            mask_t.add(c, lb.index, len(g_ok), float(g_ok.mean()), float(s_ok.mean()),
                       lb.masked_gershgorin_mean, lb.gershgorin_bound, lb.masked_sigma_mean, lb.spectral_norm,
                       _prov(forged, bound_data, f"c_ratio={c!r}"))
        report.timing[f"calibration_seconds[{c!r}]"] = round(cost, 6)
    sec.verdict = PASS if all_ok else WARN
    return report
