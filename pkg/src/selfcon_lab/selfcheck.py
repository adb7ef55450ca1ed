"""Built-in verification suites run by ``selfcon-lab selfcheck``.

* gradcheck: autodiff gradients of every contrastive loss vs central
  finite differences, through the l2 normalisation;
* oracle: the vectorised loss vs the nested-loop reference;
* dpi: the data-processing inequality on random discrete Markov chains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ExitOutputs
from .losses import LossConfig, LossKind, brute_force_oracle, contrastive_loss
from .mi import check_dpi
from .tensor import Tensor

CONTRASTIVE_KINDS = tuple(k for k in LossKind if k.contrastive)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst {self.worst:.3g} {self.detail}".rstrip()


def random_case(rng: np.random.Generator, kind: LossKind, max_outputs: int = 16, dim: int = 4):
    """Random raw (unnormalised) exit outputs and labels for ``kind``.

    Labels come from a small alphabet so that positive sets are usually,
    but not always, non-empty.
    """
    n_exits = 1 if not kind.uses_exits else int(rng.integers(2, 4))
    views = 2 if kind.multiview else 1
    b_max = max(1, max_outputs // (n_exits * views))
    B = int(rng.integers(1 if kind.multiview else 2, b_max + 1))
    base = rng.integers(0, max(1, B // 2) + 1, size=B)
    labels = np.concatenate([base, base]) if kind.multiview else base
    raw = [rng.standard_normal((views * B, dim)) for _ in range(n_exits)]
    return raw, labels


def outputs_from_raw(raw, requires_grad: bool = False):
    leaves = [Tensor(r, requires_grad=requires_grad) for r in raw]
    embs = [T.l2_normalize(x) for x in leaves]
    return leaves, ExitOutputs(embs, [], [])


def has_positive(kind: LossKind, labels, n_exits: int) -> bool:
    from .losses import build_index_sets

    N = len(labels)
    B = N // 2 if kind.multiview else N
    sets = build_index_sets(kind, labels, kind.multiview, n_exits, B)
    return bool((~sets.empty_positive).any())


def finite_difference_grad(f, arrays, eps: float = 1e-6) -> list[np.ndarray]:
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + eps
            up = f()
            a[idx] = old - eps
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck_suite(batches_per_kind: int = 20, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, cases, failures = 0.0, 0, []
    for kind in CONTRASTIVE_KINDS:
        done = 0
        while done < batches_per_kind:
            raw, labels = random_case(rng, kind, max_outputs=12, dim=3)
            if not has_positive(kind, labels, len(raw)):
                continue
            cfg = LossConfig(kind, tau=float(rng.uniform(0.2, 1.0)), alpha=float(rng.uniform(0.5, 1.5)))
            leaves, out = outputs_from_raw(raw, requires_grad=True)
            contrastive_loss(out, labels, cfg).backward()
            analytic = [leaf.grad for leaf in leaves]

            def f():
                with T.no_grad():
                    return contrastive_loss(outputs_from_raw(raw)[1], labels, cfg).item()

            numeric = finite_difference_grad(f, raw)
            a = np.concatenate([g.ravel() for g in analytic])
            n = np.concatenate([g.ravel() for g in numeric])
            err = float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))
            worst = max(worst, err)
            if err >= tol:
                failures.append(f"{kind.value}:{err:.2g}")
            done += 1
            cases += 1
    return SuiteResult("gradcheck", not failures, cases, worst, " ".join(failures[:5]))


def oracle_suite(batches: int = 1000, seed: int = 1, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, cases, failures = 0.0, 0, []
    while cases < batches:
        kind = CONTRASTIVE_KINDS[cases % len(CONTRASTIVE_KINDS)]
        raw, labels = random_case(rng, kind)
        if not has_positive(kind, labels, len(raw)):
            continue
        cfg = LossConfig(kind, tau=float(rng.uniform(0.05, 1.0)), alpha=float(rng.uniform(0, 2)),
                         normalization=("per-anchor-mean", "raw-sum")[int(rng.integers(2))])
        _, out = outputs_from_raw(raw)
        with T.no_grad():
            fast = contrastive_loss(out, labels, cfg).item()
        slow = brute_force_oracle(out, labels, cfg)
        err = abs(fast - slow)
        worst = max(worst, err)
        if not err < tol:
            failures.append(f"{kind.value}:{err:.2g}")
        cases += 1
    return SuiteResult("oracle", not failures, cases, worst, " ".join(failures[:5]))


def dpi_suite(chains: int = 1000, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    violations, worst = 0, -np.inf
    for c in range(chains):
        i_fg, i_ft = check_dpi(seed + c)
        worst = max(worst, i_fg - i_ft)
        if i_fg > i_ft + tol:
            violations += 1
    return SuiteResult("dpi", violations == 0, chains, float(worst),
                       f"{violations} violations" if violations else "")


def run_selfcheck(quick: bool = False) -> list[SuiteResult]:
    if quick:
        return [gradcheck_suite(3), oracle_suite(100), dpi_suite(100)]
    return [gradcheck_suite(), oracle_suite(), dpi_suite()]
