"""Contrastive losses over multi-exit outputs.

Every output is identified by ``(exit, sample)``: exits are numbered
``0 .. n_exits-1`` with the backbone last, samples ``0 .. N-1`` where
``N = 2B`` for multi-view batches (row ``B + i`` pairs with row ``i``) and
``N = B`` otherwise.

For an anchor ``a`` with positive set ``P(a)`` and candidate set ``J(a)``::

    loss_a = -(1/|P(a)|) * sum_{p in P(a)} log( exp(z_a.z_p/tau) / sum_{j in J(a)} exp(z_a.z_j/tau) )

and a term is the mean of ``loss_a`` over anchors whose ``P`` is non-empty
(``per-anchor-mean``) or the plain double sum (``raw-sum``). SelfCon-M and
SelfCon-MU add an ``alpha``-weighted second term anchored on the
sub-network exits only.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "LossKind",
    "LossConfig",
    "PairIndexSets",
    "LossBreakdown",
    "KindViewError",
    "DegenerateBatchError",
    "BANK",
    "build_index_sets",
    "restrict_anchors",
    "contrastive_loss",
    "contrastive_loss_parts",
    "brute_force_oracle",
    "cross_entropy_loss",
]

# exit id used for memory-bank columns
BANK = -1

NORMALIZATIONS = ("per-anchor-mean", "raw-sum")


class KindViewError(ValueError):
    """Loss kind used with the wrong batch view (single vs multi)."""


class DegenerateBatchError(ValueError):
    """No anchor in the batch has a positive."""


class LossKind(str, enum.Enum):
    CE = "ce"
    SUPCON = "supcon"
    SUPCON_S = "supcon-s"
    NTXENT = "ntxent"
    SELFCON_M = "selfcon-m"
    SELFCON_S = "selfcon-s"
    SELFCON_MU = "selfcon-mu"
    SELFCON_SU = "selfcon-su"

    @property
    def contrastive(self) -> bool:
        return self is not LossKind.CE

    @property
    def multiview(self) -> bool:
        return self in (LossKind.SUPCON, LossKind.NTXENT, LossKind.SELFCON_M, LossKind.SELFCON_MU)

    @property
    def supervised(self) -> bool:
        return self in (LossKind.CE, LossKind.SUPCON, LossKind.SUPCON_S,
                        LossKind.SELFCON_M, LossKind.SELFCON_S)

    @property
    def selfcon(self) -> bool:
        return self.value.startswith("selfcon")

    @property
    def uses_exits(self) -> bool:
        return self.selfcon


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.SELFCON_S
    tau: float = 0.1
    alpha: float = 1.0
    normalization: str = "per-anchor-mean"

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


@dataclass(eq=False)
class PairIndexSets:
    """Anchors and their positive/candidate sets as dense masks.

    ``columns[c] = (exit, sample)``; live outputs come first in
    ``exit * N + sample`` order, memory-bank entries (exit ``BANK``,
    sample = bank slot) after them. ``terms[a]`` is 0 for the main term and 1
    for the alpha-weighted sub-network term.
    """

    anchors: np.ndarray      # (A, 2) int
    terms: np.ndarray        # (A,) int
    columns: np.ndarray      # (C, 2) int
    positive: np.ndarray     # (A, C) bool
    candidate: np.ndarray    # (A, C) bool
    n_exits: int
    N: int
    B: int

    def positives(self, a: int) -> list[tuple[int, int]]:
        return [tuple(map(int, c)) for c in self.columns[self.positive[a]]]

    def candidates(self, a: int) -> list[tuple[int, int]]:
        return [tuple(map(int, c)) for c in self.columns[self.candidate[a]]]

    def anchor_index(self, exit_: int, sample: int, term: int = 0) -> int:
        hit = np.flatnonzero((self.anchors[:, 0] == exit_) & (self.anchors[:, 1] == sample)
                             & (self.terms == term))
        if hit.size == 0:
            raise KeyError((exit_, sample, term))
        return int(hit[0])

    @property
    def empty_positive(self) -> np.ndarray:
        return ~self.positive.any(axis=1)

    def empty_positive_fraction(self, term: int = 0) -> float:
        rows = self.terms == term
        return float(self.empty_positive[rows].mean()) if rows.any() else 0.0

    def check(self) -> None:
        """Assert the structural invariants (anchor excluded, P within J)."""
        live = self.columns[:, 0] != BANK
        for a, (ex, i) in enumerate(self.anchors):
            self_col = live & (self.columns[:, 0] == ex) & (self.columns[:, 1] == i)
            assert not (self.candidate[a] & self_col).any(), "anchor in its own J"
            assert not (self.positive[a] & self_col).any(), "anchor in its own P"
        assert not (self.positive & ~self.candidate).any(), "P not a subset of J"


def _check_view(kind: LossKind, multiview: bool) -> None:
    if not kind.contrastive:
        raise KindViewError("cross-entropy has no contrastive index sets")
    if kind.multiview != multiview:
        need = "multi-view" if kind.multiview else "single-view"
        raise KindViewError(f"{kind.value} requires a {need} batch")


def _term_masks(labels, n_exits, N, B, anchor_exits, cand_exits, rule):
    E = n_exits
    col_exit = np.repeat(np.arange(E), N)
    col_sample = np.tile(np.arange(N), E)
    anchors = np.array([(l, i) for l in anchor_exits for i in range(N)], dtype=np.int64).reshape(-1, 2)
    a_exit, a_sample = anchors[:, :1], anchors[:, 1:2]
    cand = np.isin(col_exit, cand_exits)[None, :] & ~((col_exit[None, :] == a_exit)
                                                      & (col_sample[None, :] == a_sample))
    if rule == "label":
        y = np.asarray(labels)
        match = y[col_sample][None, :] == y[a_sample]
    elif rule == "pair":
        match = col_sample[None, :] == (a_sample + B) % (2 * B)
    elif rule == "self-or-pair":
        match = (col_sample[None, :] == a_sample) | (col_sample[None, :] == (a_sample + B) % (2 * B))
    elif rule == "self":
        match = col_sample[None, :] == a_sample
    else:  # pragma: no cover
        raise ValueError(rule)
    return anchors, cand & match, cand


def build_index_sets(kind, labels, multiview: bool, n_exits: int, B: int) -> PairIndexSets:
    kind = LossKind(kind)
    _check_view(kind, multiview)
    if n_exits < 1:
        raise ValueError("n_exits must be >= 1")
    N = 2 * B if multiview else B
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels for B={B} ({'multi' if multiview else 'single'}-view), "
                         f"got {labels.shape}")
    E, bb = n_exits, n_exits - 1
    subs = list(range(E - 1))
    everyone = list(range(E))
    K = LossKind

    plan = {
        K.SUPCON: [([bb], [bb], "label")],
        K.SUPCON_S: [([bb], [bb], "label")],
        K.NTXENT: [([bb], [bb], "pair")],
        K.SELFCON_M: [([bb], [bb], "label"), (subs, everyone, "label")],
        K.SELFCON_S: [(everyone, everyone, "label")],
        K.SELFCON_MU: [([bb], [bb], "pair"), (subs, everyone, "self-or-pair")],
        K.SELFCON_SU: [(everyone, everyone, "self")],
    }[kind]

    parts = []
    for term, (anchor_exits, cand_exits, rule) in enumerate(plan):
        if anchor_exits:
            parts.append((term, *_term_masks(labels, E, N, B, anchor_exits, cand_exits, rule)))
    anchors = np.concatenate([p[1] for p in parts])
    terms = np.concatenate([np.full(len(p[1]), p[0]) for p in parts])
    pos = np.concatenate([p[2] for p in parts])
    cand = np.concatenate([p[3] for p in parts])
    columns = np.stack([np.repeat(np.arange(E), N), np.tile(np.arange(N), E)], axis=1)
    return PairIndexSets(anchors, terms, columns, pos, cand, E, N, B)


def restrict_anchors(sets: PairIndexSets, keep) -> PairIndexSets:
    """Keep only the anchor rows selected by the boolean mask ``keep``."""
    keep = np.asarray(keep, dtype=bool)
    return replace(sets, anchors=sets.anchors[keep], terms=sets.terms[keep],
                   positive=sets.positive[keep], candidate=sets.candidate[keep])


@dataclass
class LossBreakdown:
    per_exit: np.ndarray                 # contribution of anchors from each exit
    anchors: int
    skipped: int                         # anchors with empty P
    per_term: list[float] = field(default_factory=list)

    @property
    def skipped_fraction(self) -> float:
        return self.skipped / self.anchors if self.anchors else 0.0


def contrastive_loss_parts(outputs, labels, cfg: LossConfig, sets: PairIndexSets | None = None,
                           bank=None) -> tuple[Tensor, LossBreakdown]:
    """Differentiable loss plus a per-exit / skipped-anchor breakdown."""
    E = outputs.n_exits
    N = outputs.rows
    kind = cfg.kind
    multiview = kind.multiview
    B = N // 2 if multiview else N
    if sets is None:
        sets = build_index_sets(kind, labels, multiview, E, B)
    elif sets.n_exits != E or sets.N != N:
        raise ValueError("index sets do not match the outputs")
    bank_matrix = None
    if bank is not None and len(bank):
        from .bank import augment_candidates

        if bank.dim != outputs.embeddings[0].shape[1]:
            raise ValueError(f"bank holds {bank.dim}-dim embeddings, outputs are "
                             f"{outputs.embeddings[0].shape[1]}-dim")
        sets = augment_candidates(sets, bank, labels if kind.supervised else None)
        bank_matrix = Tensor(bank.embedding_matrix())

    valid = ~sets.empty_positive
    if not valid.any():
        raise DegenerateBatchError("every anchor has an empty positive set")
    skipped = int((~valid).sum())
    if skipped:
        logger.debug("skipping %d of %d anchors with empty positive sets", skipped, len(valid))

    inv_tau = 1.0 / cfg.tau
    per_exit = np.zeros(E)
    per_term: list[float] = []
    total: Tensor | None = None
    live_cols = sets.columns[:, 0] != BANK
    for term, coef in ((0, 1.0), (1, cfg.alpha)):
        in_term = valid & (sets.terms == term)
        if term == 1 and coef == 0.0:
            continue
        n_valid = int(in_term.sum())
        if n_valid == 0:
            continue
        term_val: Tensor | None = None
        term_parts = np.zeros(E)
        for ex in np.unique(sets.anchors[in_term, 0]):
            rows = np.flatnonzero(in_term & (sets.anchors[:, 0] == ex))
            used = np.flatnonzero(sets.candidate[rows].any(axis=0))
            anchor_z = T.take_rows(outputs.embeddings[ex], sets.anchors[rows, 1])
            pool = outputs.candidates_for(int(ex))
            blocks = []
            used_cols = sets.columns[used]
            for k in range(E):
                js = used_cols[(used_cols[:, 0] == k) & live_cols[used], 1]
                if js.size:
                    blocks.append(T.take_rows(pool[k], js))
            bank_js = used_cols[~live_cols[used], 1]
            if bank_js.size:
                blocks.append(T.take_rows(bank_matrix, bank_js))
            cand_z = T.concat(blocks)
            sim = T.matmul(anchor_z, T.transpose(cand_z)) * inv_tau
            cmask = sets.candidate[np.ix_(rows, used)]
            pmask = sets.positive[np.ix_(rows, used)]
            lse = T.log_sum_exp(sim, axis=1, mask=cmask)
            npos = pmask.sum(axis=1).astype(np.float64)
            if cfg.normalization == "per-anchor-mean":
                lse_w = np.full(len(rows), 1.0 / n_valid)
                pos_w = pmask / npos[:, None] / n_valid
            else:
                lse_w = npos
                pos_w = pmask.astype(np.float64)
            part = T.tsum(T.mul(lse, lse_w)) - T.tsum(T.mul(sim, pos_w))
            term_parts[ex] += part.item()
            term_val = part if term_val is None else term_val + part
        per_term.append(term_val.item())
        per_exit += coef * term_parts
        if total is None:
            total = term_val if coef == 1.0 else term_val * coef
        else:
            total = total + term_val * coef
    return total, LossBreakdown(per_exit, len(valid), skipped, per_term)


def contrastive_loss(outputs, labels, cfg: LossConfig, sets: PairIndexSets | None = None,
                     bank=None) -> Tensor:
    return contrastive_loss_parts(outputs, labels, cfg, sets, bank)[0]


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    return T.softmax_cross_entropy(logits, labels)


# -- literal reference ----------------------------------------------------------

def _dot(u, v) -> float:
    return sum(float(a) * float(b) for a, b in zip(u, v))


def brute_force_oracle(outputs, labels, cfg: LossConfig, bank=None) -> float:
    """Nested-loop evaluation of the loss straight from the set definitions.

    Shares no code with :func:`contrastive_loss`: every set is enumerated
    with explicit conditions, denominators are plain sums of ``exp``.
    ``outputs`` may be an ``ExitOutputs`` or a list of (N, d) arrays ordered
    with the backbone last.
    """
    if hasattr(outputs, "embeddings"):
        Z = [np.asarray(e.data) for e in outputs.embeddings]
    else:
        Z = [np.asarray(getattr(e, "data", e)) for e in outputs]
    y = [int(v) for v in labels]
    E = len(Z)
    N = len(Z[0])
    kind = LossKind(cfg.kind)
    B = N // 2 if kind.multiview else N
    L = E - 1
    tau = cfg.tau
    mean_mode = cfg.normalization == "per-anchor-mean"
    bank_rows = [] if bank is None else list(bank.entries())

    def same_label(i, p):
        return y[p] == y[i]

    def paired(i, p):
        return p == (i + B) % (2 * B)

    def self_or_pair(i, p):
        return p == i or p == (i + B) % (2 * B)

    def same_sample(i, p):
        return p == i

    def term(anchor_exits, cand_exits, is_pos):
        losses = []
        for l in anchor_exits:
            for i in range(N):
                za = Z[l][i]
                P, J = [], []
                for k in cand_exits:
                    for j in range(N):
                        if k == l and j == i:
                            continue
                        J.append(Z[k][j])
                        if is_pos(i, j):
                            P.append(Z[k][j])
                for emb, lab, _ in bank_rows:
                    J.append(emb)
                    if kind.supervised and lab == y[i]:
                        P.append(emb)
                if not P:
                    continue
                denom = 0.0
                for zj in J:
                    denom += math.exp(_dot(za, zj) / tau)
                s = 0.0
                for zp in P:
                    s += -math.log(math.exp(_dot(za, zp) / tau) / denom)
                losses.append(s / len(P) if mean_mode else s)
        if not losses:
            return 0.0, 0
        return (sum(losses) / len(losses) if mean_mode else sum(losses)), len(losses)

    subs = range(L)
    allx = range(E)
    K = LossKind
    if kind is K.SUPCON or kind is K.SUPCON_S:
        parts = [term([L], [L], same_label)]
    elif kind is K.NTXENT:
        parts = [term([L], [L], paired)]
    elif kind is K.SELFCON_M:
        parts = [term([L], [L], same_label), term(subs, allx, same_label)]
    elif kind is K.SELFCON_S:
        parts = [term(allx, allx, same_label)]
    elif kind is K.SELFCON_MU:
        parts = [term([L], [L], paired), term(subs, allx, self_or_pair)]
    elif kind is K.SELFCON_SU:
        parts = [term(allx, allx, same_sample)]
    else:
        raise KindViewError("cross-entropy has no oracle")
    value = parts[0][0]
    if len(parts) > 1:
        value += cfg.alpha * parts[1][0]
    return value
