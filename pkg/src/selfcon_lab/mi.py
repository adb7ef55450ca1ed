"""Mutual-information tools: exact discrete MI, Markov-chain DPI checks,
variational estimators (InfoNCE, MINE, NWJ) and the encoder feature probe.

All values are in nats.
"""

from __future__ import annotations

import csv
import enum
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import Linear, MultiExitEncoder
from .optim import Adam
from .tensor import Tensor

__all__ = [
    "DiscreteJoint",
    "InvalidPMFError",
    "exact_discrete_mi",
    "markov_chain_mi",
    "check_dpi",
    "EstimatorKind",
    "CriticConfig",
    "Critic",
    "MIEstimate",
    "estimate_mi",
    "gaussian_pair",
    "gaussian_mi",
    "random_orthogonal_projection",
    "ProbeReport",
    "mi_probe",
    "DEFAULT_PAIRS",
]


class InvalidPMFError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteJoint:
    pmf: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=np.float64)
        if p.ndim != 2 or p.size == 0:
            raise InvalidPMFError(f"joint pmf must be a non-empty matrix, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or (p < 0).any():
            raise InvalidPMFError("joint pmf has negative or non-finite entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise InvalidPMFError(f"joint pmf sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "pmf", p)


def exact_discrete_mi(joint) -> float:
    """I(X;Y) = sum p(x,y) ln(p(x,y) / (p(x) p(y))), with 0 ln 0 = 0."""
    p = joint.pmf if isinstance(joint, DiscreteJoint) else DiscreteJoint(joint).pmf
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))


def markov_chain_mi(p_g, p_t_given_g, p_f_given_t) -> tuple[float, float]:
    """Exact (I(F;G), I(F;T)) for the chain G -> T -> F.

    ``p_t_given_g[g, t]`` and ``p_f_given_t[t, f]`` are row-stochastic.
    """
    p_g = np.asarray(p_g, dtype=np.float64)
    a = np.asarray(p_t_given_g, dtype=np.float64)
    b = np.asarray(p_f_given_t, dtype=np.float64)
    p_gt = p_g[:, None] * a                 # p(g, t)
    p_tf = p_gt.sum(axis=0)[:, None] * b    # p(t, f)
    p_gf = p_gt @ b                         # p(g, f) = sum_t p(g,t) p(f|t)
    return exact_discrete_mi(_renorm(p_gf)), exact_discrete_mi(_renorm(p_tf))


def _renorm(p: np.ndarray) -> np.ndarray:
    # composition drifts the total by a few ulps
    return p / p.sum()


def check_dpi(chain_seed: int, max_symbols: int = 8) -> tuple[float, float]:
    """Random chain G -> T -> F over at most ``max_symbols`` symbols each.

    Returns ``(I(F;G), I(F;T))``. Conditionals are Dirichlet draws with a
    random concentration so that both near-deterministic and near-uniform
    channels occur.
    """
    rng = np.random.default_rng(chain_seed)
    ng, nt, nf = rng.integers(2, max_symbols + 1, size=3)

    def simplex(shape):
        conc = 10.0 ** rng.uniform(-1.5, 1.0)
        return rng.dirichlet(np.full(shape[-1], conc), size=shape[:-1])

    p_g = simplex((ng,))
    return markov_chain_mi(p_g, simplex((ng, nt)), simplex((nt, nf)))


# -- variational estimators ---------------------------------------------------

class EstimatorKind(str, enum.Enum):
    INFONCE = "InfoNCE"
    MINE = "MINE"
    NWJ = "NWJ"


@dataclass(frozen=True)
class CriticConfig:
    hidden: int = 64
    batch_size: int = 64
    lr: float = 1e-3
    ema_rate: float = 0.99
    holdout_fraction: float = 0.5


class Critic:
    """T(x, y): three affine layers with ReLU in between on concatenated (x, y)."""

    def __init__(self, x_dim: int, y_dim: int, hidden: int, rng: np.random.Generator):
        self.l1 = Linear("critic.layer0", x_dim + y_dim, hidden, rng, "glorot-uniform")
        self.l2 = Linear("critic.layer1", hidden, hidden, rng, "glorot-uniform")
        self.l3 = Linear("critic.layer2", hidden, 1, rng, "glorot-uniform")
        self.x_dim = x_dim

    def parameters(self):
        return self.l1.parameters() + self.l2.parameters() + self.l3.parameters()

    def _first_layer_split(self):
        w = self.l1.weight.tensor
        wx = T.take_rows(w, np.arange(self.x_dim))
        wy = T.take_rows(w, np.arange(self.x_dim, w.shape[0]))
        return wx, wy

    def _tail(self, h: Tensor) -> Tensor:
        return self.l3(T.relu(self.l2(T.relu(h))))

    def scores(self, x: Tensor, y: Tensor) -> Tensor:
        """Scores of aligned pairs (x_i, y_i), shape (n,)."""
        h = self.l1(T.concat([x, y], axis=1))
        return T.reshape(self._tail(h), (x.shape[0],))

    def pair_scores(self, x: Tensor, y: Tensor) -> Tensor:
        """Score matrix S[i, j] = T(x_i, y_j), shape (n, n)."""
        n = x.shape[0]
        wx, wy = self._first_layer_split()
        hx = T.reshape(T.matmul(x, wx) + self.l1.bias.tensor, (n, 1, -1))
        hy = T.reshape(T.matmul(y, wy), (1, n, -1))
        h = T.reshape(hx + hy, (n * n, -1))
        return T.reshape(self._tail(h), (n, n))


@dataclass(frozen=True)
class MIEstimate:
    kind: EstimatorKind
    value: float
    n_samples: int
    steps: int
    seed: int
    batch_size: int = 0
    degenerate: bool = False
    flags: tuple[str, ...] = ()
    pair: str = ""


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _standardize(train: np.ndarray, other: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (other - mu) / sd


def _infonce(scores: Tensor) -> Tensor:
    n = scores.shape[0]
    diag = T.tsum(T.mul(scores, np.eye(n))) * (1.0 / n)
    return diag - T.mean(T.log_sum_exp(scores, axis=1)) + math.log(n)


def _log_mean_exp(t: Tensor) -> Tensor:
    return T.log_sum_exp(t, axis=0) - math.log(t.shape[0])


def estimate_mi(kind, samples_x, samples_y, critic_cfg: CriticConfig | None = None,
                steps: int = 1000, seed: int = 0) -> MIEstimate:
    """Fit a critic on half the samples, report the bound on the other half.

    InfoNCE:  mean_i log[ e^{T(x_i,y_i)} / ((1/N) sum_j e^{T(x_i,y_j)}) ]
    MINE:     mean_p[T] - log mean_q[e^T]   (EMA-corrected gradient while training)
    NWJ:      mean_p[T] - mean_q[e^{T-1}]
    Marginal samples q pair x_i with in-batch shuffled y.
    """
    kind = EstimatorKind(kind)
    cfg = critic_cfg or CriticConfig()
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = _as_2d(samples_x)
    y = _as_2d(samples_y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    if np.ptp(x, axis=0).max() == 0 or np.ptp(y, axis=0).max() == 0:
        return MIEstimate(kind, 0.0, n, 0, seed, cfg.batch_size, degenerate=True)

    rng = np.random.default_rng([seed, zlib.crc32(kind.value.encode())])
    perm = rng.permutation(n)
    n_hold = int(round(cfg.holdout_fraction * n))
    tr, ho = perm[n_hold:], perm[:n_hold]
    x_tr, x_ho = _standardize(x[tr], x[ho])
    y_tr, y_ho = _standardize(y[tr], y[ho])
    batch = min(cfg.batch_size, len(tr), len(ho))

    critic = Critic(x.shape[1], y.shape[1], cfg.hidden, rng)
    opt = Adam(critic.parameters(), lr=cfg.lr)
    ema = None
    for _ in range(steps):
        idx = rng.choice(len(tr), size=batch, replace=False)
        xb, yb = Tensor(x_tr[idx]), Tensor(y_tr[idx])
        if kind is EstimatorKind.INFONCE:
            objective = _infonce(critic.pair_scores(xb, yb))
        else:
            yq = Tensor(y_tr[idx[rng.permutation(batch)]])
            joint = T.mean(critic.scores(xb, yb))
            marg = critic.scores(xb, yq)
            if kind is EstimatorKind.NWJ:
                objective = joint - T.mean(T.exp(marg - 1.0))
            else:
                mean_exp = T.mean(T.exp(marg))
                cur = mean_exp.item()
                ema = cur if ema is None else cfg.ema_rate * ema + (1.0 - cfg.ema_rate) * cur
                # gradient of log E_q[e^T] estimated with the smoothed denominator
                objective = joint - mean_exp * (1.0 / ema)
        (-objective).backward()
        opt.step()

    with T.no_grad():
        value = _evaluate(kind, critic, x_ho, y_ho, batch, rng)
    return MIEstimate(kind, value, n, steps, seed, batch)


def _evaluate(kind, critic: Critic, x: np.ndarray, y: np.ndarray, batch: int,
              rng: np.random.Generator) -> float:
    if kind is EstimatorKind.INFONCE:
        vals = []
        for start in range(0, len(x) - batch + 1, batch):
            sl = slice(start, start + batch)
            vals.append(_infonce(critic.pair_scores(Tensor(x[sl]), Tensor(y[sl]))).item())
        return float(np.mean(vals))
    joint = critic.scores(Tensor(x), Tensor(y)).data
    marg = critic.scores(Tensor(x), Tensor(y[rng.permutation(len(y))])).data
    if kind is EstimatorKind.NWJ:
        return float(joint.mean() - np.mean(np.exp(marg - 1.0)))
    m = marg.max()
    return float(joint.mean() - (m + math.log(np.mean(np.exp(marg - m)))))


def gaussian_pair(rho: float, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x, y


def gaussian_mi(rho: float) -> float:
    return -0.5 * math.log(1.0 - rho * rho)


# -- feature probe ------------------------------------------------------------

DEFAULT_PAIRS = ("X;T2", "Y;T2", "F;T2", "X;F", "Y;F")
_ESTIMATOR_ORDER = (EstimatorKind.INFONCE, EstimatorKind.MINE, EstimatorKind.NWJ)


def random_orthogonal_projection(src_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """(src_dim, out_dim) matrix with orthonormal columns."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((src_dim, out_dim)))
    return q * np.sign(np.diag(r))


@dataclass
class ProbeReport:
    rows: list[MIEstimate] = field(default_factory=list)

    HEADER = ("pair", "estimator", "value_nats", "n_samples", "steps", "seed")

    def means(self) -> dict[str, float]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            out.setdefault(r.pair, []).append(r.value)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def value(self, pair: str, kind) -> float:
        kind = EstimatorKind(kind)
        for r in self.rows:
            if r.pair == pair and r.kind is kind:
                return r.value
        raise KeyError((pair, kind))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.pair, r.kind.value, repr(r.value), r.n_samples, r.steps, r.seed])

    def means_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for pair, v in self.means().items():
                r = next(r for r in self.rows if r.pair == pair)
                w.writerow([pair, "mean", repr(v), r.n_samples, r.steps, r.seed])


def _parse_pair(pair: str) -> tuple[str, str]:
    parts = [p.strip() for p in pair.split(";")]
    if len(parts) != 2 or not all(parts):
        raise ValueError(f"bad MI pair {pair!r}; expected e.g. 'F;T2'")
    return parts[0], parts[1]


def extract_variables(encoder: MultiExitEncoder, dataset, names: Sequence[str]) -> dict[str, np.ndarray]:
    """X (inputs), Y (one-hot labels), T<l> (block activations), F (backbone
    embedding) and G (first sub-network embedding) for the whole dataset."""
    with T.no_grad():
        out = encoder.forward(Tensor(dataset.samples))
    vars_: dict[str, np.ndarray] = {}
    for name in names:
        if name == "X":
            vars_[name] = dataset.samples
        elif name == "Y":
            vars_[name] = np.eye(dataset.classes)[dataset.labels]
        elif name == "F":
            vars_[name] = out.backbone.data
        elif name == "G":
            if out.n_exits < 2:
                raise ValueError("variable G needs an encoder with a sub-network exit")
            vars_[name] = out.embeddings[0].data
        elif name.startswith("T") and name[1:].isdigit() and 1 <= int(name[1:]) <= encoder.L:
            vars_[name] = out.block_activations[int(name[1:]) - 1].data
        else:
            raise ValueError(f"unknown probe variable {name!r}")
    return vars_


def _probe_job(args):
    kind, x, y, cfg, steps, seed, pair, flags = args
    est = estimate_mi(kind, x, y, cfg, steps, seed)
    return MIEstimate(est.kind, est.value, est.n_samples, est.steps, est.seed,
                      est.batch_size, est.degenerate, flags, pair)


def mi_probe(encoder: MultiExitEncoder, dataset, targets: Sequence[str] = DEFAULT_PAIRS,
             proj_dim: int = 20, seed: int = 0, steps: int = 1000,
             critic_cfg: CriticConfig | None = None,
             estimators: Sequence = _ESTIMATOR_ORDER, workers: int = 1) -> ProbeReport:
    """Estimate MI between encoder variables after a fixed random projection.

    Each variable is projected to ``proj_dim`` dimensions by a seeded random
    orthogonal map (variables with fewer dimensions are kept whole and the
    estimate is flagged ``proj-clipped``).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    pairs = [_parse_pair(p) for p in targets]
    names = sorted({n for p in pairs for n in p})
    raw = extract_variables(encoder, dataset, names)
    projected: dict[str, np.ndarray] = {}
    clipped: set[str] = set()
    for name in names:
        v = raw[name]
        if v.shape[1] <= proj_dim:
            if v.shape[1] < proj_dim:
                clipped.add(name)
            projected[name] = v
        else:
            q = random_orthogonal_projection(v.shape[1], proj_dim, zlib.crc32(f"{seed}:{name}".encode()))
            projected[name] = v @ q
    jobs = []
    for kind in estimators:
        for a, b in pairs:
            flags = tuple(f"proj-clipped:{n}" for n in (a, b) if n in clipped)
            jobs.append((EstimatorKind(kind), projected[a], projected[b], critic_cfg, steps, seed,
                         f"{a};{b}", flags))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_probe_job, jobs))
    else:
        rows = [_probe_job(j) for j in jobs]
    return ProbeReport(rows)
