"""Variational Bayesian phylogenetic inference.

The variational family factorizes into an SBN over topologies and a diagonal
Lognormal over branch lengths whose (mu, log sigma) are amortized across
topologies by one of three parameterizations: per-split tables, split plus
primary-subsplit-pair tables, or a GNN over embedded node features.

Training maximizes the K-sample lower bound with VIMCO gradients on the SBN
side and reparameterization gradients on the branch side, under a likelihood
annealing schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .embedding import embed_two_pass, one_hot_tips
from .gnn import GnnConfig, Mlp, TreeBatch, TreeGnn, TreeStruct
from .likelihood import (
    Alignment,
    BRANCH_PRIOR_RATE,
    log_likelihood,
    log_likelihood_grad,
)
from .sbn import SbnModel, SupportError, tree_psps
from .trees import TreeTopology, double_factorial

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class AnnealingSchedule:
    """lambda_n = min(1, init + n / ramp_steps): likelihood tempering weight."""

    init: float = 0.001
    ramp_steps: int = 100000

    def value(self, n: int) -> float:
        return min(1.0, self.init + n / self.ramp_steps)


def lognormal_logpdf(q: np.ndarray, mu: np.ndarray,
                     logsigma: np.ndarray) -> float:
    """Closed-form diagonal Lognormal log-density."""
    sigma = np.exp(logsigma)
    lq = np.log(q)
    return float(np.sum(
        -lq - logsigma - 0.5 * LOG_2PI - 0.5 * ((lq - mu) / sigma) ** 2
    ))


def sample_branches(mu: np.ndarray, logsigma: np.ndarray,
                    rng: np.random.Generator):
    """Reparameterized draw q = exp(mu + sigma * eps).

    Returns (q, log Q(q), eps); the log-density is evaluated through the
    reparameterization, so it is exact for the drawn q.
    """
    eps = rng.standard_normal(mu.shape)
    sigma = np.exp(logsigma)
    q = np.exp(mu + sigma * eps)
    logq = float(np.sum(-mu - sigma * eps - logsigma - 0.5 * LOG_2PI
                        - 0.5 * eps * eps))
    return q, logq, eps


def logmeanexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.mean(np.exp(x - m))))


# ---------------------------------------------------------------------------
# Branch-length parameterizations
# ---------------------------------------------------------------------------


class SplitBranchModel:
    """mu(e) and logsigma(e) read from per-split tables (lookup by e's split)."""

    kind = "split"

    def __init__(self, support, store: ParameterStore,
                 mu_init: float = -2.0, logsigma_init: float = -1.5):
        self.support = support
        self.psi_mu = store.param(
            "psi_mu", np.full(len(support.splits), mu_init))
        self.psi_sigma = store.param(
            "psi_sigma", np.full(len(support.splits), logsigma_init))

    def _split_ids(self, tree: TreeTopology) -> np.ndarray:
        cached = tree.cache.get("split_ids")
        if cached is not None and cached[0] is self.support:
            return cached[1]
        idx = self.support.split_index
        ids = []
        for m in tree.split_of_edge():
            if m not in idx:
                raise SupportError(f"split {m:#x} not in support")
            ids.append(idx[m])
        ids = np.asarray(ids, dtype=np.int64)
        tree.cache["split_ids"] = (self.support, ids)
        return ids

    def params_for(self, trees: list[TreeTopology]):
        ids = np.stack([self._split_ids(t) for t in trees])
        mu = self.psi_mu.data[ids]
        ls = self.psi_sigma.data[ids]
        return mu, ls, ids

    def backward(self, ctx, dmu: np.ndarray, dls: np.ndarray):
        ids = ctx
        g_mu = np.zeros_like(self.psi_mu.data)
        g_ls = np.zeros_like(self.psi_sigma.data)
        np.add.at(g_mu, ids.ravel(), dmu.ravel())
        np.add.at(g_ls, ids.ravel(), dls.ravel())
        ad._accum(self.psi_mu, g_mu)
        ad._accum(self.psi_sigma, g_ls)


class PspBranchModel(SplitBranchModel):
    """Split tables refined additively by primary subsplit pair tables.

    PSP entries outside the collected support contribute nothing, which
    degrades gracefully to the split parameterization.
    """

    kind = "psp"

    def __init__(self, support, store: ParameterStore,
                 mu_init: float = -2.0, logsigma_init: float = -1.5):
        super().__init__(support, store, mu_init, logsigma_init)
        self.psp_mu = store.param("psp_mu", np.zeros(len(support.psps)))
        self.psp_sigma = store.param("psp_sigma", np.zeros(len(support.psps)))

    def _psp_ids(self, tree: TreeTopology):
        cached = tree.cache.get("psp_ids")
        if cached is not None and cached[0] is self.support:
            return cached[1]
        idx = self.support.psp_index
        flat = []
        edge_of = []
        for eid, (split_mask, adjacent) in enumerate(tree_psps(tree)):
            for s in adjacent:
                i = idx.get((split_mask, s))
                if i is not None:
                    flat.append(i)
                    edge_of.append(eid)
        ids = (np.asarray(flat, dtype=np.int64),
               np.asarray(edge_of, dtype=np.int64))
        tree.cache["psp_ids"] = (self.support, ids)
        return ids

    def params_for(self, trees: list[TreeTopology]):
        mu, ls, ids = super().params_for(trees)
        psp = [self._psp_ids(t) for t in trees]
        for k, (flat, edge_of) in enumerate(psp):
            np.add.at(mu[k], edge_of, self.psp_mu.data[flat])
            np.add.at(ls[k], edge_of, self.psp_sigma.data[flat])
        return mu, ls, (ids, psp)

    def backward(self, ctx, dmu: np.ndarray, dls: np.ndarray):
        ids, psp = ctx
        super().backward(ids, dmu, dls)
        g_mu = np.zeros_like(self.psp_mu.data)
        g_ls = np.zeros_like(self.psp_sigma.data)
        for k, (flat, edge_of) in enumerate(psp):
            np.add.at(g_mu, flat, dmu[k][edge_of])
            np.add.at(g_ls, flat, dls[k][edge_of])
        ad._accum(self.psp_mu, g_mu)
        ad._accum(self.psp_sigma, g_ls)


class GnnBranchModel:
    """mu and logsigma from edge features of a GNN over embedded nodes."""

    kind = "gnn"

    def __init__(self, taxa, config: GnnConfig, store: ParameterStore,
                 rng: np.random.Generator, mu_init: float = -2.0,
                 logsigma_init: float = -1.5):
        self.taxa = taxa
        self.config = config
        h = config.hidden_dim
        self.gnn = TreeGnn(store, "branch_gnn", config, len(taxa), rng)
        self.mlp_mu = Mlp(store, "mlp_mu", [h, h, 1], rng)
        self.mlp_sigma = Mlp(store, "mlp_sigma", [h, h, 1], rng)
        # output biases start at sensible scales so early draws stay finite
        self.mlp_mu.biases[-1].data[:] = mu_init
        self.mlp_sigma.biases[-1].data[:] = logsigma_init

    def _inputs(self, tree: TreeTopology):
        cached = tree.cache.get("gnn_inputs")
        if cached is None:
            cached = (TreeStruct(tree),
                      embed_two_pass(tree, one_hot_tips(tree)))
            tree.cache["gnn_inputs"] = cached
        return cached

    def params_for(self, trees: list[TreeTopology]):
        pairs = [self._inputs(t) for t in trees]
        batch = TreeBatch.from_structs([s for s, _ in pairs])
        x = np.concatenate([f for _, f in pairs], axis=0)
        node_h = self.gnn.node_features(batch, x)
        he = self.gnn.edge_features(batch, node_h)
        mu_t = self.mlp_mu(he)
        ls_t = self.mlp_sigma(he)
        k = len(trees)
        e = batch.edges_per_graph
        return (mu_t.data.reshape(k, e).copy(),
                ls_t.data.reshape(k, e).copy(), (mu_t, ls_t))

    def backward(self, ctx, dmu: np.ndarray, dls: np.ndarray):
        mu_t, ls_t = ctx
        seed = ad.add(
            ad.sum_all(ad.mul(mu_t, Tensor(dmu.reshape(-1, 1)))),
            ad.sum_all(ad.mul(ls_t, Tensor(dls.reshape(-1, 1)))),
        )
        ad.backward(seed)


# ---------------------------------------------------------------------------
# State, lower bound, gradient estimators
# ---------------------------------------------------------------------------


@dataclass
class VbpiState:
    sbn: SbnModel
    branch: object
    store: ParameterStore
    K: int = 10
    step: int = 0
    schedule: AnnealingSchedule = field(default_factory=AnnealingSchedule)
    prior_rate: float = BRANCH_PRIOR_RATE
    _interned: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def sample_topology(self, rng) -> TreeTopology:
        """Sample from the SBN, interning by split set so per-tree caches hit."""
        tree = self.sbn.sample_tree(rng)
        return self._interned.setdefault(tree.splits(), tree)


def make_state(sbn: SbnModel, branch_kind: str, K: int = 10,
               gnn_config: GnnConfig | None = None, seed: int = 0,
               schedule: AnnealingSchedule | None = None) -> VbpiState:
    """Wire an SBN and a branch model into one trainable state.

    The SBN's phi vector is registered in the shared ParameterStore (the
    tensor's array is the model's array, so optimizer updates apply in place).
    """
    store = ParameterStore()
    phi = store.param("sbn_phi", sbn.phi)
    sbn.phi = phi.data
    rng = np.random.default_rng(seed)
    if branch_kind == "split":
        branch = SplitBranchModel(sbn.support, store)
    elif branch_kind == "psp":
        branch = PspBranchModel(sbn.support, store)
    elif branch_kind == "gnn":
        branch = GnnBranchModel(sbn.support.taxa,
                                gnn_config or GnnConfig(), store, rng)
    else:
        raise ValueError(f"unknown branch kind {branch_kind!r}")
    return VbpiState(sbn=sbn, branch=branch, store=store, K=K,
                     schedule=schedule or AnnealingSchedule())


@dataclass
class LowerBoundEstimate:
    value: float                 # logmeanexp of the log-weights
    log_weights: np.ndarray
    annealing: float


@dataclass
class _Batch:
    trees: list[TreeTopology]
    mu: np.ndarray               # (K, E)
    logsigma: np.ndarray
    eps: np.ndarray
    q: np.ndarray
    log_w: np.ndarray            # annealed log-weights
    log_w_full: np.ndarray       # lambda = 1 log-weights (metrics)
    ll: np.ndarray
    ll_grad: list | None
    phi_grads: list | None
    branch_ctx: object


def _draw_batch(state: VbpiState, Y: Alignment, rng, lam: float, k: int,
                want_grads: bool) -> _Batch:
    sbn = state.sbn
    log_norms = sbn.group_log_norms()
    trees = [state.sample_topology(rng) for _ in range(k)]
    mu, ls, ctx = state.branch.params_for(trees)
    sigma = np.exp(ls)
    eps = rng.standard_normal(mu.shape)
    q = np.exp(mu + sigma * eps)

    n = trees[0].n_leaves
    log_topo_prior = -np.log(double_factorial(2 * n - 5))
    rate = state.prior_rate

    log_w = np.empty(k)
    log_w_full = np.empty(k)
    ll = np.empty(k)
    ll_grads = [] if want_grads else None
    phi_grads = [] if want_grads else None
    for i, tree in enumerate(trees):
        if want_grads:
            ll_i, g_i = log_likelihood_grad(tree, q[i], Y)
            ll_grads.append(g_i)
            lq_tau, g_phi = sbn.log_prob_grad_phi(tree, log_norms)
            phi_grads.append(g_phi)
        else:
            ll_i = log_likelihood(tree, q[i], Y)
            lq_tau = sbn.log_prob_unrooted(tree, log_norms)
        ll[i] = ll_i
        log_pq = float(np.sum(np.log(rate) - rate * q[i]))
        log_q_branch = float(np.sum(-mu[i] - sigma[i] * eps[i] - ls[i]
                                    - 0.5 * LOG_2PI - 0.5 * eps[i] ** 2))
        rest = log_topo_prior + log_pq - lq_tau - log_q_branch
        log_w[i] = lam * ll_i + rest
        log_w_full[i] = ll_i + rest
    return _Batch(trees=trees, mu=mu, logsigma=ls, eps=eps, q=q,
                  log_w=log_w, log_w_full=log_w_full, ll=ll,
                  ll_grad=ll_grads, phi_grads=phi_grads, branch_ctx=ctx)


def lower_bound(state: VbpiState, Y: Alignment, rng, anneal: float = 1.0,
                K: int | None = None) -> LowerBoundEstimate:
    """Multi-sample lower bound estimate; K=1 is the plain ELBO estimator."""
    batch = _draw_batch(state, Y, rng, anneal, K or state.K,
                        want_grads=False)
    return LowerBoundEstimate(value=logmeanexp(batch.log_w),
                              log_weights=batch.log_w, annealing=anneal)


def vimco_learning_signals(log_w: np.ndarray):
    """Per-sample leave-one-out signals for the multi-sample bound.

    Replaces each log-weight by the arithmetic mean of the others (the
    geometric mean of the weights) to form the baseline; returns
    (L_hat, signals, normalized importance weights).
    """
    k = len(log_w)
    if k < 2:
        raise ValueError("VIMCO needs K >= 2")
    l_hat = logmeanexp(log_w)
    total = log_w.sum()
    signals = np.empty(k)
    for i in range(k):
        loo = (total - log_w[i]) / (k - 1)
        swapped = log_w.copy()
        swapped[i] = loo
        signals[i] = l_hat - logmeanexp(swapped)
    w_tilde = np.exp(log_w - log_w.max())
    w_tilde /= w_tilde.sum()
    return l_hat, signals, w_tilde


def vimco_gradients(log_w: np.ndarray, phi_grads: list[np.ndarray]):
    """Gradient of the multi-sample bound in the SBN parameters.

    Sum over samples of (signal_i - w_tilde_i) * grad log Q(tree_i): the
    leave-one-out score term plus the direct weight-dependence term, which
    together give the unbiased estimator of the cited construction.
    """
    l_hat, signals, w_tilde = vimco_learning_signals(log_w)
    grad = np.zeros_like(phi_grads[0])
    for i, g in enumerate(phi_grads):
        grad += (signals[i] - w_tilde[i]) * g
    return l_hat, grad


def reparam_branch_gradients(state: VbpiState, batch: _Batch, lam: float):
    """Pathwise gradient of the bound in (mu, logsigma) per sampled edge.

    d log w / d mu_e      = (lam * dLL/dq_e - rate) * q_e + 1
    d log w / d logsig_e  = ((lam * dLL/dq_e - rate) * q_e * eps_e + eps_e) * sigma_e + 1
    weighted by the normalized importance weights.
    """
    w_tilde = np.exp(batch.log_w - batch.log_w.max())
    w_tilde /= w_tilde.sum()
    rate = state.prior_rate
    sigma = np.exp(batch.logsigma)
    dmu = np.empty_like(batch.mu)
    dls = np.empty_like(batch.mu)
    for i in range(len(batch.trees)):
        drive = (lam * batch.ll_grad[i] - rate) * batch.q[i]
        dmu[i] = w_tilde[i] * (drive + 1.0)
        dls[i] = w_tilde[i] * ((drive + 1.0) * sigma[i] * batch.eps[i] + 1.0)
    return dmu, dls


@dataclass
class VbpiTraceRow:
    step: int
    elbo: float       # unannealed multi-sample estimate at this step
    annealing: float


def train_step(state: VbpiState, Y: Alignment, rng, lr: float) -> VbpiTraceRow:
    lam = state.schedule.value(state.step)
    batch = _draw_batch(state, Y, rng, lam, state.K, want_grads=True)
    state.store.zero_grad()

    _, phi_grad = vimco_gradients(batch.log_w, batch.phi_grads)
    ad._accum(state.store["sbn_phi"], -phi_grad)  # ascent via minimizer

    dmu, dls = reparam_branch_gradients(state, batch, lam)
    state.branch.backward(batch.branch_ctx, -dmu, -dls)

    state.store.adam_step(lr)
    row = VbpiTraceRow(step=state.step, elbo=logmeanexp(batch.log_w_full),
                       annealing=lam)
    state.step += 1
    return row


def train_vbpi(state: VbpiState, Y: Alignment, steps: int, lr: float,
               rng: np.random.Generator) -> list[VbpiTraceRow]:
    return [train_step(state, Y, rng, lr) for _ in range(steps)]


# ---------------------------------------------------------------------------
# Evaluation: marginal likelihood and amortization gaps
# ---------------------------------------------------------------------------


def estimate_marginal_likelihood(state: VbpiState, Y: Alignment,
                                 n_samples: int, rng, runs: int = 1):
    """Importance-sampling estimate of log p(Y) from the variational fit.

    Returns (mean over runs, stddev over runs, per-run values); each run is
    logmeanexp of ``n_samples`` unannealed log-weights.
    """
    values = []
    for _ in range(runs):
        logs = np.empty(n_samples)
        done = 0
        while done < n_samples:
            k = min(256, n_samples - done)
            batch = _draw_batch(state, Y, rng, 1.0, k, want_grads=False)
            logs[done:done + k] = batch.log_w
            done += k
        values.append(logmeanexp(logs))
    values = np.asarray(values)
    return float(values.mean()), float(values.std(ddof=1)) if runs > 1 else 0.0, values


def _branch_elbo(tree: TreeTopology, Y: Alignment, mu, ls, eps_draws,
                 rate: float) -> float:
    """Mean single-sample branch-only ELBO under common random numbers."""
    sigma = np.exp(ls)
    total = 0.0
    for eps in eps_draws:
        q = np.exp(mu + sigma * eps)
        ll, _ = log_likelihood_grad(tree, q, Y)
        log_pq = float(np.sum(np.log(rate) - rate * q))
        log_q = float(np.sum(-mu - sigma * eps - ls - 0.5 * LOG_2PI
                             - 0.5 * eps * eps))
        total += ll + log_pq - log_q
    return total / len(eps_draws)


@dataclass
class GapResult:
    gap: float          # clipped at zero
    raw: float          # optimized minus amortized, before clipping
    improved: bool


def amortization_gap(state: VbpiState, tree: TreeTopology, Y: Alignment,
                     opt_budget: int, rng, K_opt: int = 10,
                     n_eval: int = 1000, lr: float = 0.01) -> GapResult:
    """Per-tree gap between the best free Lognormal fit and the amortized one.

    Free per-edge (mu, logsigma) start from the amortized values and get
    ``opt_budget`` reparameterization steps; both ELBOs are then evaluated
    with common random numbers.
    """
    mu0, ls0, _ = state.branch.params_for([tree])
    mu0, ls0 = mu0[0], ls0[0]
    rate = state.prior_rate

    free = ParameterStore()
    mu = free.param("mu", mu0.copy())
    ls = free.param("ls", ls0.copy())
    for _ in range(opt_budget):
        # plain single-sample ELBO ascent (the gap is defined on the ELBO,
        # not the multi-sample bound), averaged over K_opt draws
        sigma = np.exp(ls.data)
        eps = rng.standard_normal((K_opt, len(mu0)))
        q = np.exp(mu.data + sigma * eps)
        drive = np.empty_like(q)
        for i in range(K_opt):
            _, g = log_likelihood_grad(tree, q[i], Y)
            drive[i] = (g - rate) * q[i]
        dmu = (drive + 1.0).mean(axis=0)
        dls = ((drive + 1.0) * sigma * eps + 1.0).mean(axis=0)
        free.zero_grad()
        mu.grad = -dmu
        ls.grad = -dls
        free.adam_step(lr)

    eps_draws = rng.standard_normal((n_eval, len(mu0)))
    amortized = _branch_elbo(tree, Y, mu0, ls0, eps_draws, rate)
    optimized = _branch_elbo(tree, Y, mu.data, ls.data, eps_draws, rate)
    raw = optimized - amortized
    return GapResult(gap=max(0.0, raw), raw=raw, improved=raw >= 0.0)
