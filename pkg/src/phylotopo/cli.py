"""Unified command-line front end.

Subcommands: embed, reconstruct, enumerate, loglik, sbn-check, ebm-train,
vbpi-train, vbpi-eval.  Exit codes: 0 success, 1 validation error, 2 runtime
error.  Training commands require --seed and write a run manifest plus
metrics under --out; flags override values from an optional JSON --config.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .embedding import embed_two_pass, embedding_by_node_kind, one_hot_tips, \
    reconstruct_topology
from .gnn import GnnConfig
from .likelihood import log_likelihood, log_likelihood_grad, parse_fasta
from .sbn import SbnModel, build_support
from .trees import (
    TaxaSet,
    enumerate_unrooted,
    n_unrooted_topologies,
    parse_newick,
    serialize_newick,
    splits_of,
    unroot,
)

THREADS_ENV = "PHYLOTOPO_THREADS"


class CliError(Exception):
    """Validation failure: exits with code 1."""


def _setup_threads(threads: int | None):
    n = threads if threads is not None else int(os.environ.get(THREADS_ENV, 0))
    if n > 0:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
        os.environ["OMP_NUM_THREADS"] = str(n)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise CliError("config file must hold a flat JSON object")
    return obj


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser,
                  argv: list[str]) -> argparse.Namespace:
    """Config file supplies defaults; explicit flags win."""
    cfg = _load_config(getattr(args, "config", None))
    if not cfg:
        return args
    given = {a.split("=")[0].lstrip("-").replace("-", "_")
             for a in argv if a.startswith("--")}
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliError(f"unknown config key {key!r}")
        if attr not in given:
            setattr(args, attr, value)
    return args


class RunDir:
    """Output directory with a manifest written at start and finalized at end."""

    def __init__(self, out: str, command: str, config: dict):
        self.path = out
        os.makedirs(out, exist_ok=True)
        self.manifest = {
            "command": command,
            "version": __version__,
            "config": config,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "status": "running",
            "outputs": [],
        }
        self._write()

    def _write(self):
        tmp = os.path.join(self.path, "manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(self.manifest, fh, indent=2)
        os.replace(tmp, os.path.join(self.path, "manifest.json"))

    def file(self, name: str) -> str:
        self.manifest["outputs"].append(name)
        return os.path.join(self.path, name)

    def finish(self):
        self.manifest["status"] = "done"
        self.manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self._write()


def _read_tree_arg(args) -> tuple:
    if getattr(args, "newick", None):
        text = args.newick
    elif getattr(args, "newick_file", None):
        with open(args.newick_file) as fh:
            text = fh.read().strip()
    else:
        raise CliError("provide --newick or --newick-file")
    return parse_newick(text, capture_lengths=True)


def _read_tree_list(path: str, taxa=None) -> list:
    trees = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                tree = parse_newick(line, taxa=taxa)
                trees.append(tree)
                if taxa is None:
                    taxa = tree.taxa
    if not trees:
        raise CliError(f"no trees in {path}")
    return trees


# -- subcommands -----------------------------------------------------------


def cmd_enumerate(args) -> int:
    taxa = TaxaSet([f"T{i}" for i in range(args.taxa)])
    if args.count_only:
        print(n_unrooted_topologies(args.taxa))
        return 0
    for tree in enumerate_unrooted(taxa):
        print(serialize_newick(tree))
    return 0


def cmd_embed(args) -> int:
    tree, _ = _read_tree_arg(args)
    feats = embed_two_pass(tree, one_hot_tips(tree))
    rows = []
    for u in range(tree.n_nodes):
        k = tree.taxon[u]
        rows.append([u, int(k >= 0), tree.taxa.names[k] if k >= 0 else ""]
                    + [f"{x:.12g}" for x in feats[u]])
    header = ["node_id", "is_leaf", "taxon"] + \
        [f"f_{j}" for j in range(feats.shape[1])]
    if args.out:
        run = RunDir(args.out, "embed", vars_config(args))
        path = run.file("embedding.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        run.finish()
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)
    return 0


def cmd_reconstruct(args) -> int:
    tree, _ = _read_tree_arg(args)
    if tree.rooted:
        tree = unroot(tree)
    feats = embed_two_pass(tree, one_hot_tips(tree))
    interior, tips = embedding_by_node_kind(tree, feats)
    rebuilt = reconstruct_topology(interior, tips, tree.taxa)
    print(serialize_newick(rebuilt))
    if splits_of(rebuilt) != splits_of(tree):
        print("round trip FAILED: split sets differ", file=sys.stderr)
        return 2
    print("round trip ok: split sets identical", file=sys.stderr)
    return 0


def cmd_loglik(args) -> int:
    with open(args.fasta) as fh:
        aln = parse_fasta(fh.read())
    tree, q = _read_tree_arg(args)
    tree2 = tree if not tree.rooted else None
    if tree2 is None:
        raise CliError("loglik expects an unrooted tree (trifurcating root)")
    if np.any(np.isnan(q)):
        raise CliError("every edge needs a :length annotation")
    if args.grad:
        value, grad = log_likelihood_grad(tree, q, aln)
    else:
        value, grad = log_likelihood(tree, q, aln), None
    print(f"{value:.10f}")
    if grad is not None:
        w = csv.writer(sys.stdout)
        w.writerow(["edge_id", "node_u", "node_v", "grad"])
        for e, (u, v) in enumerate(tree.edges):
            w.writerow([e, u, v, f"{grad[e]:.10g}"])
    return 0


def cmd_sbn_check(args) -> int:
    if args.enumerate:
        taxa = TaxaSet([f"T{i}" for i in range(args.enumerate)])
        trees = list(enumerate_unrooted(taxa))
    else:
        trees = _read_tree_list(args.trees)
    support = build_support(trees)
    rng = np.random.default_rng(args.seed)
    phi = rng.normal(scale=args.phi_scale, size=support.n_params)
    model = SbnModel(support, phi)
    print(f"taxa: {len(support.taxa)}")
    print(f"root subsplits: {len(support.root_subsplits)}")
    print(f"parent-child groups: {support.n_groups - 1}")
    print(f"phi parameters: {support.n_params}")
    print(f"splits: {len(support.splits)}  psps: {len(support.psps)}")
    if args.exhaustive:
        n = len(support.taxa)
        if n > 8:
            raise CliError("--exhaustive needs at most 8 taxa")
        total = sum(
            np.exp(model.log_prob_unrooted(t))
            for t in enumerate_unrooted(support.taxa)
        )
        print(f"probability sum over full enumeration: {total:.12f}")
        if abs(total - 1.0) > 1e-8:
            print("normalization FAILED", file=sys.stderr)
            return 2
    if args.checkpoint_out:
        with open(args.checkpoint_out, "w") as fh:
            fh.write(model.to_json())
        print(f"checkpoint written to {args.checkpoint_out}")
    return 0


def vars_config(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in vars(args).items()
            if k not in skip and not callable(v)}


def cmd_ebm_train(args) -> int:
    from .ebm import (EbmModel, EnumeratedSpace, optimal_nce_loss,
                      sample_dirichlet_target, train_nce)

    run = RunDir(args.out, "ebm-train", vars_config(args))
    table = sample_dirichlet_target(args.taxa, args.beta, seed=args.seed)
    space = EnumeratedSpace(table)
    config = GnnConfig(variant=args.variant, layers=args.layers,
                       hidden_dim=args.hidden)
    model = EbmModel(table.taxa, config, seed=args.seed,
                     log_z_init=float(np.log(table.size)))
    trace = train_nce(model, table, steps=args.steps,
                      batch_size=args.batch, lr=args.lr,
                      lr_final=args.lr_final, seed=args.seed,
                      eval_every=args.eval_every, space=space)
    path = run.file("trace.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "nce_loss", "kl", "logZ"])
        for r in trace:
            w.writerow([r.step, f"{r.nce_loss:.10g}", f"{r.kl:.10g}",
                        f"{r.log_z:.10g}"])
    model.store.save(run.file("params"))
    summary = {
        "j_star": optimal_nce_loss(table),
        "final_nce_loss": trace[-1].nce_loss,
        "final_kl": trace[-1].kl,
        "final_log_z": trace[-1].log_z,
    }
    with open(run.file("summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    run.finish()
    print(json.dumps(summary))
    return 0


def _vbpi_state_from_args(args, taxa):
    from .vbpi import AnnealingSchedule, make_state

    if args.support == "enumerate":
        if len(taxa) > 8:
            raise CliError("support enumeration limited to 8 taxa")
        trees = list(enumerate_unrooted(taxa))
    else:
        trees = _read_tree_list(args.support, taxa=taxa)
    support = build_support(trees)
    sbn = SbnModel(support)
    config = GnnConfig(variant=args.variant, layers=args.layers,
                       hidden_dim=args.hidden)
    schedule = AnnealingSchedule(init=args.anneal_init,
                                 ramp_steps=args.anneal_steps)
    return make_state(sbn, args.branch, K=args.K, gnn_config=config,
                      seed=args.seed, schedule=schedule)


def cmd_vbpi_train(args) -> int:
    from .vbpi import train_step

    with open(args.fasta) as fh:
        aln = parse_fasta(fh.read())
    run = RunDir(args.out, "vbpi-train", vars_config(args))
    state = _vbpi_state_from_args(args, aln.taxa)
    rng = np.random.default_rng(args.seed)
    path = run.file("metrics.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "elbo", "lambda"])
        for _ in range(args.steps):
            row = train_step(state, aln, rng, args.lr)
            if row.step % args.trace_every == 0 or row.step == args.steps - 1:
                w.writerow([row.step, f"{row.elbo:.10g}",
                            f"{row.annealing:.6g}"])
    _save_vbpi_checkpoint(state, args, run)
    run.finish()
    return 0


def _save_vbpi_checkpoint(state, args, run: RunDir):
    prefix = args.checkpoint_out or run.file("checkpoint")
    with open(prefix + ".sbn.json", "w") as fh:
        fh.write(state.sbn.to_json())
    state.store.save(prefix)
    meta = {
        "branch": args.branch, "variant": args.variant, "K": args.K,
        "hidden": args.hidden, "layers": args.layers,
        "anneal_init": args.anneal_init, "anneal_steps": args.anneal_steps,
        "step": state.step, "seed": args.seed,
    }
    with open(prefix + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_vbpi_checkpoint(prefix: str):
    from .vbpi import AnnealingSchedule, make_state

    with open(prefix + ".meta.json") as fh:
        meta = json.load(fh)
    with open(prefix + ".sbn.json") as fh:
        sbn = SbnModel.from_json(fh.read())
    config = GnnConfig(variant=meta["variant"], layers=meta["layers"],
                       hidden_dim=meta["hidden"])
    schedule = AnnealingSchedule(init=meta["anneal_init"],
                                 ramp_steps=meta["anneal_steps"])
    state = make_state(sbn, meta["branch"], K=meta["K"], gnn_config=config,
                       seed=meta["seed"], schedule=schedule)
    state.store.load(prefix)
    state.sbn.phi = state.store["sbn_phi"].data
    state.step = meta["step"]
    return state


def cmd_vbpi_eval(args) -> int:
    from .vbpi import amortization_gap, estimate_marginal_likelihood

    with open(args.fasta) as fh:
        aln = parse_fasta(fh.read())
    run = RunDir(args.out, "vbpi-eval", vars_config(args))
    state = load_vbpi_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    summary = {}
    if args.ml_samples:
        mean, std, values = estimate_marginal_likelihood(
            state, aln, args.ml_samples, rng, runs=args.ml_runs)
        summary["marginal_likelihood"] = {
            "mean": mean, "stddev_over_runs": std,
            "runs": [float(v) for v in values],
        }
    if args.gap_trees:
        gaps = []
        for tree in _read_tree_list(args.gap_trees, taxa=aln.taxa):
            if tree.rooted:
                tree = unroot(tree)
            res = amortization_gap(state, tree, aln, args.gap_budget, rng)
            gaps.append({"newick": serialize_newick(tree), "gap": res.gap,
                         "raw": res.raw, "improved": res.improved})
        summary["amortization_gaps"] = gaps
    path = run.file("summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
    run.finish()
    print(json.dumps(summary))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="phylotopo",
        description="Learnable topological features for phylogenetic inference",
    )
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or all)")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", default=None,
                        help="JSON file with flag defaults")
        return sp

    sp = add("enumerate", cmd_enumerate,
             help="enumerate unrooted bifurcating topologies")
    sp.add_argument("--taxa", type=int, required=True)
    sp.add_argument("--count-only", action="store_true")

    sp = add("embed", cmd_embed, help="Dirichlet-energy node embedding as CSV")
    sp.add_argument("--newick")
    sp.add_argument("--newick-file")
    sp.add_argument("--out", default=None)

    sp = add("reconstruct", cmd_reconstruct,
             help="embed then rebuild the topology; verifies the round trip")
    sp.add_argument("--newick")
    sp.add_argument("--newick-file")

    sp = add("loglik", cmd_loglik, help="pruning log-likelihood of a tree")
    sp.add_argument("--fasta", required=True)
    sp.add_argument("--newick")
    sp.add_argument("--newick-file")
    sp.add_argument("--grad", action="store_true",
                    help="also print per-edge gradients as CSV")

    sp = add("sbn-check", cmd_sbn_check,
             help="build an SBN support and run diagnostics")
    sp.add_argument("--trees", help="file with one Newick per line")
    sp.add_argument("--enumerate", type=int,
                    help="use the full enumeration for N taxa instead")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--phi-scale", type=float, default=0.0)
    sp.add_argument("--exhaustive", action="store_true",
                    help="verify probabilities sum to 1 over the enumeration")
    sp.add_argument("--checkpoint-out")

    sp = add("ebm-train", cmd_ebm_train,
             help="train an energy-based model on a simulated target")
    sp.add_argument("--taxa", type=int, required=True)
    sp.add_argument("--beta", type=float, required=True)
    sp.add_argument("--variant", default="ggnn",
                    choices=["mlp", "gcn", "gin", "sage", "ggnn", "edge"])
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--hidden", type=int, default=100)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--lr-final", type=float, default=None)
    sp.add_argument("--eval-every", type=int, default=500)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    def vbpi_common(sp):
        sp.add_argument("--fasta", required=True)
        sp.add_argument("--branch", default="gnn",
                        choices=["split", "psp", "gnn"])
        sp.add_argument("--variant", default="edge",
                        choices=["mlp", "gcn", "gin", "sage", "ggnn", "edge"])
        sp.add_argument("--layers", type=int, default=2)
        sp.add_argument("--hidden", type=int, default=100)
        sp.add_argument("--K", type=int, default=10)
        sp.add_argument("--anneal-init", type=float, default=0.001)
        sp.add_argument("--anneal-steps", type=int, default=100000)
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", required=True)

    sp = add("vbpi-train", cmd_vbpi_train,
             help="variational Bayesian phylogenetic inference")
    vbpi_common(sp)
    sp.add_argument("--support", required=True,
                    help="'enumerate' or a file with one Newick per line")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--trace-every", type=int, default=50)
    sp.add_argument("--checkpoint-out", default=None)

    sp = add("vbpi-eval", cmd_vbpi_eval,
             help="marginal likelihood and amortization gaps from a checkpoint")
    sp.add_argument("--fasta", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ml-samples", type=int, default=0)
    sp.add_argument("--ml-runs", type=int, default=10)
    sp.add_argument("--gap-trees", default=None)
    sp.add_argument("--gap-budget", type=int, default=1000)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    return p


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors (validation here)
        return 0 if exc.code in (0, None) else 1
    try:
        args = _merge_config(args, parser, argv)
        _setup_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
