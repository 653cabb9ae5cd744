"""Command-line driver.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bias, graph, proximity, propagation, solver
from .config import RunConfig, build_config, read_config_file
from .errors import NumericalError, ValidationError

log = logging.getLogger("lpsl")

COMMANDS = ("lps", "groups", "learn", "propagate", "train", "report", "sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _count(text):
    value = float(text)
    return int(value) if value >= 1 and value == int(value) else value


def _add_common(p):
    g = p.add_argument_group("data")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--graph")
    g.add_argument("--features")
    g.add_argument("--labels")
    g.add_argument("--split", help="split JSON; otherwise a split is sampled from --seed")
    g.add_argument("--train-labels", dest="train_labels", help="file whose first column lists labeled node ids")
    g.add_argument("--self-loop-policy", dest="self_loop_policy", choices=graph.SELF_LOOP_POLICIES)
    g.add_argument("--normalize-features", dest="normalize_features", type=_bool)
    g.add_argument("--seed", type=int)
    g.add_argument("--per-class", dest="per_class", type=_count)
    g.add_argument("--n-val", dest="n_val", type=_count)
    g.add_argument("--n-test", dest="n_test", type=_count)
    g.add_argument("--out")
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("-v", "--verbose", action="store_true")


def _add_groups(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--metric", choices=proximity.METRICS)
    p.add_argument("--n-groups", dest="n_groups", type=int)
    p.add_argument("--min-group-size", dest="min_group_size", type=int)
    p.add_argument("--outlier-quantile", dest="outlier_quantile", type=float)
    p.add_argument("--drop-above", dest="drop_above", type=_bool)


def _add_solver(p):
    p.add_argument("--mode", choices=("dense", "sparse"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--outer-tol", dest="outer_tol", type=float)
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--deterministic", type=_bool)
    p.add_argument("--max-density", dest="max_density", type=float)
    p.add_argument("--dense-cap", dest="dense_cap", type=int)


def _add_operator(p):
    p.add_argument("--operator", choices=("learned", "ppr", "adj", "identity"))
    p.add_argument("--structure", help="structure file written by 'learn'")
    p.add_argument("--ppr-steps", dest="ppr_steps", type=int,
                   help="truncate the ppr operator to K recursion steps (0 = exact solve)")


def _add_head(p):
    p.add_argument("--arch", choices=("appnp", "gcn"))
    p.add_argument("--head", choices=("linear", "mlp2"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)


def build_parser():
    parser = _Parser(prog="lpsl", description="Label position bias tools for graph semi-supervised learning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("lps", help="Label Proximity Scores")
    _add_common(p)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("groups", help="partition test nodes into sensitive groups")
    _add_common(p)
    _add_groups(p)

    p = sub.add_parser("learn", help="learn the unbiased structure B")
    _add_common(p)
    _add_solver(p)

    p = sub.add_parser("propagate", help="label propagation with an operator")
    _add_common(p)
    _add_solver(p)
    _add_operator(p)

    p = sub.add_parser("train", help="train an appnp- or gcn-style head")
    _add_common(p)
    _add_solver(p)
    _add_operator(p)
    _add_head(p)

    p = sub.add_parser("report", help="group accuracies and bias metrics of a prediction")
    _add_common(p)
    _add_groups(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--csv", help="also write the group table as CSV")

    p = sub.add_parser("sweep", help="repeat a run over seeds and aggregate mean ± std")
    _add_common(p)
    _add_groups(p)
    _add_solver(p)
    _add_head(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--task", choices=("lp", "appnp", "gcn"))
    p.add_argument("--baseline", choices=("ppr", "adj"), help="default: ppr for lp/appnp, adj for gcn")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve(args):
    flags = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__}
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    if flags.get("split") and flags.get("train_labels"):
        raise ValidationError("--split and --train-labels both define the labeled set; give one")
    if flags.get("split") and (flags.get("per_class") is not None or flags.get("seed") is not None):
        raise ValidationError("--split conflicts with --seed/--per-class (the split file fixes both)")
    if flags.get("operator") not in (None, "learned") and flags.get("structure"):
        raise ValidationError(f"--structure conflicts with --operator {flags['operator']}")
    return build_config(file_values, flags)


class _Context:
    """Lazily loaded data shared by the subcommands."""

    def __init__(self, cfg):
        self.cfg = cfg
        if cfg.graph is None:
            raise ValidationError("--graph is required")
        if cfg.features and cfg.labels:
            self.dataset = graph.load_dataset(cfg.graph, cfg.features, cfg.labels, cfg.self_loop_policy)
            self.graph = self.dataset.graph
        else:
            self.dataset = None
            n = None
            if cfg.labels:
                nodes, _ = graph.read_labels(cfg.labels)
                n = int(nodes.max()) + 1
            self.graph = graph.read_edge_list(cfg.graph, n=n)
        self.ops = graph.symmetric_normalize(self.graph, cfg.self_loop_policy)
        self._split = None

    @property
    def n(self):
        return self.graph.n

    @property
    def classes(self):
        if self.dataset is not None:
            return self.dataset.classes
        if self.cfg.labels is None:
            raise ValidationError("--labels is required for this command")
        nodes, cls = graph.read_labels(self.cfg.labels)
        out = np.full(self.n, -1, dtype=np.int64)
        out[nodes] = cls
        return out

    @property
    def features(self):
        if self.dataset is None:
            raise ValidationError("--features and --labels are required for this command")
        X = self.dataset.features
        if self.cfg.normalize_features:
            X = X / np.maximum(np.abs(X).sum(axis=1, keepdims=True), 1e-12)
        return X

    def split(self, seed=None):
        cfg = self.cfg
        if cfg.split and seed is None:
            return graph.SplitAssignment.load(cfg.split)
        if seed is None and self._split is not None:
            return self._split
        s = graph.make_split(self.classes, per_class=cfg.per_class, n_val=cfg.n_val,
                             n_test=cfg.n_test, seed=cfg.seed if seed is None else seed)
        if seed is None:
            self._split = s
        return s

    def train_mask(self):
        if self.cfg.train_labels:
            table = np.loadtxt(self.cfg.train_labels, dtype=np.int64, comments="#", ndmin=2)
            return graph.label_mask(self.n, table[:, 0])
        return graph.label_mask(self.n, self.split().train)

    def test_nodes(self, mask):
        if self.cfg.split or (self.cfg.labels and not self.cfg.train_labels):
            return self.split().test
        return np.flatnonzero(~mask)


def _operator(ctx, mask, kind=None):
    cfg = ctx.cfg
    kind = kind or cfg.operator
    if kind == "identity":
        return propagation.PropagationOperator.identity(ctx.n), {}
    if kind == "adj":
        return propagation.PropagationOperator("sparse", ctx.ops.norm_adj), {}
    if kind == "ppr":
        if cfg.ppr_steps > 0:
            op = propagation.PropagationOperator.ppr_iterative(ctx.ops.norm_adj, cfg.lam, cfg.ppr_steps)
        else:
            op = propagation.PropagationOperator.from_structure(
                solver.closed_form_unconstrained(ctx.ops, cfg.lam))
        return op, {}
    if cfg.structure:
        B = solver.load_structure(cfg.structure)
        if B.n != ctx.n:
            raise ValidationError(f"structure has n={B.n}, graph has n={ctx.n}")
    else:
        B = _learn(ctx, mask)
    return propagation.PropagationOperator.from_structure(B), B.meta


def _learn(ctx, mask):
    scfg = ctx.cfg.solver_config()
    if ctx.cfg.mode == "sparse":
        return solver.solve_sparse(ctx.ops, mask, scfg)
    return solver.solve_dense(ctx.ops, mask, scfg)


def _out(cfg, default):
    path = Path(cfg.out) if cfg.out else Path(cfg.out_dir) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, doc):
    Path(path).write_text(json.dumps(_plain(doc), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _partition(ctx, mask, test_nodes):
    cfg = ctx.cfg
    values = proximity.metric_values(cfg.metric, ctx.graph, ctx.ops, mask, cfg.alpha)
    return proximity.partition_groups(
        values, cfg.metric, test_nodes, n_groups=cfg.n_groups, min_group_size=cfg.min_group_size,
        outlier_quantile=cfg.outlier_quantile, drop_above=cfg.drop_above,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_lps(ctx, args):
    lps = proximity.lps_scores(ctx.ops, ctx.train_mask(), alpha=ctx.cfg.alpha)
    path = _out(ctx.cfg, "lps.json")
    _write_json(path, lps.to_json() | {"config": ctx.cfg.to_json()})
    print(f"wrote {path} (alpha={lps.alpha}, {lps.iterations} iterations)")


def cmd_groups(ctx, args):
    mask = ctx.train_mask()
    part = _partition(ctx, mask, ctx.test_nodes(mask))
    path = _out(ctx.cfg, f"groups_{part.metric}.json")
    _write_json(path, part.to_json() | {"config": ctx.cfg.to_json()})
    print(f"wrote {path} ({part.n_groups} groups, sizes {part.sizes().tolist()})")


def cmd_learn(ctx, args):
    mask = ctx.train_mask()
    B = _learn(ctx, mask)
    B.meta["run"] = ctx.cfg.to_json()
    path = _out(ctx.cfg, "B.coo" if ctx.cfg.mode == "sparse" else "B.dense")
    B.save(path)
    extra = f", nnz {B.nnz}" if ctx.cfg.mode == "sparse" else ""
    print(f"wrote {path} ({B.meta['stop']}, residual {B.meta['residual_inf']:.3e}{extra})")


def cmd_propagate(ctx, args):
    mask = ctx.train_mask()
    op, meta = _operator(ctx, mask)
    pred = propagation.propagate_labels(op, mask, ctx.classes)
    path = _out(ctx.cfg, "predictions.json")
    scores = path.with_suffix(".scores.csv")
    pred.save(path, scores_path=scores, config=_plain(ctx.cfg.to_json()))
    test = ctx.test_nodes(mask)
    print(f"wrote {path}; test accuracy {pred.accuracy(ctx.classes, test):.4f}")


def cmd_train(ctx, args):
    mask = ctx.train_mask()
    split = ctx.split()
    op, _ = _operator(ctx, mask)
    fit = propagation.train_gcn_head if ctx.cfg.arch == "gcn" else propagation.train_appnp_head
    head, pred = fit(op, ctx.features, ctx.classes, split, ctx.cfg.head_config())
    head.train_cfg["run"] = ctx.cfg.to_json()
    path = _out(ctx.cfg, "predictions.json")
    pred.save(path, scores_path=path.with_suffix(".scores.csv"), config=_plain(ctx.cfg.to_json()))
    head.save(path.with_suffix(".head"))
    print(f"wrote {path}; test accuracy {pred.accuracy(ctx.classes, split.test):.4f}")


def cmd_report(ctx, args):
    mask = ctx.train_mask()
    pred = propagation.Prediction.load(ctx.cfg.predictions)
    if len(pred.labels) != ctx.n:
        raise ValidationError(f"predictions cover {len(pred.labels)} nodes, graph has {ctx.n}")
    part = _partition(ctx, mask, ctx.test_nodes(mask))
    report = bias.bias_metrics(bias.group_accuracy(pred, ctx.classes, part), config=ctx.cfg.to_json())
    path = _out(ctx.cfg, f"report_{part.metric}.json")
    _write_json(path, report.to_json())
    if args.csv:
        report.save_csv(args.csv)
    wcv = "null" if report.wcv is None else f"{report.wcv:.4f}"
    print(f"{part.metric}: WDP {report.wdp:.4f}  WSD {report.wsd:.4f}  WCV {wcv}")


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def run_seed(ctx, seed, task, baseline):
    """One seed of a sweep: learned operator vs baseline on the same split."""
    cfg = ctx.cfg
    split = ctx.split(seed)
    mask = graph.label_mask(ctx.n, split.train)
    B = _learn(ctx, mask)
    learned = propagation.PropagationOperator.from_structure(B)
    base, _ = _operator(ctx, mask, kind=baseline)
    part = _partition(ctx, mask, split.test)
    out = {"seed": seed, "solver": {k: B.meta[k] for k in ("stop", "residual_inf")}}
    for name, op in (("lpsl", learned), ("baseline", base)):
        if task == "lp":
            pred = propagation.propagate_labels(op, mask, ctx.classes)
        else:
            fit = propagation.train_gcn_head if task == "gcn" else propagation.train_appnp_head
            _, pred = fit(op, ctx.features, ctx.classes, split, cfg.head_config(seed))
        rep = bias.bias_metrics(bias.group_accuracy(pred, ctx.classes, part))
        out[name] = {"acc": pred.accuracy(ctx.classes, split.test), "wdp": rep.wdp, "wsd": rep.wsd, "wcv": rep.wcv}
    return out


def cmd_sweep(ctx, args):
    cfg = ctx.cfg
    if cfg.split:
        raise ValidationError("sweep samples its own splits; drop --split")
    task = cfg.task
    baseline = args.baseline or ("adj" if task == "gcn" else "ppr")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for k in range(cfg.seeds):
        seed = cfg.seed + k
        res = run_seed(ctx, seed, task, baseline)
        _write_json(out_dir / f"sweep_seed{seed}.json", res | {"config": cfg.to_json()})
        runs.append(res)
        log.info("seed %d: lpsl %.4f baseline %.4f", seed, res["lpsl"]["acc"], res["baseline"]["acc"])
    summary = {"task": task, "baseline": baseline, "seeds": [r["seed"] for r in runs], "config": cfg.to_json()}
    for name in ("lpsl", "baseline"):
        summary[name] = {}
        for key in ("acc", "wdp", "wsd", "wcv"):
            vals = [r[name][key] for r in runs if r[name][key] is not None]
            mean, std = _mean_std(vals)
            summary[name][key] = {"mean": mean, "std": std}
        acc = summary[name]["acc"]
        wdp = summary[name]["wdp"]
        print(f"{name:<9} accuracy {100 * acc['mean']:.2f} ± {100 * acc['std']:.2f}   "
              f"{cfg.metric} WDP {wdp['mean']:.4f} ± {wdp['std']:.4f}")
    _write_json(cfg.out or out_dir / "sweep_summary.json", summary)


HANDLERS = {
    "lps": cmd_lps,
    "groups": cmd_groups,
    "learn": cmd_learn,
    "propagate": cmd_propagate,
    "train": cmd_train,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger("lpsl").setLevel(logging.INFO)
        cfg = _resolve(args)
        ctx = _Context(cfg)
        HANDLERS[args.command](ctx, args)
    except ValidationError as exc:
        print(f"lpsl: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"lpsl: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"lpsl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
