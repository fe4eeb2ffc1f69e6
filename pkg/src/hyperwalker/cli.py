"""Command-line workbench: generate, build, train, navigate, evaluate, query.

Every subcommand accepts ``--config FILE`` (``key=value`` lines or a JSON
object, keys named like the long flags) and ``--seed``. Flags given on the
command line override the file. The full effective configuration is written
to stderr as one JSON line before the command runs.

Exit codes: 0 ok, 1 usage, 2 validation, 3 corruption.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import (
    ContractViolation,
    CorruptionError,
    FormatError,
    HyperWalkerError,
    NotFoundError,
    ValidationError,
)
from .fusion import FusionParameters
from .ibrochure import HypergraphStore
from .manifold import Modality
from .navigator import CosinePolicy, NavigationConfig, TTTConfig, UniformPolicy, run_episode
from .walker import PolicyParameters
from .workbench import (
    ABLATIONS,
    BASELINES,
    SyntheticSpec,
    TrainConfig,
    ablate_case,
    ablate_nav,
    build_store,
    cases_from_records,
    evaluate,
    generate_manifold,
    ingest_jsonl,
    split_studies,
    train_policy,
    write_jsonl,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_CORRUPTION = 0, 1, 2, 3
SPLIT_FILE = "split.json"

log = logging.getLogger("hyperwalker")


class UsageError(Exception):
    """Bad invocation: unknown config key, missing input, unknown case."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config files ------------------------------------------------------------

def read_config(path) -> dict:
    """Parse a ``key=value`` or JSON config file into a flat dict.

    Keys may use dashes or underscores. ``#`` starts a comment in the
    ``key=value`` form.
    """
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc
        if not isinstance(obj, dict):
            raise UsageError(f"config {path}: expected a JSON object")
        return {k.replace("-", "_"): v for k, v in obj.items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config {path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(action: argparse.Action, value):
    """Turn a config value into what the flag would have produced."""
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if isinstance(value, str):
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {action.dest}: expected a boolean, got {value!r}")
            return lowered in ("true", "1", "yes")
        return bool(value)
    if action.nargs in ("*", "+") and isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    if isinstance(value, list):
        return [action.type(v) if action.type else v for v in value]
    if value is None or action.type is None:
        return value
    return action.type(value) if not isinstance(value, bool) else value


def _apply_config(sub: argparse.ArgumentParser, cfg: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    sub.set_defaults(**{k: _coerce(actions[k], v) for k, v in cfg.items()})


# -- shared helpers ------------------------------------------------------------

def _truth_path(records: str) -> Path:
    p = Path(records)
    return p.with_name(p.stem + ".truth.json")


def _load_split(store_dir) -> dict:
    path = Path(store_dir) / SPLIT_FILE
    if not path.exists():
        raise UsageError(f"{path} missing; run `build` first")
    return json.loads(path.read_text())


def _cases(args, split: dict, portion: str):
    records = ingest_jsonl(args.records or split["records"])
    studies = set(split[f"{portion}_studies"])
    return [c for c in cases_from_records(records) if c.study_id in studies]


def _fusion(args, dim: int) -> FusionParameters:
    if getattr(args, "fusion", None):
        return FusionParameters.from_bytes(Path(args.fusion).read_bytes())
    return FusionParameters.identity(dim, args.fusion_hidden, seed=args.seed)


def _policy(path) -> PolicyParameters:
    return PolicyParameters.from_bytes(Path(path).read_bytes())


def _without(store: HypergraphStore, modalities) -> HypergraphStore:
    drop = {Modality.parse(m) for m in modalities}
    nodes = [n for n in store.nodes.values() if n.modality not in drop]
    return HypergraphStore.build(nodes, store.dim, tau_sim=store.tau_sim, tau_prune=None)


def _nav(args) -> NavigationConfig:
    return NavigationConfig(k_candidates=args.k_candidates, expansion_depth=args.expansion_depth,
                            linger=not getattr(args, "no_linger", False),
                            allow_stop=not args.no_stop,
                            ttt=TTTConfig(enabled=getattr(args, "ttt", False)))


def _ablation_dest(variant: str) -> str:
    # kept apart from navigation options such as navigate's --no-linger
    return "ablate_" + variant.replace("-", "_")


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = SyntheticSpec(dims=args.dims, n_subjects=args.subjects, studies_per_subject=args.studies_per_subject,
                         n_conditions=args.conditions, cluster_spread=args.spread,
                         n_knowledge=args.knowledge, duplicate_rate=args.duplicate_rate, seed=args.seed)
    records, truth = generate_manifold(spec)
    write_jsonl(args.out, records, precision=args.precision)
    truth_path = args.truth or _truth_path(args.out)
    _write_json(truth, truth_path)
    print(f"wrote {len(records)} records to {args.out} and ground truth for {len(truth)} studies to {truth_path}")
    return EXIT_OK


def cmd_build(args) -> int:
    records = ingest_jsonl(args.records, dims=args.dims)
    split = split_studies(records, args.graph_frac, args.train_frac, seed=args.seed)
    store = build_store(split.graph, tau_sim=args.tau_sim, tau_prune=None if args.no_prune else args.tau_prune,
                        seed=args.seed, drop_modalities=args.drop_modality)
    problems = store.audit()
    if problems:
        raise ValidationError([(0, p) for p in problems])
    store.save(args.out)
    if args.dump_edges:
        store.dump_edges(args.dump_edges)
    meta = {
        "records": str(Path(args.records).resolve()),
        "graph_frac": args.graph_frac,
        "train_frac": args.train_frac,
        "seed": args.seed,
        "graph_studies": sorted({r.study_id for r in split.graph if r.modality != "knowledge"}),
        "train_studies": sorted(c.study_id for c in split.train),
        "test_studies": sorted(c.study_id for c in split.test),
    }
    _write_json(meta, Path(args.out) / SPLIT_FILE)
    kinds = {}
    for e in store.edges.values():
        kinds[e.kind.value] = kinds.get(e.kind.value, 0) + 1
    print(f"store {args.out}: {len(store.nodes)} nodes, {len(store.edges)} hyperedges {kinds}; "
          f"{len(split.train)} train / {len(split.test)} test cases")
    return EXIT_OK


def cmd_train(args) -> int:
    store = HypergraphStore.load(args.store)
    split = _load_split(args.store)
    cases = _cases(args, split, "train")
    if not cases:
        raise UsageError("the split has no training cases; raise --train-frac at build time")
    fusion = _fusion(args, store.dim)
    nav = ablate_nav(_nav(args), args.variant)
    cfg = TrainConfig(episodes=args.episodes, lr=args.lr, batch_size=args.batch_size, hidden=args.hidden,
                      seed=args.seed)
    fields = ("episode", "reward", "r_acc", "r_div", "r_dp", "r_hp", "baseline")
    with open(args.log, "w") as fh:
        def on_episode(row):
            fh.write(json.dumps({k: row[k] for k in fields}) + "\n")

        params, rows = train_policy(store, fusion, cases, nav, cfg, on_episode=on_episode)
    Path(args.out).write_bytes(params.to_bytes())
    if args.fusion_out:
        Path(args.fusion_out).write_bytes(fusion.to_bytes())
    tail = rows[-min(100, len(rows)):]
    print(f"trained {args.episodes} episodes; mean reward over the last {len(tail)}: "
          f"{np.mean([r['reward'] for r in tail]):.4f}; policy written to {args.out}")
    return EXIT_OK


def cmd_navigate(args) -> int:
    store = HypergraphStore.load(args.store)
    split = _load_split(args.store)
    records = ingest_jsonl(args.records or split["records"])
    by_id = {c.case_id: c for c in cases_from_records(records)}
    if args.case not in by_id:
        raise UsageError(f"no case {args.case!r} in {args.records or split['records']}")
    if args.case in set(split["graph_studies"]):
        log.warning("case %s belongs to the hypergraph split; its own nodes are reachable", args.case)
    if args.policy:
        policy = _policy(args.policy)
    elif args.baseline == "greedy-cosine":
        policy = CosinePolicy()
    else:
        policy = UniformPolicy()
    nav = replace(_nav(args), greedy=args.greedy)
    trace = run_episode(by_id[args.case], store, policy, _fusion(args, store.dim), nav, rng_seed=args.seed)
    _write_json(trace.to_json(), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    store = HypergraphStore.load(args.store)
    split = _load_split(args.store)
    cases = _cases(args, split, args.portion)
    if args.max_cases:
        cases = cases[: args.max_cases]
    truth = json.loads(Path(args.truth or _truth_path(args.records or split["records"])).read_text())
    fusion = _fusion(args, store.dim)
    nav = _nav(args)
    policy = _policy(args.policy) if args.policy else None
    report = evaluate(store, policy, fusion, cases, truth, baselines=args.baselines, nav=nav, seed=args.seed)

    variants = [v for v in ABLATIONS if v != "full" and getattr(args, _ablation_dest(v))]
    if variants and policy is None:
        raise UsageError("ablation rows need --policy")
    for variant in variants:
        spec = ABLATIONS[variant]
        v_store, v_policy = store, policy
        v_nav = ablate_nav(nav, variant)
        v_cases = [ablate_case(c, variant) for c in cases]
        if "knowledge" in spec.get("drop", ()):
            v_store = _without(store, ["knowledge"])
            v_cases = cases
        if "weights" in spec:
            train_cases = _cases(args, split, "train")
            v_policy, _ = train_policy(store, fusion, train_cases, v_nav,
                                       TrainConfig(episodes=args.episodes, seed=args.seed))
        # reward ablations change training only; every row is scored with the full reward
        row = evaluate(v_store, v_policy, fusion, v_cases, truth, baselines=(),
                       nav=v_nav if "nav" in spec else nav, seed=args.seed, walker_name=f"walker/{variant}")
        report.rows.extend(row.rows)
        report.traces.update(row.traces)
    print(report.table())
    if args.out:
        _write_json(report.to_json(), args.out)
    if args.traces:
        with open(args.traces, "w") as fh:
            for method, traces in report.traces.items():
                for t in traces:
                    fh.write(json.dumps({"method": method, **t.to_json()}) + "\n")
    return EXIT_OK


def cmd_query(args) -> int:
    if args.store:
        store = HypergraphStore.load(args.store)
        index = store.index
    else:
        from .hnsw import HnswIndex

        index = HnswIndex.load(args.index)
    if args.node:
        if args.node not in index:
            raise NotFoundError(f"node {args.node!r} is not indexed")
        vec = index.vector(args.node)
    else:
        try:
            vec = np.asarray(json.loads(args.vector), dtype=np.float64)
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise UsageError(f"--vector must be a JSON list of numbers ({exc})") from exc
    hits = index.search(vec, k=min(args.k, len(index)), ef=args.ef)
    for node_id, dist in hits:
        print(f"{node_id}\t{dist:.6f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value or JSON file with defaults for any flag")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--log-level", default="WARNING")

    nav = argparse.ArgumentParser(add_help=False)
    nav.add_argument("--records", help="node records (defaults to the path recorded at build time)")
    nav.add_argument("--fusion", help="fusion checkpoint; identity-initialized when omitted")
    nav.add_argument("--fusion-hidden", type=int, default=512)
    nav.add_argument("--k-candidates", type=int, default=32)
    nav.add_argument("--expansion-depth", type=int, default=1)
    nav.add_argument("--no-stop", action="store_true", help="fixed-budget episodes without the STOP action")

    parser = _Parser(prog="hyperwalker", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    out = {}

    p = subs.add_parser("gen", parents=[common], help="generate a planted-evidence manifold")
    p.add_argument("--out", required=True, help="output JSONL of node records")
    p.add_argument("--truth", help="ground-truth JSON (default: <out stem>.truth.json)")
    p.add_argument("--dims", type=int, default=128)
    p.add_argument("--subjects", type=int, default=100)
    p.add_argument("--studies-per-subject", type=int, default=4)
    p.add_argument("--conditions", type=int, default=8)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--knowledge", type=int, default=None, help="knowledge nodes (default: one per condition)")
    p.add_argument("--duplicate-rate", type=float, default=0.1)
    p.add_argument("--precision", choices=("float32", "float16"), default="float32")
    p.set_defaults(func=cmd_gen)
    out["gen"] = p

    p = subs.add_parser("build", parents=[common], help="prune, index and induce hyperedges; persist the store")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="store directory")
    p.add_argument("--dims", type=int, default=None, help="expected embedding width")
    p.add_argument("--graph-frac", type=float, default=0.01)
    p.add_argument("--train-frac", type=float, default=0.01)
    p.add_argument("--tau-sim", type=float, default=0.8)
    p.add_argument("--tau-prune", type=float, default=0.9)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--drop-modality", nargs="*", default=[], choices=[m.value for m in Modality])
    p.add_argument("--dump-edges", help="also write hyperedges as JSON lines to this path")
    p.set_defaults(func=cmd_build)
    out["build"] = p

    p = subs.add_parser("train", parents=[common, nav], help="REINFORCE training of the Walker policy")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="policy checkpoint path")
    p.add_argument("--log", required=True, help="training log (JSON lines)")
    p.add_argument("--fusion-out", help="also save the fusion checkpoint used")
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--variant", choices=[k for k, v in ABLATIONS.items() if "drop" not in v], default="full")
    p.set_defaults(func=cmd_train)
    out["train"] = p

    p = subs.add_parser("navigate", parents=[common, nav], help="run one case and print its trace")
    p.add_argument("--store", required=True)
    p.add_argument("--case", required=True, help="study id of the case")
    p.add_argument("--policy", help="policy checkpoint; without it a baseline policy is used")
    p.add_argument("--baseline", choices=("greedy-cosine", "random"), default="greedy-cosine")
    p.add_argument("--greedy", action="store_true", help="argmax instead of sampling")
    p.add_argument("--ttt", action="store_true", help="single-step test-time adaptation of the fusion layer")
    p.add_argument("--no-linger", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_navigate)
    out["navigate"] = p

    p = subs.add_parser("evaluate", parents=[common, nav], help="Walker vs baselines and ablations")
    p.add_argument("--store", required=True)
    p.add_argument("--truth", help="ground truth JSON (default: next to the records)")
    p.add_argument("--policy")
    p.add_argument("--baselines", nargs="*", default=list(BASELINES), choices=BASELINES)
    p.add_argument("--portion", choices=("test", "train"), default="test")
    p.add_argument("--max-cases", type=int, default=None)
    p.add_argument("--episodes", type=int, default=2000, help="training length for reward-ablation rows")
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--traces", help="write every trace as JSON lines")
    for variant in ABLATIONS:
        if variant != "full":
            p.add_argument(f"--{variant}", dest=_ablation_dest(variant), action="store_true",
                           help=f"add the {variant} ablation row")
    p.set_defaults(func=cmd_evaluate)
    out["evaluate"] = p

    p = subs.add_parser("query", parents=[common], help="raw nearest-neighbour search")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--store")
    src.add_argument("--index", help="an index.hwix file")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--vector", help="query as a JSON list")
    what.add_argument("--node", help="use an indexed node's vector as the query")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--ef", type=int, default=None)
    p.set_defaults(func=cmd_query)
    out["query"] = p
    return parser, out


def _effective_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(subs[args.command], read_config(args.config))
            args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        print(json.dumps({"command": args.command, "config": _effective_config(args)}, default=str),
              file=sys.stderr)
        return args.func(args)
    except (UsageError, ContractViolation, NotFoundError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CorruptionError, FormatError) as exc:
        print(f"corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPTION
    except HyperWalkerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
