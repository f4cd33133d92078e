"""Command-line front-end.

    chmerge merge --base base.safetensors --expert math=math.safetensors ... --out bundle/
    chmerge reconstruct --bundle bundle/ --expert math --out math_hat.safetensors
    chmerge analyze similarity|overlap|storage ...
    chmerge router train|route ...
    chmerge inspect --bundle bundle/

Errors are reported as one JSON line on stderr. Exit codes: 2 usage,
3 data or shape error, 4 corrupt bundle.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .analysis import (
    expert_overlap,
    similarity_proportions,
    write_overlap_csv,
    write_similarity_csv,
)
from .cluster import ClusterSpec, build_assignments
from .delta_prune import PruneSpec, apply_prune, make_delta_set
from .exceptions import ChannelMergeError, CorruptBundleError, InvalidParameterError
from .merge import MergeSpec, merge, reconstruct, storage_report
from .router import TrainConfig, load_router, read_jsonl, route, save_router, train_router
from .synthetic import make_experts, make_router_corpus
from .tensor_io import load_bundle, read_tensor_file, save_bundle, write_tensor_file

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BUNDLE = 4

DEFAULTS = {
    "k": 2,
    "lambda": 0.5,
    "normalize": False,
    "prune": {"kind": "dare", "ratio": 0.3, "rescale": True},
    "cluster": {
        "strategy": "kmeans",
        "metric": "cosine",
        "granularity": "channel",
        "restarts": 8,
        "max_iters": 100,
    },
}


class UsageError(InvalidParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Everything a merge run needs; serialises to the manifest layout."""

    base: str
    experts: dict
    out: str | None = None
    k: int = 2
    lambda_: float = 0.5
    normalize: bool = False
    prune: dict = field(default_factory=lambda: dict(DEFAULTS["prune"]))
    cluster: dict = field(default_factory=lambda: dict(DEFAULTS["cluster"]))
    seed: int = 0

    @property
    def inputs(self):
        return {"base": self.base, "experts": dict(self.experts)}


def _load_config(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _parse_pairs(pairs, flag):
    out = {}
    for item in pairs or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"{flag} expects NAME=PATH, got {item!r}")
        if name in out:
            raise UsageError(f"{flag} name {name!r} given twice")
        out[name] = path
    return out


def resolve_run_config(args) -> RunConfig:
    """Defaults < CM_SEED < config file < flags."""
    data = _load_config(args.config) if args.config else {}
    inputs = data.get("inputs") or {}
    base = args.base or data.get("base") or inputs.get("base")
    experts = _parse_pairs(args.expert, "--expert")
    if not experts:
        experts = dict(data.get("experts") if isinstance(data.get("experts"), dict) else {})
        if not experts and inputs.get("experts"):
            order = data.get("experts") or list(inputs["experts"])
            experts = {name: inputs["experts"][name] for name in order}
    if not base:
        raise UsageError("no base checkpoint given (--base or config)")
    if not experts:
        raise UsageError("no experts given (--expert NAME=PATH or config)")

    prune = {**DEFAULTS["prune"], **(data.get("prune") or {})}
    cluster = {**DEFAULTS["cluster"], **(data.get("cluster") or {})}
    seed = data.get("seed")
    if seed is None:
        env = os.environ.get("CM_SEED")
        try:
            seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"CM_SEED must be an integer, got {env!r}") from None

    def pick(flag, current):
        return current if flag is None else flag

    prune["kind"] = pick(args.prune, prune["kind"])
    prune["ratio"] = pick(args.ratio, prune["ratio"])
    prune["rescale"] = pick(args.rescale, prune["rescale"])
    if prune["kind"] == "none":
        prune["ratio"] = 0.0
    for key, flag in (
        ("strategy", args.strategy),
        ("metric", args.metric),
        ("granularity", args.granularity),
        ("restarts", args.restarts),
        ("max_iters", args.max_iters),
    ):
        cluster[key] = pick(flag, cluster[key])
    return RunConfig(
        base=base,
        experts=experts,
        out=args.out or data.get("out"),
        k=pick(args.k, data.get("k", DEFAULTS["k"])),
        lambda_=pick(args.lambda_, data.get("lambda", DEFAULTS["lambda"])),
        normalize=pick(args.normalize, data.get("normalize", DEFAULTS["normalize"])),
        prune=prune,
        cluster=cluster,
        seed=pick(args.seed, seed),
    )


def run_merge(cfg: RunConfig, threads=1):
    if cfg.k > len(cfg.experts):
        raise UsageError(f"--k {cfg.k} exceeds the number of experts ({len(cfg.experts)})")
    cluster = ClusterSpec(k=cfg.k, seed=cfg.seed, **cfg.cluster)
    prune = PruneSpec(**cfg.prune)
    spec = MergeSpec(cfg.lambda_, cluster, prune, cfg.normalize)
    base = read_tensor_file(cfg.base)
    experts = {}
    for name, path in cfg.experts.items():
        try:
            experts[name] = read_tensor_file(path)
        except ChannelMergeError as exc:
            raise type(exc)(f"expert {name!r}: {exc}") from None
    deltas = apply_prune(make_delta_set(base, experts), prune, cfg.seed)
    table = build_assignments(deltas, cluster, n_jobs=threads)
    return merge(deltas, table, spec, n_jobs=threads, inputs=cfg.inputs)


# --------------------------------------------------------------------------- #
# commands


def cmd_merge(args):
    cfg = resolve_run_config(args)
    if not cfg.out:
        raise UsageError("no output directory given (--out or config)")
    bundle = run_merge(cfg, threads=args.threads)
    save_bundle(bundle, cfg.out)
    for line in storage_report(bundle).lines():
        print(line)
    return 0


def cmd_reconstruct(args):
    bundle = load_bundle(args.bundle)
    ckpt, stats = reconstruct(bundle, args.expert, return_stats=True)
    write_tensor_file(ckpt, args.out)
    print(stats.format_line())
    return 0


def cmd_analyze(args):
    if args.what == "storage":
        for line in storage_report(load_bundle(args.bundle)).lines():
            print(line)
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "overlap":
        matrix = expert_overlap(load_bundle(args.bundle))
        write_overlap_csv(matrix, out / "overlap.csv")
        print(out / "overlap.csv")
        return 0
    ref = _parse_pairs([args.reference], "--reference")
    cands = _parse_pairs(args.candidate, "--candidate")
    if not cands:
        raise UsageError("analyze similarity needs at least one --candidate")
    (ref_name, ref_path), = ref.items()
    report = similarity_proportions(
        read_tensor_file(args.base),
        read_tensor_file(ref_path),
        [read_tensor_file(p) for p in cands.values()],
        use_deltas=not args.raw,
        names=list(cands),
    )
    write_similarity_csv(report, out / "similarity.csv")
    print(out / "similarity.csv")
    return 0


def cmd_router(args):
    if args.action == "train":
        config = TrainConfig(
            lr=args.lr,
            epochs=args.epochs,
            batch=args.batch,
            seed=args.seed,
            dim=args.dim,
            bigrams=not args.no_bigrams,
        )
        classes = args.classes.split(",") if args.classes else None
        model = train_router(read_jsonl(args.data), config, classes=classes)
        save_router(model, args.out)
        print(f"final_loss={model.final_loss:.6f} classes={','.join(model.classes)}")
        return 0
    model = load_router(args.model)
    result = route(model, args.query)
    print(json.dumps(result, sort_keys=True))
    if args.bundle:
        if not args.out:
            raise UsageError("router route --bundle needs --out")
        ckpt, stats = reconstruct(load_bundle(args.bundle), result["chosen"], return_stats=True)
        write_tensor_file(ckpt, args.out)
        print(stats.format_line())
    return 0


def cmd_inspect(args):
    bundle = load_bundle(args.bundle)
    sys.stdout.write(bundle.manifest.to_json())
    return 0


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base, experts = make_experts(
        args.experts, args.layers, (args.rows, args.cols), seed=args.seed, scale=args.scale
    )
    write_tensor_file(base, out / "base.safetensors")
    for name, ckpt in experts.items():
        write_tensor_file(ckpt, out / f"{name}.safetensors")
    if args.corpus:
        with open(out / "queries.jsonl", "w", encoding="utf-8") as fh:
            for q in make_router_corpus(args.corpus, seed=args.seed):
                fh.write(json.dumps({"text": q.text, "label": q.label}, ensure_ascii=False) + "\n")
    print(out)
    return 0


# --------------------------------------------------------------------------- #


def build_parser():
    p = _Parser(prog="chmerge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("merge", help="cluster and merge experts into a bundle")
    m.add_argument("--config", help="JSON run config (a bundle manifest works)")
    m.add_argument("--base")
    m.add_argument("--expert", action="append", metavar="NAME=PATH")
    m.add_argument("--out")
    m.add_argument("--k", type=int)
    m.add_argument("--lambda", dest="lambda_", type=float)
    m.add_argument("--normalize", action="store_true", default=None,
                   help="scale by lambda/|cluster| instead of lambda")
    m.add_argument("--prune", choices=["none", "dare", "ties"])
    m.add_argument("--ratio", type=float)
    m.add_argument("--rescale", dest="rescale", action="store_true", default=None)
    m.add_argument("--no-rescale", dest="rescale", action="store_false")
    m.add_argument("--strategy", choices=["kmeans", "random", "sign"])
    m.add_argument("--metric", choices=["cosine", "euclidean", "manhattan"])
    m.add_argument("--granularity", choices=["channel", "layer", "model"])
    m.add_argument("--restarts", type=int)
    m.add_argument("--max-iters", dest="max_iters", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--threads", type=int, default=1)
    m.set_defaults(func=cmd_merge)

    r = sub.add_parser("reconstruct", help="rebuild one expert from a bundle")
    r.add_argument("--bundle", required=True)
    r.add_argument("--expert", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    a = sub.add_parser("analyze", help="similarity, overlap and storage reports")
    a.add_argument("what", choices=["similarity", "overlap", "storage"])
    a.add_argument("--bundle")
    a.add_argument("--base")
    a.add_argument("--reference", metavar="NAME=PATH")
    a.add_argument("--candidate", action="append", metavar="NAME=PATH")
    a.add_argument("--raw", action="store_true", help="compare raw weights, not deltas")
    a.add_argument("--out", default=".")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("router", help="train or query the task router")
    t.add_argument("action", choices=["train", "route"])
    t.add_argument("--data")
    t.add_argument("--model")
    t.add_argument("--out")
    t.add_argument("--query")
    t.add_argument("--bundle")
    t.add_argument("--classes", help="comma-separated class order")
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dim", type=int, default=2**15)
    t.add_argument("--no-bigrams", action="store_true")
    t.set_defaults(func=cmd_router)

    i = sub.add_parser("inspect", help="print a bundle manifest")
    i.add_argument("--bundle", required=True)
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("synth", help="write synthetic checkpoints and queries")
    s.add_argument("--out", required=True)
    s.add_argument("--experts", type=int, default=3)
    s.add_argument("--layers", type=int, default=5)
    s.add_argument("--rows", type=int, default=64)
    s.add_argument("--cols", type=int, default=64)
    s.add_argument("--scale", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corpus", type=int, default=0, help="queries per class")
    s.set_defaults(func=cmd_synth)
    return p


def _check_required(args):
    need = {
        ("analyze", "overlap"): ["bundle"],
        ("analyze", "storage"): ["bundle"],
        ("analyze", "similarity"): ["base", "reference"],
        ("router", "train"): ["data", "out"],
        ("router", "route"): ["model", "query"],
    }
    key = (args.command, getattr(args, "what", None) or getattr(args, "action", None))
    missing = [f"--{n}" for n in need.get(key, []) if not getattr(args, n)]
    if missing:
        raise UsageError(f"{' '.join(k for k in key if k)}: missing {', '.join(missing)}")
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")


def _fail(code, kind, message):
    line = json.dumps({"error": kind, "code": code, "message": str(message)})
    print(line, file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _check_required(args)
        return args.func(args)
    except InvalidParameterError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except CorruptBundleError as exc:
        return _fail(EXIT_BUNDLE, "corrupt_bundle", exc)
    except ChannelMergeError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except KeyError as exc:
        return _fail(EXIT_DATA, "data", exc.args[0] if exc.args else exc)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
