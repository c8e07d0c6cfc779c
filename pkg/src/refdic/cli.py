"""Command-line interface.

Exit codes: 0 success, 1 computation failure, 2 usage or schema failure.
Machine-readable results go to files; one-line summaries go to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fixture as fixture_mod
from ._io import atomic_write_text
from .corpus import load_corpus, tokenize
from .errors import EmptyCaptionError, ParseError, RefDicError, SchemaError, UsageError
from .grouping import build_groups, dumps_groups, group_overlap_stats, load_groups, read_embeddings
from .losses import rl_loss, xe_loss
from .metrics import score_candidates
from .regionmatch import build_tuples, project, read_region_features
from .sgparse import dump_graphs, load_graphs, load_lexicon, parse_graph
from .twoflow import (EncoderConfig, encode, grad_check, init_params, load_params,
                      save_params, write_output)


@dataclass
class PipelineConfig:
    paths: dict = field(default_factory=dict)
    coarse_size: int = 500
    p: int = 3
    k: int = 5
    m: float = 0.8
    n_param: float = 5.0
    seed: int = 0

    def validate(self):
        for name, path in self.paths.items():
            if path is not None and not Path(path).is_file():
                raise UsageError(f"--{name.replace('_', '-')}: no such file: {path}")
        for name in ("coarse_size", "p", "k"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
        if self.n_param <= 0:
            raise UsageError("--n must be > 0")
        return self


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1) + "\n")


def cmd_gen_fixture(args):
    fx = fixture_mod.generate(seed=args.seed, n_images=args.images)
    paths = fixture_mod.write_fixture(args.out, fx)
    config = EncoderConfig(d=args.d, h=args.h, L_t=args.lt, L_fs=args.lfs, d_ff=args.dff)
    d_in = fx.regions[0].features.shape[1]
    save_params(Path(args.out) / "params.json", init_params(config, args.seed, d_in=d_in), config, args.seed)
    print(f"wrote {len(fx.corpus)} images to {args.out} ({', '.join(sorted(p.name for p in paths.values()))}, params.json)")


def cmd_parse(args):
    PipelineConfig({"captions": args.captions, "lexicon": args.lexicon}).validate()
    corpus = load_corpus(args.captions)
    lex = load_lexicon(args.lexicon)
    graphs = {img.id: parse_graph(img.tokens, lex) for img in corpus}
    _write_json(args.out, dump_graphs(graphs))
    print(f"parsed {len(graphs)} scene graphs -> {args.out}")


def cmd_build_groups(args):
    cfg = PipelineConfig({"captions": args.captions, "embeddings": args.embeddings, "graphs": args.graphs},
                         coarse_size=args.coarse_size, p=args.p, k=args.k).validate()
    corpus = load_corpus(args.captions)
    emb = read_embeddings(args.embeddings)
    graphs = load_graphs(args.graphs)
    groups = build_groups(corpus, emb, graphs, cfg.coarse_size, cfg.p, cfg.k)
    atomic_write_text(args.out, dumps_groups(groups))
    print(f"built {len(groups)} groups (top{cfg.p}-{cfg.p + cfg.k - 1}), "
          f"mean overlap {group_overlap_stats(groups, graphs):.3f} -> {args.out}")


def _load_candidates(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = data["candidates"]
        out = {}
        for e in entries:
            image_id = e["image_id"]
            if image_id in out:
                raise SchemaError(f"duplicate candidate for image {image_id}")
            out[image_id] = tokenize(e["caption"])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed candidate JSON: {exc.msg}", exc.pos) from exc
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed candidate file: {exc!r}") from exc
    except EmptyCaptionError as exc:
        raise SchemaError(str(exc)) from exc
    return out


def cmd_score(args):
    cfg = PipelineConfig({"captions": args.captions, "candidates": args.candidates, "groups": args.groups},
                         m=args.m, n_param=args.n).validate()
    corpus = load_corpus(args.captions)
    candidates = _load_candidates(args.candidates)
    groups = {g.target: g.members for g in load_groups(args.groups)}
    unknown = [i for i in candidates if i not in corpus]
    if unknown:
        raise SchemaError(f"candidates reference unknown image ids: {unknown}")
    ungrouped = [i for i in candidates if i not in groups]
    if ungrouped:
        raise SchemaError(f"no reference group for candidate images: {ungrouped}")
    report = score_candidates(corpus, candidates, groups, cfg.m, cfg.n_param, args.idf_split)
    _write_json(args.out, report)
    print(f"scored {len(report['images'])} candidates: CIDEr {report['mean']['cider']:.4f}, "
          f"DisCIDEr {report['mean']['discider']:.4f} -> {args.out}")


def _reference_ids(args):
    if args.refs:
        return [int(x) for x in args.refs.split(",")]
    if args.groups:
        for g in load_groups(args.groups):
            if g.target == args.target:
                return list(g.members)
        raise SchemaError(f"no group for target {args.target} in {args.groups}")
    raise UsageError("either --refs or --groups is required")


def _memory(args, dtype):
    PipelineConfig({"features": args.features, "params": args.params, "groups": args.groups}).validate()
    feats = read_region_features(args.features)
    if args.params:
        params, config = load_params(args.params, dtype=dtype)
    else:
        config = EncoderConfig(d=args.d, h=args.h, L_t=args.lt, L_fs=args.lfs, d_ff=args.dff,
                               residual_in_fuse_select=not args.no_residual)
        d_in = next(iter(feats.values())).features.shape[1]
        params = init_params(config, args.seed, d_in=d_in, dtype=dtype)
    if "proj.weight" not in params:
        raise SchemaError("parameter file has no proj.weight/proj.bias tensors")
    ids = [args.target] + _reference_ids(args)
    missing = [i for i in ids if i not in feats]
    if missing:
        raise SchemaError(f"no region features for images {missing}")
    d_in = params["proj.weight"].shape[0]
    for i in ids:
        if feats[i].features.shape[1] != d_in:
            raise SchemaError(f"region features of image {i} have {feats[i].features.shape[1]} columns; "
                              f"proj.weight expects {d_in}")
    mem = [project(feats[i].features.astype(dtype), params["proj.weight"], params["proj.bias"]) for i in ids]
    return mem[0], mem[1:], params, config, ids


def cmd_match_regions(args):
    m_t, refs, _, _, ids = _memory(args, np.float64)
    tuples = build_tuples(m_t, refs)
    _write_json(args.out, {"target": ids[0], "references": ids[1:],
                           "tuples": [t.to_json() for t in tuples]})
    print(f"matched {len(tuples)} target regions against {len(refs)} reference images -> {args.out}")


def cmd_encode(args):
    if args.check_grads and not args.f64:
        raise UsageError("--check-grads requires --f64")
    dtype = np.float64 if args.f64 else np.float32
    m_t, refs, params, config, ids = _memory(args, dtype)
    res = encode(m_t, refs, params, config)
    write_output(args.out, res.output)
    msg = f"encoded target {ids[0]} with {len(refs)} references: output {res.output.shape} -> {args.out}"
    if args.check_grads:
        report = grad_check(m_t, refs, params, config, args.epsilon, args.samples, args.seed)
        if args.report:
            _write_json(args.report, report.to_json())
        msg += f"; grad check max relative error {report.max_rel_error:.3e} over {len(report.rows)} samples"
        if report.max_rel_error >= args.tolerance:
            print(msg)
            raise RefDicError(f"gradient check failed: {report.max_rel_error:.3e} >= {args.tolerance:g}")
    print(msg)


def cmd_loss_demo(args):
    probs = args.probs or [0.5, 0.25]
    rewards = args.rewards or [1.0, 0.0]
    log_probs = args.log_probs or [-1.0, -2.0]
    out = {"xe_loss": xe_loss(probs), "rl_loss": rl_loss(log_probs, rewards),
           "baseline": sum(rewards) / len(rewards)}
    print(json.dumps(out))


def _add_encoder_flags(p):
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--h", type=int, default=8)
    p.add_argument("--lt", type=int, default=3, help="target-flow depth")
    p.add_argument("--lfs", type=int, default=3, help="fuse/select depth")
    p.add_argument("--dff", type=int, default=2048)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refdic", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixture", help="write a deterministic mini-corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=50)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_gen_fixture, d=32, h=4, dff=64)

    p = sub.add_parser("parse", help="parse captions into scene graphs")
    p.add_argument("--captions", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("build-groups", help="two-stage reference group construction")
    p.add_argument("--captions", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coarse-size", type=int, default=500)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_build_groups)

    p = sub.add_parser("score", help="CIDEr and DisCIDEr for candidate captions")
    p.add_argument("--captions", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=float, default=0.8)
    p.add_argument("--n", type=float, default=5.0)
    p.add_argument("--idf-split", choices=["train", "val", "test", "all"], default=None,
                   help="IDF corpus (default: split of each scored image)")
    p.set_defaults(func=cmd_score)

    for name, func, help_ in (("match-regions", cmd_match_regions, "dump target-reference region tuples"),
                              ("encode", cmd_encode, "run the Two-Flow Encoder")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--features", required=True)
        p.add_argument("--params", help="parameter manifest; default: seeded initialization")
        p.add_argument("--target", type=int, required=True)
        p.add_argument("--refs", help="comma-separated reference image ids")
        p.add_argument("--groups", help="take references from this groups file")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-residual", action="store_true",
                       help="bare attention in fuse/select layers")
        _add_encoder_flags(p)
        p.set_defaults(func=func)
        if name == "encode":
            p.add_argument("--f64", action="store_true", help="64-bit arithmetic")
            p.add_argument("--check-grads", action="store_true")
            p.add_argument("--epsilon", type=float, default=1e-5)
            p.add_argument("--samples", type=int, default=200)
            p.add_argument("--tolerance", type=float, default=1e-4)
            p.add_argument("--report", help="write the sampled-parameter table here")

    p = sub.add_parser("loss-demo", help="evaluate the XE and RL loss kernels")
    p.add_argument("--probs", type=float, nargs="+")
    p.add_argument("--rewards", type=float, nargs="+")
    p.add_argument("--log-probs", type=float, nargs="+")
    p.set_defaults(func=cmd_loss_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (UsageError, OSError) as exc:
        print(f"refdic {args.command}: {exc}", file=sys.stderr)
        return 2
    except (RefDicError, ValueError) as exc:
        print(f"refdic {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
