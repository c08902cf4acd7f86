"""Command-line entry point: synth-gen, train, predict, eval, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys


def _cap_threads() -> None:
    """SG2HOI_THREADS caps BLAS parallelism; must run before numpy loads."""
    cap = os.environ.get("SG2HOI_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sghoi",
        description="Scene-graph conditioned human-object interaction detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("synth-gen", help="generate a synthetic dataset directory")
    gen.add_argument("--config", help="world config JSON (defaults used when omitted)")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--seed", type=int, help="override the world seed")
    gen.add_argument("--num-scenes", type=int, help="override the scene count")
    gen.add_argument(
        "--rules",
        choices=["default", "predicate-only"],
        default="default",
        help="rule table used to derive ground-truth interactions",
    )

    def add_run_config(p):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="run seed (mandatory here or in the config)")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="config override; flags win over the file",
        )

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    add_run_config(tr)
    tr.add_argument("--data", required=True, help="dataset directory (from synth-gen)")
    tr.add_argument("--scenes", help="scene slice 'start:stop' within the manifest")
    tr.add_argument("--out", required=True, help="output directory (checkpoint, log, config)")
    tr.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    tr.add_argument(
        "--ablation",
        choices=["full", "baseline", "sge", "rel", "no-rel", "cov"],
        help="preset switching model paths on/off",
    )

    pr = sub.add_parser("predict", help="score scenes with a trained checkpoint")
    add_run_config(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True, help="dataset directory")
    pr.add_argument("--scenes", help="scene slice 'start:stop'")
    pr.add_argument("--out", required=True, help="detections JSON path")
    pr.add_argument("--min-score", type=float, help="emit scores strictly above this")
    pr.add_argument("--dot", help="write scene graph + predicted interactions as DOT")

    ev = sub.add_parser("eval", help="evaluate detections against ground truth")
    ev.add_argument("--det", required=True, help="detections JSON")
    ev.add_argument("--gt", required=True, help="dataset directory or annotations JSON")
    ev.add_argument("--scenes", help="scene slice when --gt is a dataset directory")
    ev.add_argument("--setting", choices=["default", "known"], default="default")
    ev.add_argument("--rare", help="JSON list of rare class ids")
    ev.add_argument("--iou", type=float, default=0.5)
    ev.add_argument("--out", help="write the report JSON here")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--fixtures", type=int, default=3, help="random fixtures per path")
    gc.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            from .datamodel import ConfigError

            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_run_config(args):
    from .config import RunConfig
    from .datamodel import read_json

    payload = read_json(args.config) if args.config else {}
    cfg = RunConfig.resolve(payload, _overrides(args), seed=args.seed)
    return cfg


def cmd_synth_gen(args) -> int:
    from . import synthworld
    from .datamodel import read_json

    payload = read_json(args.config) if args.config else {}
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.num_scenes is not None:
        payload["num_scenes"] = args.num_scenes
    if "seed" not in payload:
        from .datamodel import ConfigError

        raise ConfigError("world seed is mandatory (config field 'seed' or --seed)")
    config = synthworld.WorldConfig.from_payload(payload)
    vocab = synthworld.default_vocabulary(
        config.num_object_categories, config.num_predicates, config.num_interactions
    )
    rules = (
        synthworld.predicate_only_rule_table(vocab)
        if args.rules == "predicate-only"
        else synthworld.default_rule_table(vocab)
    )
    manifest = synthworld.write_dataset(config, rules, args.out)
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}")
    return 0


def _train_store(cfg, vocab):
    from .params import ParameterStore

    store = ParameterStore.build(
        cfg.model_dims(), vocab.num_interactions, cfg.switches(), seed=cfg.seed
    )
    store.meta["vocab_sizes"] = {
        "objects": vocab.num_objects,
        "predicates": vocab.num_predicates,
        "interactions": vocab.num_interactions,
    }
    store.meta["config"] = cfg.payload()
    return store


def cmd_train(args) -> int:
    from . import hoihead, pipeline
    from .datamodel import load_vocabulary

    cfg = _load_run_config(args)
    if args.ablation:
        cfg.apply_ablation(args.ablation)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    cfg.validate()

    vocab = load_vocabulary(os.path.join(args.data, "vocabulary.json"))
    vocab = vocab.with_embedding_dim(int(cfg["model"]["word_dim"]))
    dataset = pipeline.load_dataset(args.data, vocab, cfg, scenes=args.scenes)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.resolved.json"))

    store = _train_store(cfg, vocab)
    records = hoihead.train(
        dataset, cfg, store, vocab, log_path=os.path.join(args.out, "train_log.jsonl")
    )
    store.save(os.path.join(args.out, "checkpoint.npz"))
    if records:
        last = records[-1]
        print(f"trained {len(records)} epochs; final mean loss {last.mean_loss:.6f}")
    else:
        print("trained 0 epochs; checkpoint equals initialization")
    return 0


def _dot_escape(text: str) -> str:
    return text.replace('"', '\\"')


def dot_dump(samples, detections_by_image, vocab, min_score: float) -> str:
    """One DOT digraph holding the scene graph and the predicted interactions."""
    lines = ["digraph scenes {", "  rankdir=LR;"]
    for sample in samples:
        sg = sample.graph
        safe = sg.image_id.replace("-", "_")
        lines.append(f'  subgraph "cluster_sg_{safe}" {{')
        lines.append(f'    label="scene graph {_dot_escape(sg.image_id)}";')
        for node in sg.nodes:
            name = vocab.objects[node.category_id]
            shape = "box" if node.is_human else "ellipse"
            lines.append(
                f'    "sg_{safe}_{node.node_id}" [label="{_dot_escape(name)}#{node.node_id}", shape={shape}];'
            )
        for edge in sg.edges:
            pred = vocab.predicates[edge.predicate_id]
            lines.append(
                f'    "sg_{safe}_{edge.subject_id}" -> "sg_{safe}_{edge.object_id}"'
                f' [label="{_dot_escape(pred)} ({edge.confidence:.2f})"];'
            )
        lines.append("  }")
        lines.append(f'  subgraph "cluster_hoi_{safe}" {{')
        lines.append(f'    label="predicted interactions {_dot_escape(sg.image_id)}";')
        nodes_used = set()
        hoi_edges = []
        for det in detections_by_image.get(sg.image_id, []):
            if det.score <= min_score:
                continue
            h_id = next(
                n.node_id for n in sg.nodes if n.box == det.human_box and n.is_human
            )
            o_id = next(
                n.node_id
                for n in sg.nodes
                if n.box == det.object_box and n.node_id != h_id
            )
            nodes_used.update((h_id, o_id))
            label = vocab.interactions[det.interaction_id]
            hoi_edges.append(
                f'    "hoi_{safe}_{h_id}" -> "hoi_{safe}_{o_id}"'
                f' [label="{_dot_escape(label)} ({det.score:.2f})"];'
            )
        for node_id in sorted(nodes_used):
            node = sg.node_by_id(node_id)
            name = vocab.objects[node.category_id]
            shape = "box" if node.is_human else "ellipse"
            lines.append(
                f'    "hoi_{safe}_{node_id}" [label="{_dot_escape(name)}#{node_id}", shape={shape}];'
            )
        lines.extend(hoi_edges)
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_predict(args) -> int:
    from . import pipeline
    from .datamodel import load_vocabulary, save_detections
    from .params import ParameterStore

    store = ParameterStore.load(args.checkpoint)
    from .config import RunConfig

    base = store.meta.get("config")
    cfg = RunConfig.resolve(base, _overrides(args), seed=args.seed)
    if args.min_score is not None:
        cfg["eval"]["min_score"] = args.min_score

    vocab = load_vocabulary(os.path.join(args.data, "vocabulary.json"))
    vocab = vocab.with_embedding_dim(int(cfg["model"]["word_dim"]))
    store.check_vocab(vocab.num_objects, vocab.num_predicates, vocab.num_interactions)
    samples = pipeline.load_dataset(args.data, vocab, cfg, scenes=args.scenes, with_annotations=False)
    detections = {
        sample.graph.image_id: pipeline.predict_scene(sample, vocab, store, cfg)
        for sample in samples
    }
    save_detections(detections, args.out)
    if args.dot:
        text = dot_dump(samples, detections, vocab, float(cfg["eval"]["min_score"]))
        os.makedirs(os.path.dirname(os.path.abspath(args.dot)), exist_ok=True)
        with open(args.dot, "w") as handle:
            handle.write(text)
    total = sum(len(d) for d in detections.values())
    print(f"wrote {total} detections for {len(samples)} scenes to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import evalkit
    from .datamodel import load_annotations, load_detections, read_json, write_json

    dets = load_detections(args.det)
    gts = {}
    if os.path.isdir(args.gt):
        manifest = read_json(os.path.join(args.gt, "manifest.json"))
        from .pipeline import parse_slice

        entries = manifest["scenes"]
        for entry in entries[parse_slice(args.scenes, len(entries))]:
            ann = load_annotations(os.path.join(args.gt, entry["annotations"]))
            gts[ann.image_id] = list(ann.hois)
    else:
        ann = load_annotations(args.gt)
        gts[ann.image_id] = list(ann.hois)

    rare_ids = None
    if args.rare:
        rare_ids = read_json(args.rare)
    report = evalkit.map_role(
        dets, gts, setting=args.setting, rare_ids=rare_ids, iou_thresh=args.iou
    )
    print(evalkit.report_table(report))
    if args.out:
        write_json(report.payload(), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from . import hoihead
    from .params import ParameterStore

    failures = 0
    for op_name in sorted(hoihead.GRAD_CHECK_OPS):
        worst = 0.0
        for fixture_index in range(args.fixtures):
            fixture = hoihead.make_grad_fixture(args.seed + 17 * fixture_index + 1)
            store = ParameterStore.build(
                fixture.config.model_dims(),
                fixture.vocab.num_interactions,
                fixture.config.switches(),
                seed=args.seed + fixture_index,
            )
            worst = max(worst, hoihead.grad_check(op_name, fixture, store, seed=args.seed))
        status = "ok" if worst <= args.tolerance else "FAIL"
        print(f"{op_name:<16} max rel err {worst:.3e}  {status}")
        if worst > args.tolerance:
            failures += 1
    return 4 if failures else 0


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .datamodel import ConfigError, ContractError, DataError, SGHOIError

    handlers = {
        "synth-gen": cmd_synth_gen,
        "train": cmd_train,
        "predict": cmd_predict,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except SGHOIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
