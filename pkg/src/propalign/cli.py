"""Command-line entry point: ``propalign generate|train|eval|propagate|verify``.

Every flag can also be given as an environment variable ``PROPALIGN_<DEST>``
(for example ``PROPALIGN_SEED=3``); explicit flags win.  Each run writes one
``manifest*.json`` next to its outputs recording the command, configuration,
seeds, paths, sha256 checksums and timings.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 data error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import hand_model as hm
from .errors import ConfigurationError, FormatError, InvalidInputError, OrderingError, PropalignError
from .evaluation import (
    aggregate,
    bucket_means,
    evaluate,
    gap_profile,
    propagate_video,
    write_frame_csv,
)
from .losses import LOG_COLUMNS, LossWeights
from .metrics import TABLE_COLUMNS, write_report_csv
from .predictor import Annotation, init_params, load_checkpoint, save_checkpoint
from .synth_data import MotionConfig, generate_dataset, label_schedule, load_dataset, save_dataset
from .trainer import STAGES, TrainData, TrainingConfig, train_stage
from .verify import CHECKS, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_DATA = 0, 2, 3, 4
MANIFEST_VERSION = 1
ENV_PREFIX = "PROPALIGN_"
SPLITS = ("train", "test")
HAND_MODEL_FILE = "hand_model.json"


# -------------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    checksums: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def seal(self) -> "RunManifest":
        self.checksums = {name: sha256(p) for name, p in sorted(self.outputs.items())}
        return self

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, verify: bool = True) -> "RunManifest":
        """Reload a manifest; with ``verify`` every output checksum is recomputed."""
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest format_version {doc.get('format_version')!r}")
        m = cls(**doc)
        if verify:
            for name, digest in m.checksums.items():
                target = Path(m.outputs[name])
                if not target.exists() or sha256(target) != digest:
                    raise FormatError(f"manifest {path}: checksum mismatch for {name} ({target})")
        return m


# ------------------------------------------------------------------ arguments


def _add(p, *flags, **kw):
    p.add_argument(*flags, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propalign", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic train/test datasets")
    _add(g, "--videos", type=int, default=40, help="training videos")
    _add(g, "--test-videos", type=int, default=8)
    _add(g, "--frames", type=int, default=97, help="frames per video (T)")
    _add(g, "--k", type=int, default=16, help="label stride K")
    _add(g, "--seed", type=int, default=1)
    _add(g, "--model-seed", type=int, default=0, help="seed of the procedural hand model")
    _add(g, "--out", required=True)

    t = sub.add_parser("train", help="run training stages")
    _add(t, "--stage", choices=("1", "2", "3", "all"), default="all")
    _add(t, "--data", required=True, help="directory written by generate")
    _add(t, "--config", help="JSON file overriding TrainingConfig.desk() fields")
    _add(t, "--out", required=True)
    _add(t, "--resume", help="checkpoint to continue from (default: latest stage checkpoint in --out)")
    _add(t, "--lambda-align", type=float, help="override weights.lambda_align (0 gives the baseline)")
    _add(t, "--seed", type=int, help="override the config seed")
    _add(t, "--iterations", type=int, help="override n1, n2 and n3 together")

    e = sub.add_parser("eval", help="score a checkpoint on unlabelled frames")
    _add(e, "--scenario", choices=("1", "2"), required=True)
    _add(e, "--split", choices=SPLITS, default="test")
    _add(e, "--data", required=True)
    _add(e, "--checkpoint", required=True)
    _add(e, "--out", required=True)
    _add(e, "--model", help="label for the model column")
    _add(e, "--emit-plot-data", action="store_true", help="also write gap and loss tables")
    _add(e, "--train-log", help="training log for the loss table (default: next to the checkpoint)")
    _add(e, "--oracle-gt", action="store_true", help="test hook: scenario 1 predicts ground truth")

    pr = sub.add_parser("propagate", help="dense annotations for every frame")
    _add(pr, "--data", required=True)
    _add(pr, "--split", choices=SPLITS, default="test")
    _add(pr, "--checkpoint", required=True)
    _add(pr, "--video", type=int, help="single video id (default: all)")
    _add(pr, "--out", required=True, help="output JSON-lines file")

    v = sub.add_parser("verify", help="run the self-check suite")
    _add(v, "--quick", action="store_true", help="reduced sizes, < 30 s")
    _add(v, "--inject-fault", choices=CHECKS, help="perturb one check to prove it can fail")
    _add(v, "--out", help="directory for the report and manifest")
    _apply_env(sub)
    return parser


def _apply_env(subparsers) -> None:
    """Turn PROPALIGN_<DEST> variables into defaults for every subcommand."""
    for p in subparsers.choices.values():
        for action in p._actions:
            if not action.option_strings or action.dest == "help":
                continue
            raw = os.environ.get(ENV_PREFIX + action.dest.upper())
            if raw is None:
                continue
            if isinstance(action, argparse._StoreTrueAction):
                action.default = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                value = action.type(raw) if action.type else raw
                if action.choices is not None and value not in action.choices:
                    raise ConfigurationError(f"{ENV_PREFIX}{action.dest.upper()}={raw!r} is not one of {action.choices}")
                action.default = value
            action.required = False


# ---------------------------------------------------------------------- helpers


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset_path(data_dir, split: str) -> Path:
    p = Path(data_dir) / f"{split}.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"no {split} dataset at {p}")
    return p


def _hand_model(data_dir, model_seed: int) -> hm.HandModelSpec:
    p = Path(data_dir) / HAND_MODEL_FILE
    spec = hm.HandModelSpec.load(p) if p.exists() else hm.make_toy_hand(model_seed)
    if spec.seed != model_seed:
        raise FormatError(f"hand model seed {spec.seed} does not match dataset model_seed {model_seed}")
    return spec


def _load(data_dir, split: str):
    ds = load_dataset(_dataset_path(data_dir, split))
    return ds, _hand_model(data_dir, ds.model_seed)


def _training_config(args) -> TrainingConfig:
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(overrides, dict):
        raise ConfigurationError("config file must hold a JSON object")
    if "weights" in overrides:
        overrides["weights"] = {**asdict(LossWeights()), **overrides["weights"]}
    cfg = TrainingConfig.from_dict({**TrainingConfig.desk().to_dict(), **overrides})
    doc = cfg.to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.iterations is not None:
        doc.update(n1=args.iterations, n2=args.iterations, n3=args.iterations)
    if args.lambda_align is not None:
        doc["weights"] = {**doc["weights"], "lambda_align": args.lambda_align}
    return TrainingConfig.from_dict(doc)


def _stage_checkpoint(out: Path, stage: int) -> Path:
    return out / f"stage{stage}.json"


def _model_label(cfg_doc: dict, scenario: int) -> str:
    if scenario == 2:
        return "propagation"
    lam = (cfg_doc or {}).get("weights", {}).get("lambda_align", 0.0)
    return "baseline+align" if lam > 0 else "baseline"


# --------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    if not 1 <= args.k <= args.frames:
        raise ConfigurationError(f"--k {args.k} must satisfy 1 <= K <= --frames {args.frames}")
    if args.videos < 1 or args.test_videos < 0:
        raise ConfigurationError("--videos must be >= 1 and --test-videos >= 0")
    label_schedule(args.frames, args.k)
    out = _out_dir(args.out)
    spec = hm.make_toy_hand(args.model_seed)
    motion = MotionConfig(frames=args.frames)
    spec_path = out / HAND_MODEL_FILE
    spec.save(spec_path)
    outputs = {"hand_model": str(spec_path)}
    for split, n in (("train", args.videos), ("test", args.test_videos)):
        ds = generate_dataset(n, args.k, spec, motion=motion, seed=args.seed, split=split)
        path = out / f"{split}.jsonl"
        save_dataset(ds, path)
        outputs[split] = str(path)
    manifest = RunManifest(
        command=args.argv,
        config={"videos": args.videos, "test_videos": args.test_videos, "frames": args.frames, "K": args.k, "motion": asdict(motion)},
        seeds={"data": args.seed, "model": args.model_seed},
        inputs={},
        outputs=outputs,
        timings={"total_s": time.perf_counter() - t0},
    )
    manifest.seal().write(out / "manifest_generate.json")
    print(f"wrote {args.videos} train / {args.test_videos} test videos to {out}")
    return EXIT_OK


def _resume_point(args, out: Path, first: int):
    """Parameters to start stage ``first`` from, or an OrderingError."""
    if first == 1:
        return None, None
    ckpt = Path(args.resume) if args.resume else _stage_checkpoint(out, first - 1)
    if not ckpt.exists():
        raise OrderingError(f"stage {first} needs a stage-{first - 1} checkpoint; none at {ckpt}")
    params, doc = load_checkpoint(ckpt)
    done = doc.get("completed_stage", 0)
    if done < first - 1:
        raise OrderingError(f"stage {first} needs a completed stage-{first - 1} checkpoint; {ckpt} has stage {done}")
    return params, ckpt


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _training_config(args)
    out = _out_dir(args.out)
    stages = list(STAGES) if args.stage == "all" else [int(args.stage)]
    ds, spec = _load(args.data, "train")
    data = TrainData(ds, spec)
    start, resumed_from = _resume_point(args, out, stages[0])
    params = init_params(cfg.seed) if start is None else start

    log_path = out / "train_log.csv"
    mode = "w" if stages[0] == 1 else "a"
    if mode == "a" and not log_path.exists():
        mode = "w"
    offsets = {1: 0, 2: cfg.n1, 3: cfg.n1 + cfg.n2}
    outputs, timings = {}, {}
    meta = {"config": cfg.to_dict(), "data_model_seed": ds.model_seed}

    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(("iteration", "stage", *LOG_COLUMNS))

        def log(it, stage, b):
            writer.writerow((it, stage, *(repr(v) for v in b.as_row())))

        for stage in stages:
            ts = time.perf_counter()

            def on_checkpoint(it, st, p, stage=stage):
                path = out / f"stage{st}_iter{it - offsets[st]:06d}.json"
                save_checkpoint(path, p, ds.camera, ds.model_seed, completed_stage=st - 1, in_stage=[st, it - offsets[st]], **meta)
                outputs[path.stem] = str(path)

            params = train_stage(stage, data, params, cfg, log=log, on_checkpoint=on_checkpoint, start_iteration=offsets[stage])
            path = _stage_checkpoint(out, stage)
            save_checkpoint(path, params, ds.camera, ds.model_seed, completed_stage=stage, **meta)
            outputs[path.stem] = str(path)
            timings[f"stage{stage}_s"] = time.perf_counter() - ts
            print(f"stage {stage}: {cfg.iterations(stage)} iterations in {timings[f'stage{stage}_s']:.1f}s -> {path}")
    final = out / "final.json"
    final.write_bytes(_stage_checkpoint(out, stages[-1]).read_bytes())
    outputs.update(final=str(final), train_log=str(log_path))
    timings["total_s"] = time.perf_counter() - t0
    manifest = RunManifest(
        command=args.argv,
        config=cfg.to_dict(),
        seeds={"train": cfg.seed, "data": ds.meta.get("seed"), "model": ds.model_seed},
        inputs={"data": str(_dataset_path(args.data, "train")), **({"resume": str(resumed_from)} if resumed_from else {})},
        outputs=outputs,
        timings=timings,
    )
    manifest.seal().write(out / f"manifest_train_{args.stage}.json")
    return EXIT_OK


def _oracle_predictor(video, params, spec, camera) -> Annotation:
    return Annotation(video.root.copy(), video.pose.copy(), video.beta.copy())


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    scenario = int(args.scenario)
    if args.oracle_gt and scenario != 1:
        raise ConfigurationError("--oracle-gt replaces the regressor and only applies to scenario 1")
    ds, spec = _load(args.data, args.split)
    params, doc = load_checkpoint(args.checkpoint)
    if doc["model_seed"] != ds.model_seed:
        raise FormatError(f"checkpoint model_seed {doc['model_seed']} differs from dataset model_seed {ds.model_seed}")
    out = _out_dir(args.out)
    results = evaluate(ds, params, spec, scenario, predictor=_oracle_predictor if args.oracle_gt else None)
    if not results:
        raise InvalidInputError(f"{args.split} split has no unlabelled frames to evaluate")
    model = args.model or ("oracle" if args.oracle_gt else _model_label(doc.get("config"), scenario))
    stem = f"eval_s{scenario}_{args.split}"
    frames_path, table_path = out / f"{stem}_frames.csv", out / f"{stem}.csv"
    write_frame_csv(frames_path, results)
    report = aggregate(results)
    write_report_csv(table_path, [(args.split, scenario, model, report)])
    outputs = {"frames": str(frames_path), "table": str(table_path)}

    if args.emit_plot_data:
        gap_path = out / f"{stem}_gap.csv"
        rows = gap_profile(ds, params, spec)
        gaps = np.array([r[2] for r in rows])
        errs = np.array([r[3] for r in rows])
        with open(gap_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("gap", "mpjpe_mm", "count"))
            for g in np.unique(gaps):
                w.writerow((int(g), repr(float(errs[gaps == g].mean())), int((gaps == g).sum())))
        outputs["gap"] = str(gap_path)
        log_path = Path(args.train_log) if args.train_log else Path(args.checkpoint).parent / "train_log.csv"
        if log_path.exists():
            loss_path = out / f"{stem}_loss.csv"
            with open(log_path) as src, open(loss_path, "w", newline="") as dst:
                w = csv.writer(dst)
                w.writerow(("iteration", "stage", "total"))
                for row in csv.DictReader(src):
                    w.writerow((row["iteration"], row["stage"], row["total"]))
            outputs["loss"] = str(loss_path)
        print("gap buckets 1-4 / 5-8 / 9-16:", " / ".join(f"{b:.2f}" for b in bucket_means(rows)))

    manifest = RunManifest(
        command=args.argv,
        config={"scenario": scenario, "split": args.split, "model": model, "oracle_gt": args.oracle_gt},
        seeds={"data": ds.meta.get("seed"), "model": ds.model_seed},
        inputs={"data": str(_dataset_path(args.data, args.split)), "checkpoint": str(args.checkpoint)},
        outputs=outputs,
        timings={"total_s": time.perf_counter() - t0},
        notes={"f_score_points": "vertices", "frames_evaluated": len(results)},
    )
    manifest.seal().write(out / f"manifest_{stem}.json")
    print(", ".join(f"{c} {v:.3f}" for c, v in zip(TABLE_COLUMNS, report.as_row())))
    return EXIT_OK


def cmd_propagate(args) -> int:
    t0 = time.perf_counter()
    ds, spec = _load(args.data, args.split)
    params, doc = load_checkpoint(args.checkpoint)
    videos = ds.videos if args.video is None else [v for v in ds.videos if v.video_id == args.video]
    if not videos:
        raise InvalidInputError(f"video {args.video} not found in the {args.split} split")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w") as fh:
        fh.write(json.dumps({"format_version": 1, "split": args.split, "checkpoint": str(args.checkpoint)}) + "\n")
        for video in videos:
            if not video.labelled_indices:
                raise InvalidInputError(f"video {video.video_id} has no labelled frames to propagate from")
            for rec in propagate_video(video, params, spec, ds.camera):
                fh.write(json.dumps(rec) + "\n")
                n += 1
    manifest = RunManifest(
        command=args.argv,
        config={"split": args.split, "video": args.video},
        seeds={"data": ds.meta.get("seed"), "model": ds.model_seed},
        inputs={"data": str(_dataset_path(args.data, args.split)), "checkpoint": str(args.checkpoint)},
        outputs={"annotations": str(out)},
        timings={"total_s": time.perf_counter() - t0},
    )
    manifest.seal().write(out.with_name(out.stem + "_manifest.json"))
    print(f"wrote {n} frames to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(quick=args.quick, fault=args.inject_fault)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(("verification passed" if ok else "verification FAILED") + f" in {time.perf_counter() - t0:.1f}s")
    if args.out:
        out = _out_dir(args.out)
        report = out / "verify_report.json"
        report.write_text(json.dumps([asdict(r) for r in results], indent=2) + "\n")
        RunManifest(
            command=args.argv,
            config={"quick": args.quick, "inject_fault": args.inject_fault},
            seeds={},
            inputs={},
            outputs={"report": str(report)},
            timings={"total_s": time.perf_counter() - t0},
        ).seal().write(out / "manifest_verify.json")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "propagate": cmd_propagate, "verify": cmd_verify}


def main(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, OrderingError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PropalignError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
