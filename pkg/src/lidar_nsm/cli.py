"""``nsm`` command line: the whole workflow, one subcommand per step.

Exit codes:
  0  success
  1  internal error (bug)
  2  usage error (bad arguments)
  3  missing input file
  4  configuration error
  5  checkpoint error (corrupt, wrong task, mismatched config on resume)
  6  training diverged (non-finite loss or gradient)
  7  data error (bad manifest, labels, detections or scene)

On failure one line goes to stderr: ``nsm-error <category>: <message>``.
Environment: NSM_OUTPUT_DIR sets the default output root, NSM_THREADS the
torch thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import augmentation as aug
from . import bev
from . import detector as det
from . import evaluation as ev
from . import tensor_core as tc
from . import toy_world as tw
from . import training as tr
from .common import sha256_file
from .config import ConfigError, RunConfig
from .manifest import DatasetManifest, Entry
from .sensor_models import MappingKind, map_frames

log = logging.getLogger("nsm")

EXIT_CODES = {"internal": 1, "usage": 2, "missing-input": 3, "config": 4, "checkpoint": 5,
              "diverged": 6, "data": 7}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, FileNotFoundError):
        return "missing-input"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, tr.CheckpointError):
        return "checkpoint"
    if isinstance(exc, (tr.TrainingError, tc.NonFiniteError)):
        return "diverged"
    if isinstance(exc, (ev.EvalError, aug.AugmentError, tw.SceneError, tc.ShapeError, ValueError)):
        return "data"
    return "internal"


# ---------------------------------------------------------------------------
# provenance


class Run:
    """Output directory plus the run.json provenance record written at the end."""

    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.extra: dict = {}

    def input(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"no such input: {p}")
        if p.is_file():
            self.inputs[str(p.resolve())] = sha256_file(p)
        return p

    def manifest(self, path: str | Path) -> DatasetManifest:
        m = DatasetManifest.load(self.input(path))
        self.inputs[f"manifest:{Path(path).resolve()}"] = m.content_hash
        return m

    def output(self, path: str | Path) -> Path:
        p = Path(path)
        self.outputs.append(p)
        return p

    def finish(self) -> Path:
        outputs = {}
        for p in self.outputs:
            if p.is_file():
                outputs[str(p.resolve())] = sha256_file(p)
            elif p.is_dir():
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        outputs[str(f.resolve())] = sha256_file(f)
        record = {
            "tool": "lidar_nsm",
            "version": __version__,
            "command": self.args.command,
            "argv": self.args.argv,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash,
            "config": self.cfg.canonical(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
            **self.extra,
        }
        path = self.out / "run.json"
        path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
        return path


def _ckpt_out(run: Run, name: str, result: tr.TrainResult) -> Path:
    path = run.output(run.out / f"{name}.ckpt")
    tr.save_checkpoint(path, result.checkpoint)
    tr.write_loss_log(run.output(run.out / "loss_log.csv"), result.loss_log)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_project(args, run: Run) -> None:
    cfg = run.cfg.bev_config()
    files: list[Path] = []
    for src in args.inputs:
        p = run.input(src)
        files.extend(sorted(p.glob("*.bin")) if p.is_dir() else [p])
    if not files:
        raise CliError("missing-input", "no .bin point-cloud files found")
    fdir = run.output(run.out / "frames")
    fdir.mkdir(exist_ok=True)
    entries = []
    for f in files:
        run.input(f)
        grid = bev.project_to_bev(bev.PointCloud.from_bin(f), cfg)
        boxes: list[bev.OrientedBox] = []
        if args.labels:
            lp = Path(args.labels) / f"{f.stem}.txt"
            if lp.exists():
                run.input(lp)
                if args.label_format == "kitti":
                    boxes = [b for b in (bev.box3d_to_bev(b3, cfg) for b3 in bev.read_kitti_labels(lp)) if b]
                else:
                    boxes = bev.filter_labels(bev.read_labels(lp), cfg)
        bev.save_frame(fdir / f"{f.stem}.npy", grid)
        bev.write_labels(fdir / f"{f.stem}.txt", boxes)
        entries.append(Entry((fdir / f"{f.stem}.npy").resolve(), (fdir / f"{f.stem}.txt").resolve(), args.domain))
    DatasetManifest(entries, run.cfg.seed).save(run.output(run.out / "manifest.tsv"))


def cmd_toyworld(args, run: Run) -> None:
    c = run.cfg
    n = {k: getattr(args, k) if getattr(args, k) is not None else c.get("toyworld", k)
         for k in ("n_sim", "n_real", "n_test")}
    corpus = tw.gen_corpus(c.scene_spec(), c.corruption(), n["n_sim"], n["n_real"], n["n_test"],
                           c.seed, run.out, c.get("toyworld", "frames_per_drive"))
    for name in ("sim", "real", "test"):
        run.output(run.out / name)
        run.output(corpus.paths[name])


def cmd_train_nsm(args, run: Run) -> None:
    resume = run.input(args.resume) if args.resume else None
    if args.kind == "cyclegan":
        if not (args.sim and args.real):
            raise CliError("usage", "cyclegan needs --sim and --real")
        sim, real = run.manifest(args.sim), run.manifest(args.real)
        if args.limit:
            sim = DatasetManifest(sim.entries[:args.limit], sim.seed)
        res = tr.train_cyclegan(run.cfg.train_config("cyclegan"), sim, real,
                                checkpoint_path=run.out / "cyclegan.ckpt", resume=resume)
        _ckpt_out(run, "cyclegan", res)
        return
    if not (args.content and args.styles and args.encoder):
        raise CliError("usage", "nst needs --content, --styles and --encoder")
    content = run.manifest(args.content)
    if args.limit:
        content = DatasetManifest(content.entries[:args.limit], content.seed)
    bank = torch.from_numpy(np.load(run.input(args.styles), allow_pickle=False).astype(np.float32))
    extractor = tr.load_encoder(run.input(args.encoder))
    res = tr.train_nst(run.cfg.train_config("nst"), content, bank, extractor,
                       checkpoint_path=run.out / "nst.ckpt", resume=resume)
    _ckpt_out(run, "nst", res)


def cmd_pretrain_encoder(args, run: Run) -> None:
    sim, real = run.manifest(args.sim), run.manifest(args.real)
    resume = run.input(args.resume) if args.resume else None
    res = tr.pretrain_encoder(run.cfg.train_config("encoder"), sim, real,
                              checkpoint_path=run.out / "encoder.ckpt", resume=resume)
    _ckpt_out(run, "encoder", res)
    run.extra["accuracy"] = res.info.get("accuracy")


def cmd_stylebank(args, run: Run) -> None:
    real = run.manifest(args.real)
    n = args.n or run.cfg.get("nst", "n_styles")
    bank = aug.build_style_bank(real, n, run.cfg.seed)
    np.save(run.output(run.out / "stylebank.npy"), bank.frames.squeeze(1).numpy())
    (run.out / "stylebank.json").write_text(json.dumps(
        {"frame_ids": bank.frame_ids, "drive_groups": bank.drive_groups}, indent=1) + "\n")
    run.output(run.out / "stylebank.json")


def cmd_select_style(args, run: Run) -> None:
    model = tr.load_nst(run.input(args.nst))
    probe, pcfg = det.load_detector(run.input(args.probe_detector))
    ranking = aug.select_best_style(model.transformer, model.arch.n_styles, probe, pcfg,
                                    run.manifest(args.probe), run.cfg.get("eval", "iou_threshold"),
                                    run.cfg.get("eval", "conf_threshold"))
    (run.out / "style.json").write_text(json.dumps(ranking.to_json(), indent=1) + "\n")
    run.output(run.out / "style.json")
    print(ranking.best)


def cmd_generate(args, run: Run) -> None:
    kind = MappingKind.parse(args.mapping)
    src = run.manifest(args.input)
    ckpt = run.input(args.checkpoint) if args.checkpoint else None
    net = aug.load_mapping_network(kind, ckpt)
    fdir = run.output(run.out / "frames")
    fdir.mkdir(exist_ok=True)
    entries = []
    for i in range(0, len(src), 16):
        chunk = src.entries[i:i + 16]
        if kind.name == "identity":
            for e in chunk:
                shutil.copyfile(e.frame, fdir / e.frame.name)
        else:
            grids = [bev.load_frame(e.frame) for e in chunk]
            for e, g in zip(chunk, map_frames(kind, grids, net)):
                bev.save_frame(fdir / e.frame.name, g)
        for e in chunk:
            shutil.copyfile(e.label, fdir / e.label.name)
            entries.append(Entry((fdir / e.frame.name).resolve(), (fdir / e.label.name).resolve(),
                                 e.domain, str(kind)))
    DatasetManifest(entries, src.seed).save(run.output(run.out / "manifest.tsv"))


def cmd_augment(args, run: Run) -> None:
    kind = MappingKind.parse(args.mapping)
    real, sim = run.manifest(args.real), run.manifest(args.sim)
    ckpt = run.input(args.checkpoint) if args.checkpoint else None
    net = aug.load_mapping_network(kind, ckpt)
    spec = aug.MixSpec(args.ratio, kind, args.pure_sim, args.replacement or run.cfg.get("augmentation", "replacement"),
                       run.cfg.get("augmentation", "allow_overlap"))
    exclude = aug._nsm_training_ids(ckpt) if ckpt else set()
    man = aug.build_augmented_manifest(real, sim, spec, run.out, net, run.cfg.seed, exclude_ids=sorted(exclude))
    if spec.ratio == 0 and not spec.pure_sim:
        man.save(run.out / "manifest.tsv")
    run.output(run.out / "manifest.tsv")
    if (run.out / "frames").exists():
        run.output(run.out / "frames")


def cmd_train_detector(args, run: Run) -> None:
    train = run.manifest(args.train)
    resume = run.input(args.resume) if args.resume else None
    res = det.train_detector(run.cfg.train_config("detector"), run.cfg.detector_config(), train,
                             checkpoint_path=run.out / "detector.ckpt", resume=resume)
    _ckpt_out(run, "detector", res)


def cmd_eval(args, run: Run) -> None:
    test = run.manifest(args.test)
    iou = args.iou if args.iou is not None else run.cfg.get("eval", "iou_threshold")
    if args.detections:
        dets_path = run.input(args.detections)
    else:
        if not args.detector:
            raise CliError("usage", "eval needs --detector or --detections")
        net, dcfg = det.load_detector(run.input(args.detector))
        frames = tr.load_grids(test)
        dets = det.detect(net, dcfg, frames, conf_threshold=run.cfg.get("eval", "conf_threshold"))
        dets_path = run.output(run.out / "detections.txt")
        det.write_detections(dets_path, test.frame_ids(), dets)
    report = ev.map_over_manifest(dets_path, test, iou)
    for p in report.write(run.out):
        run.output(p)
    print(f"mAP {100 * report.mAP:.2f}%")


def cmd_matrix(args, run: Run) -> None:
    c = run.cfg
    for p in (args.real, args.sim, args.test):
        run.manifest(p)
    ckpts = {}
    for name in ("cyclegan", "nst"):
        path = getattr(args, name)
        if path:
            ckpts[name] = str(run.input(path))
    mappings = tuple(args.mappings.split(",")) if args.mappings else c.get("augmentation", "mappings")
    ratios = tuple(float(r) for r in args.ratios.split(",")) if args.ratios else c.get("augmentation", "ratios")
    mc = aug.MatrixConfig(
        real=Path(args.real), sim=Path(args.sim), test=Path(args.test), out_dir=run.out,
        ratios=ratios, mappings=mappings, table_ratio=c.get("augmentation", "table_ratio"),
        pure_sim_ratio=c.get("augmentation", "pure_sim_ratio"), checkpoints=ckpts,
        train=c.train_config("detector"), detector=c.detector_config(),
        iou_threshold=c.get("eval", "iou_threshold"), conf_threshold=c.get("eval", "conf_threshold"),
        allow_overlap=c.get("augmentation", "allow_overlap"), replacement=c.get("augmentation", "replacement"))
    results = aug.run_experiment_matrix(mc)
    for name in ("table1.csv", "curve.csv", "curve.svg", "failures.json", "cells"):
        run.output(run.out / name)
    run.extra["failed_cells"] = sorted(t for t, r in results.items() if r.error)
    print((run.out / "table1.csv").read_text(), end="")


def cmd_render(args, run: Run) -> None:
    man = run.manifest(args.manifest)
    dets: dict[str, list[bev.OrientedBox]] = {}
    if args.detections:
        for fid, b in det.read_detections(run.input(args.detections)):
            dets.setdefault(fid, []).append(b)
    pdir = run.output(run.out / "panels")
    pdir.mkdir(exist_ok=True)
    entries = man.entries[:args.limit] if args.limit else man.entries
    for e in entries:
        grid = bev.load_frame(e.frame)
        boxes = dets.get(e.frame_id) if args.detections else bev.read_labels(e.label)
        (pdir / f"{e.frame_id}.{args.format}").write_bytes(bev.render_grid(grid, boxes or [], args.format))


COMMANDS = {
    "project": cmd_project, "toyworld": cmd_toyworld, "train-nsm": cmd_train_nsm,
    "pretrain-encoder": cmd_pretrain_encoder, "stylebank": cmd_stylebank, "select-style": cmd_select_style,
    "generate": cmd_generate, "augment": cmd_augment, "train-detector": cmd_train_detector,
    "eval": cmd_eval, "matrix": cmd_matrix, "render": cmd_render,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nsm", description="LiDAR neural sensor models and sim2real augmentation.",
                epilog=__doc__.split("\n\n", 1)[1], formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"lidar_nsm {__version__}")
    p.add_argument("-c", "--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--preset", choices=("desk", "paper"), help="override [run] preset")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("-o", "--out", help="output directory (default $NSM_OUTPUT_DIR/<command>)")
        return sp

    sp = add("project", "point clouds (.bin) to BEV frames + labels")
    sp.add_argument("inputs", nargs="+", help=".bin files or directories")
    sp.add_argument("--labels", help="directory of per-frame label files (same stem)")
    sp.add_argument("--label-format", choices=("kitti", "native"), default="kitti")
    sp.add_argument("--domain", choices=("real", "sim"), default="real")

    sp = add("toyworld", "generate sim/real/test toy corpora")
    sp.add_argument("--n-sim", type=int)
    sp.add_argument("--n-real", type=int)
    sp.add_argument("--n-test", type=int)

    sp = add("train-nsm", "train a sensor model")
    sp.add_argument("--kind", choices=("cyclegan", "nst"), required=True)
    sp.add_argument("--sim")
    sp.add_argument("--real")
    sp.add_argument("--content", help="nst: content (sim) manifest")
    sp.add_argument("--styles", help="nst: style bank .npy")
    sp.add_argument("--encoder", help="nst: pre-trained encoder checkpoint")
    sp.add_argument("--limit", type=int, help="use only the first N sim/content frames")
    sp.add_argument("--resume")

    sp = add("pretrain-encoder", "sim-vs-real classifier pre-training of the NST extractor")
    sp.add_argument("--sim", required=True)
    sp.add_argument("--real", required=True)
    sp.add_argument("--resume")

    sp = add("stylebank", "cluster real drives and pick one style frame per cluster")
    sp.add_argument("--real", required=True)
    sp.add_argument("-n", type=int, help="number of styles (default [nst] n_styles)")

    sp = add("select-style", "rank NST styles with a real-only probe detector")
    sp.add_argument("--nst", required=True)
    sp.add_argument("--probe-detector", required=True)
    sp.add_argument("--probe", required=True, help="manifest of labelled sim frames")

    sp = add("generate", "materialize mapped frames")
    sp.add_argument("--mapping", required=True, help="identity | cyclegan | nst:K")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint")

    sp = add("augment", "build a mixed real + mapped-sim manifest")
    sp.add_argument("--real", required=True)
    sp.add_argument("--sim", required=True)
    sp.add_argument("--ratio", type=float, required=True)
    sp.add_argument("--mapping", default="identity")
    sp.add_argument("--checkpoint")
    sp.add_argument("--pure-sim", action="store_true")
    sp.add_argument("--replacement", action="store_true")

    sp = add("train-detector", "train the oriented BEV detector")
    sp.add_argument("--train", required=True)
    sp.add_argument("--resume")

    sp = add("eval", "mAP report for a detector or a detections file")
    sp.add_argument("--test", required=True)
    sp.add_argument("--detector")
    sp.add_argument("--detections")
    sp.add_argument("--iou", type=float)

    sp = add("matrix", "full experiment grid: table1.csv and curve.csv")
    sp.add_argument("--real", required=True)
    sp.add_argument("--sim", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--cyclegan")
    sp.add_argument("--nst")
    sp.add_argument("--mappings", help="comma list, e.g. identity,cyclegan,nst:0")
    sp.add_argument("--ratios", help="comma list, e.g. 0,1,2")

    sp = add("render", "PNG/PGM panels with box overlays")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--detections")
    sp.add_argument("--format", choices=("png", "pgm"), default="png")
    sp.add_argument("--limit", type=int, default=8)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = os.environ.get("NSM_THREADS")
        if threads:
            try:
                torch.set_num_threads(int(threads))
            except ValueError:
                raise ConfigError(f"NSM_THREADS must be an integer, got {threads!r}") from None
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.preset is not None:
            cfg.set("run", "preset", args.preset)
        cfg.validate()
        if args.out is None:
            args.out = str(Path(os.environ.get("NSM_OUTPUT_DIR", "runs")) / args.command)
        run = Run(args, cfg)
        COMMANDS[args.command](args, run)
        run.finish()
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except BaseException as exc:  # noqa: BLE001 - every failure becomes one stderr line
        if isinstance(exc, KeyboardInterrupt):
            raise
        cat = _category(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"nsm-error {cat}: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
