"""``composerlab`` command-line entry point.

Exit codes: 0 success, 1 runtime failure (including bad flags or config),
2 missing prerequisite artifact.  Failures print one JSON object to stderr.

Artifacts live in ``--out``: ``backbone.cmpz`` (from ``pretrain``) and
``composer.cmpz`` (from ``train-composer``) feed the later stages.  Images
are written as plain-text PGM (``P2``, maxval 255, pixel = round((x+1)*127.5)).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, parse_config
from .errors import ComposerLabError, ConfigError, MissingPrerequisite
from .metrics import MetricsWriter, new_run_id, write_report

log = logging.getLogger("composerlab")

BACKBONE_FILE = "backbone.cmpz"
COMPOSER_FILE = "composer.cmpz"

EXIT_OK, EXIT_FAILURE, EXIT_MISSING = 0, 1, 2


# -- image export --------------------------------------------------------------------


def to_gray(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.int64)


def write_pgm(path, img: np.ndarray) -> None:
    """Plain PGM: header ``P2``, width height, maxval 255, then rows of values."""
    g = to_gray(img)
    h, w = g.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in g]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ComposerLabError(f"{path} is not a plain PGM file")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4 : 4 + w * h], dtype=np.int64).reshape(h, w)


# -- argument parsing --------------------------------------------------------------------


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON error path
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--config", default="default", help="config file path, or 'default'")
    p.add_argument("--out", default="runs", help="artifact and report directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, applied last (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="composerlab", description="Instance-specific low-rank composition on a toy denoiser.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("pretrain", help="train the backbone denoiser"))
    _common(sub.add_parser("train-composer", help="train a composer on the frozen backbone"))

    g = sub.add_parser("generate", help="sample images for one class")
    _common(g)
    g.add_argument("--class", dest="class_id", type=int, required=True)
    g.add_argument("--steps", type=int, default=None)
    g.add_argument("--samples", type=int, default=4)
    g.add_argument("--strategy", choices=("composer", "static"), default="composer")

    _common(sub.add_parser("evaluate", help="held-out loss and toy-Frechet, static vs composer"))

    b = sub.add_parser("bench", help="static / test-time training / composer comparison")
    _common(b)
    b.add_argument("--seeds", type=int, default=None, help="number of seeds (0..n-1)")

    a = sub.add_parser("ablate", help="one-axis ablation sweep")
    _common(a)
    a.add_argument("--axis", required=True)
    a.add_argument("--grid", default=None, help="comma-separated values (targets: e.g. QV,Q,QKVO)")
    a.add_argument("--seeds", type=int, default=1)

    q = sub.add_parser("quant-train", help="quantization-aware composer against the quantized backbone")
    _common(q)

    t = sub.add_parser("ttt", help="test-time training baseline for one class")
    _common(t)
    t.add_argument("--class", dest="class_id", type=int, required=True)
    t.add_argument("--steps", type=int, default=None, help="sampling steps")
    t.add_argument("--samples", type=int, default=4)

    e = sub.add_parser("export-data", help="write the synthetic dataset")
    _common(e)
    e.add_argument("--pgm", type=int, default=16, help="number of PGM previews")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


# -- commands -----------------------------------------------------------------------------


class Run:
    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.run_id = new_run_id()
        self.metrics = MetricsWriter(self.out / "metrics.jsonl", self.run_id)

    def report(self, name: str, body: dict) -> Path:
        path = self.out / name
        write_report(path, self.cfg, self.run_id, body)
        return path

    def data(self):
        from .experiments import make_data

        return make_data(self.cfg)

    def backbone(self):
        from .experiments import load_backbone

        return load_backbone(self.out / BACKBONE_FILE, self.cfg)

    def composer(self, backbone):
        from .experiments import load_composer

        return load_composer(self.out / COMPOSER_FILE, backbone)


def cmd_pretrain(run: Run) -> dict:
    from .experiments import pretrain, save_backbone

    model, hist = pretrain(run.cfg, run.data())
    for e, (tl, vl) in enumerate(zip(hist.train_loss, hist.val_loss)):
        run.metrics.log("pretrain", "train_loss", tl, epoch=e)
        run.metrics.log("pretrain", "val_loss", vl, epoch=e)
    save_backbone(run.out / BACKBONE_FILE, model)
    return {"report": str(run.report("pretrain.json", asdict(hist))), "checkpoint": str(run.out / BACKBONE_FILE)}


def cmd_train_composer(run: Run) -> dict:
    from .experiments import fit_composer, save_composer

    backbone = run.backbone()
    data = run.data()

    def on_epoch(e, tl, vl):
        run.metrics.log("composer", "train_loss", tl, epoch=e)
        run.metrics.log("composer", "val_loss", vl, epoch=e)

    composer, hist = fit_composer(run.cfg, backbone, data, on_epoch=on_epoch)
    run.metrics.log("composer", "val_loss_untrained", hist.val_loss[0])
    save_composer(run.out / COMPOSER_FILE, composer)
    return {"report": str(run.report("train_composer.json", asdict(hist))), "checkpoint": str(run.out / COMPOSER_FILE)}


def _write_images(run: Run, prefix: str, images: np.ndarray) -> list[str]:
    paths = []
    for i, img in enumerate(images):
        p = run.out / f"{prefix}_{i:03d}.pgm"
        write_pgm(p, img)
        paths.append(str(p))
    return paths


def cmd_generate(run: Run) -> dict:
    from .bench import Strategy, generate_class

    a = run.args
    backbone = run.backbone()
    steps = a.steps or run.cfg["bench.steps"]
    if a.strategy == "composer":
        strat = Strategy("composer", composer=run.composer(backbone))
    else:
        strat = Strategy("static")
    gen = generate_class(strat, backbone, a.class_id, a.samples, steps, run.cfg["seed"])
    prefix = f"gen_{a.strategy}_c{a.class_id}_s{steps}_seed{run.cfg['seed']}"
    files = _write_images(run, prefix, gen.images)
    body = {"files": files, "counters": asdict(gen.counters), "adapt_time": gen.adapt_time,
            "sample_time": gen.sample_time, "peak_bytes": gen.peak}
    return {"report": str(run.report(prefix + ".json", body)), "files": files}


def cmd_evaluate(run: Run) -> dict:
    from .experiments import evaluate_quality

    backbone = run.backbone()
    data = run.data()
    seed = run.cfg["seed"]
    body = {"static": asdict(evaluate_quality(backbone, None, run.cfg, data, seed))}
    if (run.out / COMPOSER_FILE).is_file():
        body["composer"] = asdict(evaluate_quality(backbone, run.composer(backbone), run.cfg, data, seed))
    for kind, q in body.items():
        for k, v in q.items():
            run.metrics.log("evaluate", f"{kind}.{k}", v)
    return {"report": str(run.report("evaluate.json", body)), **body}


def cmd_bench(run: Run) -> dict:
    from .bench import Strategy, run_comparison
    from .experiments import ttt_strategy

    cfg = run.cfg
    if run.args.seeds is not None:
        if run.args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        cfg = cfg.with_overrides([f"bench.seeds={','.join(str(s) for s in range(run.args.seeds))}"])
        run.cfg = cfg
    backbone = run.backbone()
    composer = run.composer(backbone)
    data = run.data()
    strategies = [Strategy("static"), ttt_strategy(cfg), Strategy("composer", composer=composer)]
    rep = run_comparison(strategies, backbone, data.train, data.heldout, cfg["bench.seeds"], cfg["bench.steps"],
                         cfg["bench.samples_per_class"], data.draws)
    csv_path = run.out / "bench.csv"
    rep.write_csv(str(csv_path))
    med = rep.medians()
    for kind, vals in med.items():
        for k, v in vals.items():
            run.metrics.log("bench", f"{kind}.{k}", v)
    body = {"csv": str(csv_path), "medians": med, "results": [asdict(r) for r in rep.results]}
    return {"report": str(run.report("bench.json", body)), "csv": str(csv_path)}


def _parse_grid(axis: str, text: Optional[str]):
    from .bench import ABLATION_GRIDS

    if text is None:
        return list(ABLATION_GRIDS.get(axis, ()))
    items = [s.strip() for s in text.split(",") if s.strip()]
    if axis == "targets":
        return [tuple(s.upper()) for s in items]
    if axis in ("r", "d_model"):
        try:
            return [int(s) for s in items]
        except ValueError:
            raise ConfigError(f"grid for {axis} must be integers: {text!r}") from None
    if axis == "alpha":
        try:
            return [float(s) for s in items]
        except ValueError:
            raise ConfigError(f"grid for alpha must be numbers: {text!r}") from None
    return items


def cmd_ablate(run: Run) -> dict:
    from .bench import validate_grid, write_rows
    from .experiments import run_ablation

    a = run.args
    grid = validate_grid(a.axis, _parse_grid(a.axis, a.grid))  # before loading anything
    if a.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    backbone = run.backbone()
    rows = run_ablation(a.axis, grid, run.cfg, backbone, run.data(), list(range(a.seeds)))
    csv_path = run.out / f"ablate_{a.axis}.csv"
    write_rows(str(csv_path), rows)
    for row in rows:
        run.metrics.log("ablate", f"{a.axis}={row['value']}.toy_frechet", row["toy_frechet"], step=row["seed"])
    return {"report": str(run.report(f"ablate_{a.axis}.json", {"rows": rows, "csv": str(csv_path)})),
            "csv": str(csv_path)}


def cmd_quant_train(run: Run) -> dict:
    from .experiments import relative_gain, run_quant

    backbone = run.backbone()
    res = run_quant(run.cfg, backbone, run.data(), run.cfg["quant.w_bits"], run.cfg["seed"])
    body = asdict(res)
    body["kd_relative_gain"] = relative_gain(res.kd_base, res.kd_composer)
    body["frechet_relative_gain"] = relative_gain(res.frechet_base, res.frechet_composer)
    for e, v in enumerate(res.val_kd):
        run.metrics.log("quant", "val_kd", v, epoch=e)
    return {"report": str(run.report(f"quant_w{res.w_bits}.json", body)), **body}


def cmd_ttt(run: Run) -> dict:
    from .bench import generate_class
    from .experiments import ttt_strategy

    a = run.args
    backbone = run.backbone()
    data = run.data()
    steps = a.steps or run.cfg["bench.steps"]
    gen = generate_class(ttt_strategy(run.cfg), backbone, a.class_id, a.samples, steps, run.cfg["seed"],
                         data.train, data.index)
    prefix = f"ttt_c{a.class_id}_s{steps}_seed{run.cfg['seed']}"
    files = _write_images(run, prefix, gen.images)
    body = {"files": files, "counters": asdict(gen.counters), "adapt_time": gen.adapt_time,
            "sample_time": gen.sample_time, "peak_bytes": gen.peak}
    return {"report": str(run.report(prefix + ".json", body)), "files": files}


def cmd_export_data(run: Run) -> dict:
    from .checkpoint import save_checkpoint

    data = run.data()
    files = {}
    for name, ds in (("train", data.train), ("heldout", data.heldout)):
        p = run.out / f"dataset_{name}.cmpz"
        save_checkpoint(p, {"images": ds.images, "labels": ds.labels.astype(np.float32)})
        files[name] = str(p)
    previews = _write_images(run, "data_train", data.train.images[: max(0, run.args.pgm)])
    body = {"files": files, "previews": previews}
    return {"report": str(run.report("export_data.json", body)), **files}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-composer": cmd_train_composer,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "quant-train": cmd_quant_train,
    "ttt": cmd_ttt,
    "export-data": cmd_export_data,
}


def _fail(code: int, exc: BaseException) -> int:
    err = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    hint = getattr(exc, "hint", "")
    if hint:
        err["hint"] = hint
    offset = getattr(exc, "offset", None)
    if offset is not None:
        err["offset"] = offset
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        run = Run(args, resolve_config(args))
        result = COMMANDS[args.command](run)
    except MissingPrerequisite as exc:
        return _fail(EXIT_MISSING, exc)
    except ComposerLabError as exc:
        return _fail(EXIT_FAILURE, exc)
    except Exception as exc:  # noqa: BLE001 - any crash becomes a machine-readable failure
        log.debug("unhandled error", exc_info=True)
        return _fail(EXIT_FAILURE, exc)
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
