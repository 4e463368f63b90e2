"""Command-line entry point.

Heavy imports happen inside ``main`` so COAMD_THREADS can cap BLAS threads
before numpy loads.  Exit codes: 0 success, 1 runtime failure, 2 usage error
or malformed config.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

COMMANDS = ("gen-data", "train-ae", "train-mar", "train-gen", "generate", "edit", "recognize",
            "retrieve", "evaluate", "export-anim", "reproduce")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coamd", description="Text-to-motion generation with recognizer guidance.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def cmd(name, help_, *flags):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="key=value run config (defaults if omitted)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", type=Path, required=True, help="output directory")
        for f in flags:
            f(s)
        return s

    data = lambda s: s.add_argument("--data", type=Path, required=True, help="dataset directory")
    ckpt = lambda s: s.add_argument("--ckpt", type=Path, required=True,
                                    help="directory holding ae.ckpt / mar.ckpt / gen.ckpt")
    text = lambda s: s.add_argument("--text", required=True)
    motion = lambda s: s.add_argument("--motion", type=Path, required=True, help="COAMD-MOTION file")

    def guidance(s):
        s.add_argument("--guidance", choices=("on", "off"), default="on")
        s.add_argument("--gamma", type=float, help="guidance step size (overrides guide.gamma)")

    cmd("gen-data", "generate the synthetic corpus",
        lambda s: s.add_argument("--num", type=int, help="number of samples (overrides data.num)"))
    cmd("train-ae", "train the motion autoencoder", data)
    cmd("train-mar", "train the multi-modal recognizer", data)
    cmd("train-gen", "train the masked generator on frozen AE latents", data, ckpt)
    cmd("generate", "generate one motion from text", ckpt, text, guidance,
        lambda s: s.add_argument("--length", type=int, default=64, help="frames"))
    cmd("edit", "regenerate part of a motion", ckpt, text, motion, guidance,
        lambda s: s.add_argument("--mode", choices=("inpaint", "outpaint", "prefix", "suffix"), required=True))
    cmd("recognize", "rank action classes for a motion", ckpt, motion,
        lambda s: s.add_argument("--top", type=int, default=5))
    cmd("retrieve", "rank dataset motions for a text query", ckpt, data, text,
        lambda s: s.add_argument("--k", type=int, default=5))
    cmd("evaluate", "full metric suite, report and plots", ckpt, data)
    cmd("export-anim", "render a motion file as a frame-strip SVG", motion)
    cmd("reproduce", "gen-data, three training stages and evaluate in one run")
    return p


def _fail(msg: str, code: int) -> int:
    print(f"coamd: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("COAMD_THREADS", "1")
    for var in THREAD_VARS:
        os.environ[var] = threads

    from .diffcore.checkpoint import CheckpointError
    from .pipeline import ConfigError, StageError

    try:
        _run(args)
    except ConfigError as e:
        return _fail(str(e), 2)
    except CheckpointError as e:
        msg = str(e)
        return _fail(msg if msg.startswith("incompatible checkpoint") else f"incompatible checkpoint: {msg}", 1)
    except StageError as e:
        return _fail(str(e), 1)
    except FileNotFoundError as e:
        msg = str(e)
        return _fail(msg if msg.startswith("missing") else f"missing file: {msg}", 1)
    except (ValueError, ArithmeticError, OSError) as e:
        return _fail(f"error: {type(e).__name__}: {e}", 1)
    return 0


def _run(args):
    from . import pipeline as P

    overrides = {}
    if getattr(args, "num", None) is not None:
        overrides["data.num"] = args.num
    if getattr(args, "gamma", None) is not None:
        overrides["guide.gamma"] = args.gamma
    cfg = P.RunConfig.load(args.config, overrides)
    out = Path(args.out)
    if args.command == "reproduce":
        res = P.pipeline_reproduce(cfg, args.seed, out)
        print(res.text, end="")
        return
    out.mkdir(parents=True, exist_ok=True)
    log = P.RunLog(out / f"{args.command}.log", cfg, args.seed, args.command)
    HANDLERS[args.command](args, cfg, out, log)
    log.event("done")


# -- handlers ----------------------------------------------------------
def _gen_data(args, cfg, out, log):
    from . import pipeline as P

    P.stage_gen_data(cfg, args.seed, out, log)


def _train_ae(args, cfg, out, log):
    from . import pipeline as P

    P.stage_train_ae(cfg, args.seed, args.data, out / P.CKPT_NAMES["ae"], log)


def _train_mar(args, cfg, out, log):
    from . import pipeline as P

    P.stage_train_mar(cfg, args.seed, args.data, out / P.CKPT_NAMES["mar"], log)


def _train_gen(args, cfg, out, log):
    from . import pipeline as P

    m = P.load_models(args.ckpt, ("ae", "mar"))
    P.stage_train_gen(cfg, args.seed, args.data, m["ae"], m["mar"], out / P.CKPT_NAMES["gen"], log)


def _guidance(args, cfg):
    return cfg.guidance() if args.guidance == "on" else None


def _generate(args, cfg, out, log):
    from . import pipeline as P
    from .diffcore import Rng
    from .motion import write_motion
    from .recognizer import embed_texts

    if args.length < 1:
        raise ValueError(f"--length must be >= 1, got {args.length}")
    m = P.load_models(args.ckpt)
    c = embed_texts(m["mar"], [args.text])
    x, _, S = P.sample_motions(m, c, args.length, Rng(args.seed), _guidance(args, cfg))
    write_motion(out / "motion.txt", x[0])
    log.event("artifact", f"motion=motion.txt frames={args.length} guidance={args.guidance} score={S[0]:.6f}")


def _edit(args, cfg, out, log):
    import numpy as np

    from . import diffcore as dc
    from . import pipeline as P
    from .batching import stack_streams
    from .diffcore import Rng
    from .generator import edit
    from .motion import read_motion, write_motion
    from .recognizer import embed_texts

    m = P.load_models(args.ckpt)
    ae = m["ae"]
    x = read_motion(args.motion)
    L = len(x)
    with dc.no_grad():
        z = ae.encode(stack_streams([x], ae.topology)).data
    c = embed_texts(m["mar"], [args.text]).astype(np.float32)
    gcfg = _guidance(args, cfg)
    guide = P.make_guide(ae, m["mar"], m["gen"], c, L, gcfg) if gcfg else None
    ze = edit(m["gen"], z, c, args.mode, Rng(args.seed), guide=guide)
    write_motion(out / "edited.txt", P.decode_latents(ae, ze, L)[0])
    log.event("artifact", f"motion=edited.txt mode={args.mode} frames={L} guidance={args.guidance}")


def _recognize(args, cfg, out, log):
    from . import diffcore as dc
    from . import pipeline as P
    from .batching import stack_streams
    from .motion import read_motion
    from .recognizer import classify_motion

    path = Path(args.ckpt) / P.CKPT_NAMES["mar"]
    mar = P.load_models(args.ckpt, ("mar",))["mar"]
    table = P.class_table_of(path)
    with dc.no_grad():
        order, scores = classify_motion(mar, stack_streams([read_motion(args.motion)], mar.topology), table)
    lines = [f"{r + 1}\t{cid}\t{table.classes[cid].canonical}\t{scores[0, cid]:.6f}\n"
             for r, cid in enumerate(order[0][: args.top])]
    (out / "recognition.tsv").write_text("".join(lines), encoding="utf-8", newline="\n")
    log.event("artifact", f"recognition=recognition.tsv top1={table.classes[order[0][0]].canonical!r}")


def _retrieve(args, cfg, out, log):
    import numpy as np

    from . import pipeline as P
    from .dataset import read_dataset
    from .recognizer import embed_samples, embed_texts

    mar = P.load_models(args.ckpt, ("mar",))["mar"]
    ds = read_dataset(args.data)
    e = embed_samples(mar, [s.motion for s in ds.samples])
    q = embed_texts(mar, [args.text])[0]
    scores = e @ q
    order = np.argsort(-scores, kind="stable")[: args.k]
    lines = [f"{r + 1}\t{ds.samples[i].id}\t{scores[i]:.6f}\t{ds.samples[i].caption}\n" for r, i in enumerate(order)]
    (out / "retrieval.tsv").write_text("".join(lines), encoding="utf-8", newline="\n")
    log.event("artifact", f"retrieval=retrieval.tsv k={args.k}")


def _evaluate(args, cfg, out, log):
    from . import pipeline as P

    res = P.evaluate(cfg, args.seed, args.data, P.load_models(args.ckpt), out, log)
    print(res.text, end="")


def _export_anim(args, cfg, out, log):
    from .metrics import plot_frame_strip
    from .motion import HUMANOID9, read_motion

    x = read_motion(args.motion)
    if x.shape[1] != HUMANOID9.num_joints:
        raise ValueError(f"export-anim: expected {HUMANOID9.num_joints} joints, got {x.shape[1]}")
    path = out / f"{Path(args.motion).stem}.svg"
    plot_frame_strip(x, HUMANOID9, path)
    log.event("artifact", f"svg={path.name}")


HANDLERS = {
    "gen-data": _gen_data,
    "train-ae": _train_ae,
    "train-mar": _train_mar,
    "train-gen": _train_gen,
    "generate": _generate,
    "edit": _edit,
    "recognize": _recognize,
    "retrieve": _retrieve,
    "evaluate": _evaluate,
    "export-anim": _export_anim,
}


if __name__ == "__main__":
    sys.exit(main())
