"""Run configuration, run logs and the staged data -> train -> evaluate pipeline.

Every stage is a pure function of (config, seed, input artifacts); logs carry
logical event indices rather than wall-clock times so reruns are
byte-identical.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .autoencoder import AEConfig, MotionAutoencoder, latent_length, reconstruction_l1, train_ae
from .batching import stack_streams
from .dataset import ClassTable, Dataset, GeneratorConfig, generate_synthetic, read_dataset, write_dataset
from .diffcore import Rng, Tensor
from .generator import EDIT_MODES, GenConfig, MaskedGenerator, edit, edit_fixed_mask, generate, train_generator
from .guidance import Guide, GuidanceConfig
from .metrics import (
    REPORT_HEADER,
    MetricReport,
    clip_style_score,
    fid,
    m_modality,
    mm_dist,
    plot_frame_strip,
    plot_metric_bars,
    r_precision,
    recognition_accuracy,
    sign_test,
    summarize,
)
from .motion import write_motion
from .recognizer import (
    Recognizer,
    RecognizerConfig,
    batched_retrieval,
    classify,
    embed_samples,
    embed_texts,
    train_mar,
)

VERSION = "0.1.0"
CKPT_NAMES = {"ae": "ae.ckpt", "mar": "mar.ckpt", "gen": "gen.ckpt"}

DEFAULTS = {
    "data.num": 2000,
    "data.holdout": 0.2,
    "data.num_classes": 32,
    "ae.latent_dim": 16,
    "ae.width": 64,
    "ae.epochs": 30,
    "ae.batch_size": 32,
    "ae.lr": 2e-4,
    "mar.dim": 64,
    "mar.width": 64,
    "mar.layers": 1,
    "mar.heads": 4,
    "mar.tau": 0.1,
    "mar.symmetric": False,
    "mar.streams": ("joints", "bones", "motion"),
    "mar.epochs": 40,
    "mar.batch_size": 32,
    "mar.lr": 2e-4,
    "gen.layers": 2,
    "gen.width": 64,
    "gen.heads": 4,
    "gen.head_width": 128,
    "gen.head_blocks": 3,
    "gen.epochs": 60,
    "gen.batch_size": 32,
    "gen.lr": 2e-4,
    "gen.ode_steps": 25,
    "gen.ar_steps": 8,
    "guide.gamma": 1.0,
    "guide.weights": (0.25, 0.25, 0.25, 0.25),
    "guide.placement": "per-ar-step",
    "eval.prompts": 200,
    "eval.runs": 5,
    "eval.mm_prompts": 16,
    "eval.mm_repeats": 10,
    "eval.edit_prompts": 32,
    "eval.save_motions": 4,
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage, self.cause = stage, cause


# -- configuration -----------------------------------------------------
def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = tuple(p.strip() for p in raw.split(",") if p.strip())
            return tuple(float(p) for p in parts) if isinstance(default[0], float) else parts
        return raw
    except ValueError:
        raise ConfigError(f"malformed config: bad value for {key}: {raw!r}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    sha256: str = hashlib.sha256(b"").hexdigest()

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: bytes | str, overrides: dict | None = None) -> "RunConfig":
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        try:
            body = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ConfigError("malformed config: not UTF-8") from None
        values = dict(DEFAULTS)
        for n, line in enumerate(body.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config: line {n} is not key=value: {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"malformed config: unknown key {key!r} on line {n}")
            values[key] = _coerce(key, val)
        for key, val in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"malformed config: unknown key {key!r}")
            values[key] = _coerce(key, val) if isinstance(val, str) else val
        cfg = cls(values, hashlib.sha256(raw).hexdigest())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        if path is None:
            return cls.parse(b"", overrides)
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"malformed config: cannot read {p}")
        return cls.parse(p.read_bytes(), overrides)

    def validate(self):
        v = self.values
        if v["data.num"] < 1 or not 0 < v["data.holdout"] < 1:
            raise ConfigError("malformed config: data.num must be >= 1 and 0 < data.holdout < 1")
        for k in ("ae.epochs", "mar.epochs", "gen.epochs"):
            if v[k] < 0:
                raise ConfigError(f"malformed config: {k} must be >= 0")
        if len(v["guide.weights"]) != 4:
            raise ConfigError("malformed config: guide.weights needs four values")
        try:
            self.guidance().validate()
            self.gen_config().validate()
            self.ae_config().validate()
            self.mar_config().validate()
        except ValueError as e:
            raise ConfigError(f"malformed config: {e}") from None

    def echo(self) -> list:
        return [f"{k}={_fmt(v)}" for k, v in sorted(self.values.items())]

    # -- module configs ------------------------------------------------
    def data_config(self) -> GeneratorConfig:
        return GeneratorConfig(num_classes=self["data.num_classes"])

    def ae_config(self) -> AEConfig:
        return AEConfig(latent_dim=self["ae.latent_dim"], width=self["ae.width"],
                        batch_size=self["ae.batch_size"], lr=self["ae.lr"])

    def mar_config(self) -> RecognizerConfig:
        return RecognizerConfig(dim=self["mar.dim"], width=self["mar.width"], layers=self["mar.layers"],
                                heads=self["mar.heads"], tau=self["mar.tau"], symmetric=self["mar.symmetric"],
                                streams=tuple(self["mar.streams"]), batch_size=self["mar.batch_size"],
                                lr=self["mar.lr"])

    def gen_config(self) -> GenConfig:
        return GenConfig(layers=self["gen.layers"], width=self["gen.width"], heads=self["gen.heads"],
                         head_width=self["gen.head_width"], head_blocks=self["gen.head_blocks"],
                         batch_size=self["gen.batch_size"], lr=self["gen.lr"],
                         ode_steps=self["gen.ode_steps"], ar_steps=self["gen.ar_steps"])

    def guidance(self, **kw) -> GuidanceConfig:
        base = dict(gamma=self["guide.gamma"], weights=tuple(self["guide.weights"]),
                    placement=self["guide.placement"])
        return GuidanceConfig(**{**base, **kw})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def stage_seed(seed: int, stage: str) -> int:
    """Independent per-stage seeds derived from the run seed."""
    order = ("data", "ae", "mar", "gen", "eval")
    return int(Rng(seed).spawn(order.index(stage)).integers(0, 2 ** 31 - 1))


# -- run log -----------------------------------------------------------
class RunLog:
    """Append-only event log; the first line records version, seed and config hash."""

    def __init__(self, path, cfg: RunConfig, seed: int, command: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.n = 0
        self.path.write_text(f"coamd version={VERSION} seed={seed} config_sha256={cfg.sha256} command={command}\n",
                             encoding="utf-8", newline="\n")
        for line in cfg.echo():
            self.event("config", line)

    def event(self, kind: str, msg: str = ""):
        self.n += 1
        with self.path.open("a", encoding="utf-8", newline="\n") as f:
            f.write(f"event={self.n} kind={kind} {msg}".rstrip() + "\n")

    def epoch_hook(self, stage: str):
        return lambda epoch, loss: self.event("loss", f"stage={stage} epoch={epoch} loss={loss:.6f}")


# -- stages ------------------------------------------------------------
def stage_gen_data(cfg: RunConfig, seed: int, out, log: RunLog | None = None, num: int | None = None) -> Dataset:
    ds = generate_synthetic(cfg.data_config(), num or cfg["data.num"], stage_seed(seed, "data"))
    write_dataset(ds, out)
    if log:
        log.event("artifact", f"dataset samples={len(ds)} classes={len(ds.class_table)}")
    return ds


def _train_split(cfg: RunConfig, data) -> tuple:
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    return ds.split(cfg["data.holdout"])


def stage_train_ae(cfg: RunConfig, seed: int, data, out_path, log: RunLog | None = None) -> MotionAutoencoder:
    train, held = _train_split(cfg, data)
    model, tlog = train_ae(train, cfg.ae_config(), cfg["ae.epochs"], stage_seed(seed, "ae"),
                           on_epoch=log.epoch_hook("ae") if log else None)
    model.save(out_path)
    if log:
        log.event("artifact", f"ae={Path(out_path).name} heldout_l1={reconstruction_l1(model, held.samples):.6f}")
    return model


def stage_train_mar(cfg: RunConfig, seed: int, data, out_path, log: RunLog | None = None) -> Recognizer:
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    train, held = ds.split(cfg["data.holdout"])
    model, tlog = train_mar(train, ds.class_table, cfg.mar_config(), cfg["mar.epochs"], stage_seed(seed, "mar"),
                            on_epoch=log.epoch_hook("mar") if log else None)
    model.save(out_path, {"classes": ds.class_table.to_text()})
    if log:
        log.event("artifact", f"mar={Path(out_path).name}")
    return model


def stage_train_gen(cfg: RunConfig, seed: int, data, ae: MotionAutoencoder, mar: Recognizer, out_path,
                    log: RunLog | None = None) -> MaskedGenerator:
    train, _ = _train_split(cfg, data)
    text = embed_texts(mar, [s.caption for s in train.samples])
    model, tlog = train_generator(train, ae, cfg.gen_config(), cfg["gen.epochs"], stage_seed(seed, "gen"), text,
                                  on_epoch=log.epoch_hook("gen") if log else None)
    model.save(out_path)
    if log:
        log.event("artifact", f"gen={Path(out_path).name} latent_scale={model.latent_scale!r}")
    return model


# -- checkpoints -------------------------------------------------------
def load_models(ckpt_dir, need=("ae", "mar", "gen")) -> dict:
    """Load the named checkpoints from a directory; missing files raise FileNotFoundError."""
    loaders = {"ae": MotionAutoencoder.load, "mar": Recognizer.load, "gen": MaskedGenerator.load}
    models = {k: loaders[k](Path(ckpt_dir) / CKPT_NAMES[k]) for k in need}
    gen = models.get("gen")
    if gen is not None and "ae" in models and gen.config.latent_dim != models["ae"].config.latent_dim:
        raise dc.checkpoint.CheckpointError(
            f"incompatible checkpoint: generator latent_dim={gen.config.latent_dim} "
            f"vs autoencoder latent_dim={models['ae'].config.latent_dim}")
    if gen is not None and "mar" in models and gen.config.cond_dim != models["mar"].config.dim:
        raise dc.checkpoint.CheckpointError(
            f"incompatible checkpoint: generator cond_dim={gen.config.cond_dim} "
            f"vs recognizer dim={models['mar'].config.dim}")
    return models


def class_table_of(mar_path) -> ClassTable:
    _, meta = dc.checkpoint.load(mar_path, expect_module="mar")
    if "classes" not in meta:
        raise dc.checkpoint.CheckpointError(f"incompatible checkpoint {mar_path}: no class table")
    return ClassTable.from_text(meta["classes"])


# -- sampling helpers --------------------------------------------------
def make_guide(ae, mar, gen, c, length: int, gcfg: GuidanceConfig) -> Guide:
    """Guide in the generator's scaled latent space, scoring decoded motion of ``length`` frames."""
    scale = np.float32(gen.latent_scale)
    return Guide(lambda z: ae.decode(z * scale, length), mar, ae.topology, c, gcfg)


def decode_latents(ae, z, length: int) -> np.ndarray:
    with dc.no_grad():
        return ae.decode(Tensor(np.asarray(z, np.float32)), length).data


def sample_motions(models: dict, c, length: int, rng: Rng, gcfg: GuidanceConfig | None = None,
                   ar_steps: int | None = None) -> tuple:
    """Generate and decode a batch: (motions (B, L, J, 3), latents, alignment scores)."""
    ae, mar, gen = models["ae"], models["mar"], models["gen"]
    c = np.atleast_2d(np.asarray(c, np.float32))
    guide = make_guide(ae, mar, gen, c, length, gcfg) if gcfg is not None else None
    z = generate(gen, c, latent_length(length), rng, guide=guide, ar_steps=ar_steps)
    scorer = make_guide(ae, mar, gen, c, length, GuidanceConfig())
    S = scorer.score(z / np.float32(gen.latent_scale))
    return decode_latents(ae, z, length), z, S


def _length_groups(samples) -> list:
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(len(s.motion), []).append(i)
    return sorted(groups.items())


# -- evaluation --------------------------------------------------------
@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"check={self.name} pass={'true' if self.passed else 'false'} {self.detail}"


@dataclass
class EvalResult:
    reports: list
    checks: list
    text: str


def _generate_rows(models, prompts, c, rng: Rng, rows: dict) -> dict:
    """Run every configuration in ``rows`` over all prompts with shared noise."""
    out = {}
    for name, (gcfg, K) in rows.items():
        motions, scores = [None] * len(prompts), np.zeros(len(prompts))
        for g, (L, idx) in enumerate(_length_groups(prompts)):
            x, _, S = sample_motions(models, c[idx], L, rng.spawn(g), gcfg, K)
            for j, i in enumerate(idx):
                motions[i] = x[j]
            scores[idx] = S
        out[name] = (motions, scores)
    return out


def evaluate(cfg: RunConfig, seed: int, data, models: dict, out_dir, log: RunLog | None = None) -> EvalResult:
    """Full metric suite for unguided, guided and single-shot guided generation, plus checks."""
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    _, held = ds.split(cfg["data.holdout"])
    ae, mar = models["ae"], models["mar"]
    rng = Rng(stage_seed(seed, "eval"))
    runs = cfg["eval.runs"]
    reports, checks = [], []

    def note(msg):
        if log:
            log.event("eval", msg)

    # recognizer on real held-out data
    real_m = embed_samples(mar, [s.motion for s in held.samples])
    real_t = embed_texts(mar, [s.caption for s in held.samples])
    ret = batched_retrieval(real_m, real_t, k=1, batch=32)
    reports += [MetricReport("mar.retrieval_r1_t2m", ret.t2m), MetricReport("mar.retrieval_r1_m2t", ret.m2t)]
    canon = [c.canonical for c in ds.class_table.classes]
    order, _ = classify(real_m, embed_texts(mar, canon, "class-label"))
    labelled = [i for i, s in enumerate(held.samples) if s.label_ids]
    acc = recognition_accuracy(order[labelled, 0], [held.samples[i].label_ids for i in labelled], ds.bands)
    reports += [MetricReport(f"mar.recognition_top1_{k}", v) for k, v in acc.items()]
    checks.append(Check("c4a_retrieval_r1", min(ret.t2m, ret.m2t) >= 0.5,
                        f"t2m={ret.t2m:.4f} m2t={ret.m2t:.4f} threshold=0.5"))
    note(f"retrieval t2m={ret.t2m:.6f} m2t={ret.m2t:.6f}")

    # generation rows
    prompts = held.samples[: cfg["eval.prompts"]]
    c = embed_texts(mar, [s.caption for s in prompts]).astype(np.float32)
    gcfg = cfg.guidance()
    rows = {"unguided": (None, None), "guided": (gcfg, None), "single_shot": (gcfg, 1)}
    gen_rows = _generate_rows(models, prompts, c, rng.spawn(0), rows)
    bars = {}
    for name, (motions, S) in gen_rows.items():
        e = embed_samples(mar, motions)
        r = r_precision(e, c, rng.spawn(1), runs=runs) if len(e) >= 32 else {}
        row = [MetricReport(f"{name}.fid", fid(real_m, e)),
               MetricReport(f"{name}.mm_dist", mm_dist(e, c)),
               MetricReport(f"{name}.clip_score", clip_style_score(e, c)),
               summarize(f"{name}.mean_S", S)]
        for k, rep in r.items():
            row.append(MetricReport(f"{name}.{rep.name}", rep.value, rep.ci, rep.runs))
        reports += row
        bars[name] = {m.name.split(".", 1)[1]: m.value for m in row if "mm_dist" not in m.name}
        for j in range(min(cfg["eval.save_motions"], len(motions))):
            write_motion(out / "motions" / f"{prompts[j].id}_{name}.txt", motions[j])
        note(f"row={name} " + " ".join(f"{m.name}={m.value:.6f}" for m in row))

    S_u, S_g, S_1 = (gen_rows[k][1] for k in ("unguided", "guided", "single_shot"))
    w, l, p = sign_test(S_g, S_u)
    enough = len(prompts) >= 200
    checks.append(Check("c4b_guided_beats_unguided_S", enough and p < 0.05 and S_g.mean() > S_u.mean(),
                        f"mean_guided={S_g.mean():.6f} mean_unguided={S_u.mean():.6f} wins={w} losses={l} "
                        f"p={p:.3g} prompts={len(prompts)}"))
    by = {m.name: m for m in reports}
    if "guided.r_precision_top1" in by:
        g1, u1 = by["guided.r_precision_top1"].value, by["unguided.r_precision_top1"].value
        checks.append(Check("c4c_guided_rprec_top1", g1 >= u1, f"guided={g1:.4f} unguided={u1:.4f}"))
    checks.append(Check("c4d_single_shot_not_better", S_1.mean() <= S_g.mean(),
                        f"single_shot={S_1.mean():.6f} iterative={S_g.mean():.6f}"))

    # multimodality
    mm_prompts = held.samples[: cfg["eval.mm_prompts"]]
    if mm_prompts and cfg["eval.mm_repeats"] >= 2:
        cm = embed_texts(mar, [s.caption for s in mm_prompts]).astype(np.float32)
        for name in ("unguided", "guided"):
            per = [[] for _ in mm_prompts]
            for r in range(cfg["eval.mm_repeats"]):
                res = _generate_rows(models, mm_prompts, cm, rng.spawn(100 + r), {name: rows[name]})[name][0]
                for i, x in enumerate(embed_samples(mar, res)):
                    per[i].append(x)
            reports.append(MetricReport(f"{name}.mmodality", m_modality([np.stack(p) for p in per])))

    # editing
    checks += _edit_checks(cfg, models, held, rng.spawn(2), reports, out)

    plot_metric_bars(bars, out / "metrics.svg")
    plot_frame_strip(gen_rows["guided"][0][0], ae.topology, out / "strip_guided.svg")
    plot_frame_strip(gen_rows["unguided"][0][0], ae.topology, out / "strip_unguided.svg")
    text = format_report(reports, checks)
    (out / "report.txt").write_text(text, encoding="utf-8", newline="\n")
    note(f"report=report.txt checks_passed={sum(c.passed for c in checks)}/{len(checks)}")
    return EvalResult(reports, checks, text)


def _edit_checks(cfg, models, held, rng: Rng, reports: list, out: Path) -> list:
    ae, mar, gen = models["ae"], models["mar"], models["gen"]
    samples = held.samples[: cfg["eval.edit_prompts"]]
    if not samples:
        return []
    recon = reconstruction_l1(ae, held.samples)
    reports.append(MetricReport("ae.heldout_l1", recon))
    checks = []
    for m, mode in enumerate(EDIT_MODES):
        err_sum, n, exact = 0.0, 0, True
        for g, (L, idx) in enumerate(_length_groups(samples)):
            group = [samples[i] for i in idx]
            with dc.no_grad():
                z = ae.encode(stack_streams([s.motion for s in group], ae.topology)).data
            c = embed_texts(mar, [s.caption for s in group]).astype(np.float32)
            ze = edit(gen, z, c, mode, rng.spawn(10 * m + g))
            fixed = edit_fixed_mask(z.shape[1], mode)
            exact &= ze[:, fixed].tobytes() == z[:, fixed].tobytes()
            frames = np.repeat(fixed, ae.config.downsample)[:L]
            diff = np.abs(decode_latents(ae, ze, L)[:, frames] - decode_latents(ae, z, L)[:, frames])
            err_sum += float(diff.sum())
            n += diff.size
        err = err_sum / n
        reports.append(MetricReport(f"edit.{mode}.fixed_region_l1", err))
        checks.append(Check(f"c6_edit_{mode}", exact and err <= 1.5 * recon,
                            f"tokens_exact={'true' if exact else 'false'} fixed_l1={err:.6f} "
                            f"bound={1.5 * recon:.6f}"))
    return checks


def format_report(reports: list, checks: list) -> str:
    lines = [REPORT_HEADER] + [r.line() for r in reports] + [c.line() for c in checks]
    return "\n".join(lines) + "\n"


# -- full run ----------------------------------------------------------
def pipeline_reproduce(cfg: RunConfig, seed: int, out_dir) -> EvalResult:
    """gen-data -> train-ae -> train-mar -> train-gen -> evaluate under ``out_dir``.

    A failing stage raises StageError naming it; artifacts written so far stay in place.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise StageError("setup", FileExistsError(f"output directory {out} is not empty"))
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "run.log", cfg, seed, "reproduce")
    stage = "gen-data"
    try:
        ds = stage_gen_data(cfg, seed, out / "data", log)
        stage = "train-ae"
        ae = stage_train_ae(cfg, seed, ds, out / CKPT_NAMES["ae"], log)
        stage = "train-mar"
        mar = stage_train_mar(cfg, seed, ds, out / CKPT_NAMES["mar"], log)
        stage = "train-gen"
        gen = stage_train_gen(cfg, seed, ds, ae, mar, out / CKPT_NAMES["gen"], log)
        stage = "evaluate"
        res = evaluate(cfg, seed, ds, {"ae": ae, "mar": mar, "gen": gen}, out / "eval", log)
    except Exception as e:
        log.event("abort", f"stage={stage} error={type(e).__name__}")
        raise StageError(stage, e) from e
    log.event("done", f"checks_passed={sum(c.passed for c in res.checks)}/{len(res.checks)}")
    return res
