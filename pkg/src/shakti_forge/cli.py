"""Run configuration and the ``shakti-forge`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import gradsuite
from .blocks import PRESETS, ModelConfig, param_count, preset
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .data import (
    HELDOUT_BASE,
    GlyphTask,
    Vocab,
    corpus_accuracy,
    dump_dataset,
    gen_text_corpus,
    glyph_batches,
    perplexity,
    text_batches,
)
from .fusion import VLM
from .training import METRICS_HEADER, MetricRow, NumericAbort, OptimizerState, StageConfig, run_stage, stage_defaults

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4
MODEL_CHOICES = ("1b", "4b", "toy", "micro")
CONFIG_NAME = "config.resolved.json"
METRICS_NAME = "metrics.csv"
FINAL_CHECKPOINT = "final.skvl"

DATA_DEFAULTS = {
    "task": dataclasses.asdict(GlyphTask()),
    "text_alpha": 0.05,
    "mean_doc_len": 24.0,
    "eval_samples": 512,
    "eval_tokens": 8192,
    "gen_count": 16,
    "gen_split": "train",
}


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending key path."""


@dataclass
class RunConfig:
    model: str = "toy"
    model_cfg: dict = field(default_factory=dict)
    stage: int = 1
    stage_cfg: dict = field(default_factory=dict)
    seed: int = 0
    data: dict = field(default_factory=dict)
    outdir: str = "runs/default"
    init_checkpoint: str | None = None
    table2_lr: bool = False

    def model_config(self) -> ModelConfig:
        return preset(self.model, **self.model_cfg)

    def stage_config(self) -> StageConfig:
        overrides = {k: v for k, v in self.stage_cfg.items() if k != "stage"}
        if "freeze" in overrides:
            overrides["freeze"] = tuple(overrides["freeze"])
        return stage_defaults(self.model, self.stage, self.table2_lr, **overrides)

    def task(self) -> GlyphTask:
        return GlyphTask(**self.data["task"])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def serialize(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_keys(obj, allowed, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(obj).__name__}")
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{path + '.' if path else ''}{k}: unknown key")


def _typed(value, kind, path: str):
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if not ok:
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{path}: expected {names}, got {json.dumps(value)}")
    return value


def _resolve(raw: dict) -> RunConfig:
    _check_keys(raw, {f.name for f in dataclasses.fields(RunConfig)}, "")
    cfg = RunConfig()
    cfg.model = _typed(raw.get("model", cfg.model), str, "model")
    if cfg.model not in PRESETS:
        raise ConfigError(f"model: unknown preset {cfg.model!r}")
    cfg.stage = _typed(raw.get("stage", cfg.stage), int, "stage")
    if cfg.stage not in (1, 2, 3):
        raise ConfigError(f"stage: must be 1, 2 or 3, got {cfg.stage}")
    cfg.seed = _typed(raw.get("seed", cfg.seed), int, "seed")
    if cfg.seed < 0:
        raise ConfigError("seed: must be >= 0")
    cfg.outdir = _typed(raw.get("outdir", cfg.outdir), str, "outdir")
    init = raw.get("init_checkpoint")
    cfg.init_checkpoint = None if init is None else _typed(init, str, "init_checkpoint")
    cfg.table2_lr = _typed(raw.get("table2_lr", False), bool, "table2_lr")

    model_over = raw.get("model_cfg", {})
    _check_keys(model_over, {f.name for f in dataclasses.fields(ModelConfig)}, "model_cfg")
    try:
        cfg.model_cfg = preset(cfg.model, **model_over).to_dict()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model_cfg: {e}") from None

    stage_over = raw.get("stage_cfg", {})
    _check_keys(stage_over, {f.name for f in dataclasses.fields(StageConfig)}, "stage_cfg")
    if stage_over.get("stage", cfg.stage) != cfg.stage:
        raise ConfigError(f"stage_cfg.stage: {stage_over['stage']} disagrees with stage {cfg.stage}")
    cfg.stage_cfg = dict(stage_over)
    try:
        cfg.stage_cfg = cfg.stage_config().to_dict()
    except ValueError as e:
        raise ConfigError(f"stage_cfg.{e}") from None
    except TypeError as e:
        raise ConfigError(f"stage_cfg: {e}") from None

    data = raw.get("data", {})
    _check_keys(data, DATA_DEFAULTS, "data")
    merged = {**DATA_DEFAULTS, **data}
    _check_keys(merged["task"], DATA_DEFAULTS["task"], "data.task")
    merged["task"] = {**DATA_DEFAULTS["task"], **merged["task"]}
    for k in ("eval_samples", "eval_tokens", "gen_count"):
        if _typed(merged[k], int, f"data.{k}") < 1:
            raise ConfigError(f"data.{k}: must be >= 1")
    if merged["gen_split"] not in ("train", "heldout"):
        raise ConfigError("data.gen_split: must be 'train' or 'heldout'")
    cfg.data = merged
    task = merged["task"]
    if not 1 <= task["min_glyphs"] <= task["max_glyphs"]:
        raise ConfigError("data.task.max_glyphs: need 1 <= min_glyphs <= max_glyphs")
    return cfg


def parse_config(text: str | None = None, **overrides) -> RunConfig:
    """Parse a JSON document (``None`` means ``{}``); keyword overrides win over the document."""
    try:
        raw = json.loads(text) if text is not None and text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"<root>: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return _resolve(raw)


def load_config(path: str | None, **overrides) -> RunConfig:
    text = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"<file>: cannot read {path}: {e.strerror}") from None
    return parse_config(text, **overrides)


# ---------------------------------------------------------------- commands


class _RunSink:
    """Streams metric rows to CSV and writes periodic checkpoints."""

    def __init__(self, outdir: str, model: VLM, cfg: RunConfig):
        self._fh = open(os.path.join(outdir, METRICS_NAME), "w", encoding="utf-8", newline="\n")
        self._fh.write(METRICS_HEADER + "\n")
        self._outdir, self._model, self._cfg = outdir, model, cfg

    def on_step(self, row: MetricRow) -> None:
        self._fh.write(row.csv() + "\n")

    def on_checkpoint(self, step: int, opt_state: OptimizerState) -> None:
        save_checkpoint(os.path.join(self._outdir, f"step_{step:06d}.skvl"), self._model,
                        self._cfg.stage, step, self._cfg.seed, opt_state)

    def close(self) -> None:
        self._fh.close()


def _batches(cfg: RunConfig, sc: StageConfig, vocab: Vocab):
    d = cfg.data
    if cfg.stage == 1:
        return text_batches(cfg.seed, sc.batch_size, sc.max_seq_len, vocab.glyph_set_size, d["text_alpha"],
                            eos_id=vocab.eos, mean_doc_len=d["mean_doc_len"])
    return glyph_batches(cfg.seed, sc.batch_size, cfg.task(), vocab, with_rejected=sc.objective == "lm+dpo")


def train(cfg: RunConfig) -> VLM:
    """Run one stage; writes the resolved config, metrics CSV and checkpoints into ``cfg.outdir``."""
    os.makedirs(cfg.outdir, exist_ok=True)
    with open(os.path.join(cfg.outdir, CONFIG_NAME), "w", encoding="utf-8") as fh:
        fh.write(serialize(cfg))
    mc, sc = cfg.model_config(), cfg.stage_config()
    if cfg.init_checkpoint:
        model = read_checkpoint(cfg.init_checkpoint, expected=mc).build_model()
    else:
        model = VLM(mc, seed=cfg.seed)
    sink = _RunSink(cfg.outdir, model, cfg)
    try:
        res = run_stage(model, sc, _batches(cfg, sc, Vocab(cfg.task().glyph_set_size)), sink)
    finally:
        sink.close()
    save_checkpoint(os.path.join(cfg.outdir, FINAL_CHECKPOINT), model, cfg.stage, res.steps, cfg.seed, res.opt_state)
    return model


def evaluate(model: VLM, stage: int, cfg: RunConfig) -> dict:
    """Held-out perplexity (stage 1) or glyph exact-match accuracy (stages 2 and 3)."""
    d = cfg.data
    vocab = Vocab(cfg.task().glyph_set_size)
    if stage == 1:
        toks = gen_text_corpus(HELDOUT_BASE + cfg.seed, d["eval_tokens"], vocab.glyph_set_size,
                               d["text_alpha"], table_seed=cfg.seed)
        return {"stage": 1, "metric": "perplexity", "perplexity": perplexity(model, toks, window=min(64, model.decoder.rope.max_len)),
                "tokens": int(toks.size)}
    n = d["eval_samples"]
    batch = min(64, n)
    gen = glyph_batches(cfg.seed, batch, cfg.task(), vocab, split="heldout")
    pairs = []
    while len(pairs) < n:
        b = next(gen)
        preds = model.generate(b.images, max_new_tokens=cfg.task().max_glyphs + 1)
        pairs += [(p, r[:-1]) for p, r in zip(preds, b.responses)]
    pairs = pairs[:n]
    return {"stage": stage, "metric": "exact_match", "accuracy": corpus_accuracy(pairs), "samples": n}


def run_pipeline(seed: int, outdir: str, model: str = "toy", data: dict | None = None,
                 stage_cfgs: dict | None = None) -> list[RunConfig]:
    """Chain stages 1, 2 and 3, each in ``<outdir>/stageN`` and initialised from the previous final checkpoint."""
    cfgs, init = [], None
    for stage in (1, 2, 3):
        cfg = _resolve(dict(model=model, stage=stage, seed=seed, data=data or {},
                            stage_cfg=(stage_cfgs or {}).get(stage, {}),
                            outdir=os.path.join(outdir, f"stage{stage}"), init_checkpoint=init))
        train(cfg)
        init = os.path.join(cfg.outdir, FINAL_CHECKPOINT)
        cfgs.append(cfg)
    return cfgs


def cmd_train(cfg: RunConfig) -> int:
    try:
        train(cfg)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"stage {cfg.stage} done; outputs in {cfg.outdir}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    path = checkpoint or os.path.join(cfg.outdir, FINAL_CHECKPOINT)
    state = read_checkpoint(path)
    result = evaluate(state.build_model(), state.stage, cfg)
    os.makedirs(cfg.outdir, exist_ok=True)
    with open(os.path.join(cfg.outdir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(seeds: int = 10) -> int:
    results = gradsuite.run_suite(seeds)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<24} worst {r.worst:.3e} (tol {r.tol:.0e}) {r.seconds:.1f}s")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} cases within tolerance")
    return EXIT_OK if not failed else 1


def cmd_inspect(checkpoint: str) -> int:
    state = read_checkpoint(checkpoint)
    print(f"format version {state.version}")
    print(f"stage {state.stage} step {state.step} seed {state.seed}")
    print(f"digest {state.digest}")
    total = 0
    for name, arr in state.params.items():
        print(f"  {name:<48} {str(tuple(arr.shape)):<16} {arr.size}")
        total += arr.size
    print(f"parameters {total} (config count {param_count(state.config)})")
    if state.optimizer_state() is not None:
        print(f"optimizer step {state.optimizer_state().step}")
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig) -> int:
    d = cfg.data
    os.makedirs(cfg.outdir, exist_ok=True)
    if cfg.stage == 1:
        vocab = Vocab(cfg.task().glyph_set_size)
        toks = gen_text_corpus(cfg.seed, d["eval_tokens"], vocab.glyph_set_size, d["text_alpha"])
        path = os.path.join(cfg.outdir, "corpus.txt")
        np.savetxt(path, toks[None], fmt="%d")
    else:
        path = dump_dataset(cfg.outdir, cfg.seed, d["gen_count"], cfg.task(), d["gen_split"])
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shakti-forge", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=["train", "eval", "gradcheck", "inspect", "gen-data"])
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--model", choices=MODEL_CHOICES)
    ap.add_argument("--stage", type=int, choices=[1, 2, 3])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--outdir")
    ap.add_argument("--table2-lr", action="store_true", default=None,
                    help="use the rate-table value for the 4B stage-1 learning rate")
    ap.add_argument("--checkpoint", help="checkpoint to evaluate or inspect")
    ap.add_argument("--seeds", type=int, default=10, help="gradcheck seeds per case")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seeds)
        if args.command == "inspect":
            if not args.checkpoint:
                print("inspect needs --checkpoint", file=sys.stderr)
                return EXIT_CONFIG
            return cmd_inspect(args.checkpoint)
        cfg = load_config(args.config, model=args.model, stage=args.stage, seed=args.seed,
                          outdir=args.outdir, table2_lr=args.table2_lr)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_gen_data(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as e:
        print(f"checkpoint error ({type(e).__name__}): {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
