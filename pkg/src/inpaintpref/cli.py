"""Command-line front end.

Every subcommand reads an optional ``key = value`` config file (``--config``),
applies per-key override flags, writes its outputs plus the fully resolved
config to ``--out`` and exits 0. On failure it prints one line
``error: <category>: <message>`` to stderr, exits 1 and leaves no partial
outputs behind.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffusion, dpo, evalsuite, judge, models, prefdata, rewards, toyworld
from .errors import ConfigError, InpaintPrefError

log = logging.getLogger("inpaintpref")

CONFIG_NAME = "config.txt"


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object
    help: str


# Toy defaults. Paths default to "" (unset).
KEYS: dict[str, Key] = {
    # world
    "seed": Key(int, 0, "dataset / global seed"),
    "tasks": Key(int, 256, "number of tasks for make-data"),
    "first_task_id": Key(int, 0, "id of the first generated task"),
    "K": Key(int, 4, "number of classes"),
    "height": Key(int, 16, "image height"),
    "width": Key(int, 16, "image width"),
    "noise_sigma": Key(float, 0.05, "pixel noise of the toy data"),
    # generator
    "generator": Key(str, "DDPM", "generator tag: DDPM or FM"),
    "T": Key(int, diffusion.DEFAULT_T, "DDPM steps"),
    "beta_start": Key(float, diffusion.DEFAULT_BETA_START, "first DDPM beta"),
    "beta_end": Key(float, diffusion.DEFAULT_BETA_END, "last DDPM beta"),
    "fm_steps": Key(int, 25, "Euler steps of the flow sampler"),
    "hidden": Key(_ints, (), "hidden layer widths, comma separated; empty for the "
                  "generator default (DDPM 1024, FM 512)"),
    "sft_steps": Key(int, 2000, "pretraining steps"),
    "sft_lr": Key(float, 1e-3, "pretraining learning rate"),
    "sft_batch": Key(int, 64, "pretraining batch size"),
    "sft_seed": Key(int, 0, "pretraining seed"),
    # preference data
    "N": Key(int, 8, "candidates per task"),
    "selector": Key(str, "fidelity", "reward name, 'random' or 'ensemble'"),
    "ensemble": Key(_names, rewards.DEFAULT_ENSEMBLE, "ensemble members"),
    "pair_seed": Key(int, 0, "seed of the random selector"),
    # DPO
    "beta": Key(float, 2000.0, "DPO beta"),
    "lr": Key(float, 1e-5, "DPO learning rate"),
    "steps": Key(int, 1000, "DPO optimizer steps"),
    "batch_size": Key(int, 8, "pairs per DPO step"),
    "dpo_seed": Key(int, 0, "DPO seed"),
    # evaluation
    "rewards": Key(_names, ("fidelity", "hps_like", "pick_like"), "rewards to report"),
    "eval_samples": Key(int, 4, "samples per evaluation task"),
    "eval_seed": Key(int, 0, "evaluation seed"),
    "N_list": Key(_ints, (2, 4, 8, 16), "candidate counts for scale-candidates"),
    "step_list": Key(_ints, (0, 250, 500, 1000), "snapshot steps for scale-samples"),
    "betas": Key(_floats, dpo.FULL_SCALE_BETA_GRID, "beta grid"),
    "lrs": Key(_floats, dpo.FULL_SCALE_LR_GRID, "learning-rate grid"),
    # judge
    "judge": Key(str, "fidelity", "win-rate / judge scorer: a reward name, 'mock' or 'remote'"),
    "judge_endpoint": Key(str, "", "chat-completion endpoint URL"),
    "judge_model": Key(str, "gpt-4", "model name sent to the endpoint"),
    "judge_parallelism": Key(int, 4, "concurrent judge requests"),
    "judge_timeout": Key(float, 60.0, "seconds per judge request"),
    "judge_retries": Key(int, 3, "retries per judge request"),
    "threads": Key(int, 4, "upper bound on worker threads"),
    # inputs
    "data": Key(str, "", "task dataset (PFD1)"),
    "train_data": Key(str, "", "training task dataset for drift baselines"),
    "eval_data": Key(str, "", "held-out task dataset for scaling and grid runs"),
    "checkpoint": Key(str, "", "generator checkpoint (PFC1)"),
    "model_a": Key(str, "", "first checkpoint for win-rate"),
    "model_b": Key(str, "", "second checkpoint for win-rate"),
    "candidates": Key(str, "", "candidate pool (.npz)"),
    "dataset": Key(str, "", "preference dataset (PFD1)"),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, source: str = "config") -> dict[str, object]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(key, value, f"{source}:{n}")
    return out


def _parse_value(key: str, value: str, where: str):
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return KEYS[key].parse(value)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from None


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> dict[str, object]:
    cfg = {k: spec.default for k, spec in KEYS.items()}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e.strerror}") from None
        cfg.update(parse_config_text(text, config_path))
    for key, value in overrides.items():
        cfg[key] = _parse_value(key, value, f"--{key.replace('_', '-')}")
    return cfg


def config_text(cfg: dict[str, object], command: str) -> str:
    lines = [f"# resolved config for: {command}"]
    lines += [f"{k} = {_format(cfg[k])}" for k in KEYS]
    return "\n".join(lines) + "\n"


# --- helpers ---------------------------------------------------------------------

def _require(cfg, key: str) -> Path:
    value = cfg[key]
    if not value:
        raise ConfigError(f"missing required input: --{key.replace('_', '-')}")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    return path


def _tasks(cfg, key: str = "data"):
    return prefdata.load_dataset(_require(cfg, key)).tasks


def _checkpoint(cfg, key: str = "checkpoint") -> models.Checkpoint:
    return models.load_checkpoint(_require(cfg, key))


def _eval_spec(cfg, tasks, judge_fn=None) -> evalsuite.EvalSpec:
    return evalsuite.EvalSpec(list(tasks), tuple(cfg["rewards"]), cfg["eval_samples"],
                              cfg["eval_seed"], cfg["fm_steps"], judge_fn)


def _dpo_config(cfg) -> dpo.DpoConfig:
    return dpo.DpoConfig(cfg["beta"], cfg["lr"], cfg["steps"], cfg["batch_size"], cfg["dpo_seed"])


def _judge_fn(cfg):
    name = cfg["judge"]
    if name == "mock":
        return judge.mock_score
    if name == "remote":
        if not cfg["judge_endpoint"]:
            raise ConfigError("judge = remote needs --judge-endpoint")
        return judge.remote_judge(cfg["judge_endpoint"], cfg["judge_model"],
                                  cfg["judge_timeout"], max_retries=cfg["judge_retries"])
    return rewards.scorer(name)


def _write_trace(path: Path, trace) -> None:
    evalsuite.write_table(path, [{"step": s, "loss": float(v)}
                                 for s, v in zip(trace.steps, trace.losses)], ["step", "loss"])


def save_candidates(path, candidates, tag: str) -> None:
    names = sorted({n for c in candidates for n in c.scores})
    np.savez(path, tag=np.array(tag), task_id=np.array([c.task_id for c in candidates]),
             idx=np.array([c.candidate_idx for c in candidates]),
             seed=np.array([c.seed for c in candidates], dtype=np.uint64),
             image=np.stack([c.image for c in candidates]).astype(np.float32),
             score_names=np.array(names, dtype=str),
             scores=np.array([[c.scores[n] for n in names] for c in candidates]).reshape(
                 len(candidates), len(names)))


def load_candidates(path):
    with np.load(path, allow_pickle=False) as z:
        names = [str(n) for n in z["score_names"]]
        cands = [prefdata.Candidate(int(t), int(i), int(s), img.astype(np.float64),
                                    dict(zip(names, map(float, sc))))
                 for t, i, s, img, sc in zip(z["task_id"], z["idx"], z["seed"], z["image"],
                                             z["scores"])]
        return cands, str(z["tag"])


# --- subcommands ---------------------------------------------------------------------

def cmd_make_data(cfg, out: Path) -> None:
    tasks = toyworld.make_dataset(cfg["seed"], cfg["K"], cfg["tasks"], cfg["noise_sigma"],
                                  cfg["height"], cfg["width"], cfg["first_task_id"])
    prefdata.save_dataset(prefdata.task_dataset(tasks, cfg["K"]), out / "tasks.pfd")


def cmd_pretrain(cfg, out: Path) -> None:
    tasks = _tasks(cfg)
    config = dpo.SftConfig(cfg["sft_steps"], cfg["sft_lr"], cfg["sft_batch"], cfg["hidden"],
                           cfg["sft_seed"], cfg["T"], cfg["K"], cfg["beta_start"],
                           cfg["beta_end"])
    ckpt, trace = dpo.pretrain_sft(tasks, cfg["generator"], config)
    models.save_checkpoint(ckpt, out / "model.pfc")
    _write_trace(out / "loss.csv", trace)


def cmd_gen_candidates(cfg, out: Path) -> None:
    ckpt = _checkpoint(cfg)
    tasks = _tasks(cfg)
    cands = prefdata.gen_candidates(ckpt, tasks, cfg["N"], cfg["seed"], fm_steps=cfg["fm_steps"])
    save_candidates(out / "candidates.npz", cands, ckpt.tag)


def _selector_rewards(cfg) -> list[str]:
    sel = cfg["selector"]
    if sel == prefdata.ENSEMBLE:
        return list(cfg["ensemble"])
    if sel == prefdata.RANDOM:
        return ["fidelity"]
    rewards.get_profile(sel)
    return [sel]


def cmd_build_pairs(cfg, out: Path) -> None:
    cands, tag = load_candidates(_require(cfg, "candidates"))
    tasks = _tasks(cfg)
    wanted = [n for n in _selector_rewards(cfg) if any(n not in c.scores for c in cands)]
    if wanted:
        prefdata.score_candidates(cands, tasks, wanted)
    margin_reward = "fidelity" if cfg["selector"] == prefdata.RANDOM else None
    ids = {c.task_id for c in cands}
    ds = prefdata.build_pairs(cands, [t for t in tasks if t.task_id in ids], cfg["selector"],
                              cfg["pair_seed"], tag, tuple(cfg["ensemble"]), margin_reward,
                              cfg["K"])
    prefdata.save_dataset(ds, out / "pairs.pfd")
    evalsuite.write_table(out / "pairs.csv", [
        {"task_id": p.task_id, "preferred_idx": p.preferred_idx,
         "dispreferred_idx": p.dispreferred_idx, "margin": p.margin} for p in ds.pairs],
        ["task_id", "preferred_idx", "dispreferred_idx", "margin"])


def cmd_dpo_train(cfg, out: Path) -> None:
    ckpt = _checkpoint(cfg)
    ds = prefdata.load_dataset(_require(cfg, "dataset"))
    new, trace, _ = dpo.train_dpo(ckpt, ds, _dpo_config(cfg))
    models.save_checkpoint(new, out / "model.pfc")
    _write_trace(out / "loss.csv", trace)


def cmd_eval(cfg, out: Path) -> None:
    ckpt = _checkpoint(cfg)
    report = evalsuite.evaluate(ckpt, _eval_spec(cfg, _tasks(cfg)))
    evalsuite.write_report(out / "report.csv", report)


def cmd_win_rate(cfg, out: Path) -> None:
    a, b = _checkpoint(cfg, "model_a"), _checkpoint(cfg, "model_b")
    wr = evalsuite.win_rate(a, b, _tasks(cfg), _judge_fn(cfg), cfg["eval_seed"], cfg["fm_steps"])
    evalsuite.write_win_rate(out / "win_rate.csv", wr)


def cmd_drift(cfg, out: Path) -> None:
    rep = evalsuite.drift(_checkpoint(cfg), _tasks(cfg), _tasks(cfg, "train_data"),
                          cfg["eval_samples"], cfg["eval_seed"], cfg["fm_steps"])
    evalsuite.write_drift(out / "drift.csv", rep)


def cmd_scale_candidates(cfg, out: Path) -> None:
    rows = evalsuite.scale_candidates(
        _checkpoint(cfg), _tasks(cfg), cfg["selector"], cfg["N_list"], _dpo_config(cfg),
        _eval_spec(cfg, _tasks(cfg, "eval_data")), cfg["seed"], cfg["fm_steps"])
    evalsuite.write_table(out / "scale_candidates.csv", rows)


def cmd_scale_samples(cfg, out: Path) -> None:
    rows = evalsuite.scale_samples(
        _checkpoint(cfg), prefdata.load_dataset(_require(cfg, "dataset")), cfg["step_list"],
        _dpo_config(cfg), _eval_spec(cfg, _tasks(cfg, "eval_data")))
    evalsuite.write_table(out / "scale_samples.csv", rows)


def cmd_hparam_grid(cfg, out: Path) -> None:
    rows = dpo.hparam_grid(
        _checkpoint(cfg), prefdata.load_dataset(_require(cfg, "dataset")), cfg["betas"],
        cfg["lrs"], _eval_spec(cfg, _tasks(cfg, "eval_data")), _dpo_config(cfg))
    evalsuite.write_table(out / "hparam_grid.csv", rows)


def cmd_judge(cfg, out: Path) -> None:
    """Score one sample per task with the rubric judge (mock or remote)."""
    ckpt = _checkpoint(cfg)
    tasks = _tasks(cfg)
    flat, seeds = evalsuite.eval_seeds(tasks, 1, cfg["eval_seed"])
    images = models.sample_images(ckpt, flat, seeds, cfg["fm_steps"])
    if cfg["judge"] == "remote":
        if not cfg["judge_endpoint"]:
            raise ConfigError("judge = remote needs --judge-endpoint")
        verdicts = judge.judge_remote_many(
            flat, images, cfg["judge_endpoint"], cfg["judge_model"],
            parallelism=min(cfg["judge_parallelism"], cfg["threads"]),
            timeout=cfg["judge_timeout"], max_retries=cfg["judge_retries"])
    elif cfg["judge"] == "mock":
        verdicts = [judge.judge_mock(t, img) for t, img in zip(flat, images)]
    else:
        raise ConfigError(f"judge subcommand needs judge = mock or remote, got {cfg['judge']!r}")
    rows = []
    for t, v in zip(flat, verdicts):
        if isinstance(v, InpaintPrefError):
            rows.append({"task_id": t.task_id, "status": v.category})
        else:
            rows.append({"task_id": t.task_id, "aesthetic": v.aesthetic,
                         "structural": v.structural, "semantic": v.semantic,
                         "total": v.total, "status": "ok"})
    if all(r["status"] != "ok" for r in rows):
        raise InpaintPrefError("judge failed on every task", "judge")
    evalsuite.write_table(out / "judge.csv", rows,
                          ["task_id", "aesthetic", "structural", "semantic", "total", "status"])


COMMANDS: dict[str, tuple[Callable, str]] = {
    "make-data": (cmd_make_data, "generate a toy task dataset"),
    "pretrain": (cmd_pretrain, "supervised pretraining of a DDPM or FM generator"),
    "gen-candidates": (cmd_gen_candidates, "sample N candidates per task"),
    "build-pairs": (cmd_build_pairs, "score candidates and build preference pairs"),
    "dpo-train": (cmd_dpo_train, "DPO fine-tuning against the frozen checkpoint"),
    "eval": (cmd_eval, "reward and bias-statistic report"),
    "win-rate": (cmd_win_rate, "paired win rate of model A against model B"),
    "drift": (cmd_drift, "bias-statistic drift against the training data"),
    "scale-candidates": (cmd_scale_candidates, "DPO quality as a function of N"),
    "scale-samples": (cmd_scale_samples, "DPO quality as a function of training steps"),
    "hparam-grid": (cmd_hparam_grid, "beta / learning-rate grid"),
    "judge": (cmd_judge, "rubric-judge one sample per task"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpaintpref", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        group = p.add_argument_group("config overrides")
        for key, spec in KEYS.items():
            group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V",
                               help=f"{spec.help} (default {_format(spec.default)})")
    return parser


def run(command: str, cfg: dict[str, object], out: Path) -> None:
    """Run a subcommand, staging outputs inside ``out`` and moving them into
    place only on success."""
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        COMMANDS[command][0](cfg, staging)
        (staging / CONFIG_NAME).write_text(config_text(cfg, command))
        for f in staging.iterdir():
            f.replace(out / f.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = resolve_config(args.config, overrides)
        run(args.command, cfg, Path(args.out))
    except InpaintPrefError as e:
        message = " ".join(str(e).split())
        print(f"error: {e.category}: {message}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
