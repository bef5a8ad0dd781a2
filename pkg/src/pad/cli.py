"""Command-line entry point.

Every command resolves one experiment config (defaults, then ``--config``,
``--preset``, ``--seed`` and ``--set`` overrides, in that order), writes
``manifest.json`` into the output directory and only then starts work.
``pad replay <manifest>`` reruns a recorded command.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from . import blockworld as bw

log = logging.getLogger("pad")

COMMANDS = ("gen-data", "train", "rollout", "eval", "ablate", "flops", "selftest")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """``a.b=v`` sets ``cfg["a"]["b"] = v``; the value is JSON when it parses."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    *parents, leaf = key.split(".")
    node = cfg
    for p in parents:
        if p not in ("model", "train") or not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if node is cfg and leaf not in cfg:
        raise UsageError(f"unknown config key {key!r}")
    node[leaf] = parse_value(value)


def resolve_config(args) -> dict:
    from .runtime import ExperimentConfig

    cfg = ExperimentConfig().to_dict()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        cfg.update(loaded)
    if args.preset:
        cfg["preset"] = args.preset
    if args.seed is not None:
        cfg["data_seed"] = cfg["plan_seed"] = args.seed
        cfg["train"] = {**cfg["train"], "seed": args.seed}
    for s in args.set or []:
        apply_override(cfg, s)
    try:
        exp = ExperimentConfig.from_dict(cfg)
        exp.model_config()
        exp.train_config()
        exp.tasks()
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"invalid config: {e}") from e
    return exp.to_dict()


def code_stamp() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode() + b"\0" + path.read_bytes())
    return h.hexdigest()[:16]


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _exp(cfg: dict):
    from .runtime import ExperimentConfig

    return ExperimentConfig.from_dict(json.loads(json.dumps(cfg)))


def cmd_gen_data(cfg: dict, a: dict, out: Path) -> int:
    from .datastore import save_dataset
    from .runtime import build_data

    robot, video = build_data(_exp(cfg))
    data = out / "data"
    save_dataset(data, robot, "robot")
    save_dataset(data, video, "video")
    print(f"wrote {len(robot)} robot and {len(video)} video episodes to {data}")
    return 0


def _load_or_build(cfg: dict, data_dir: str | None):
    from .datastore import load_dataset
    from .runtime import build_data

    if data_dir:
        return load_dataset(data_dir)
    return build_data(_exp(cfg))


def cmd_train(cfg: dict, a: dict, out: Path) -> int:
    from .trainkit import train_pipeline

    exp = _exp(cfg)
    robot, video = _load_or_build(cfg, a.get("data"))
    ckpt = train_pipeline(exp.model_config(), robot, video, out, exp.pretrain_steps, exp.train_config())
    print(f"final checkpoint {ckpt}")
    return 0


def _policy(cfg: dict, ckpt: str):
    from .checkpoint import load_checkpoint
    from .runtime import PadPolicy

    model, _, _ = load_checkpoint(ckpt)
    return PadPolicy(model, _exp(cfg).plan_seed)


def cmd_rollout(cfg: dict, a: dict, out: Path) -> int:
    from .runtime import rollout, save_strip

    exp = _exp(cfg)
    task = bw.make_task(a["task"], a["color"])
    ok, length, ep = rollout(a["env_seed"], task, _policy(cfg, a["ckpt"]), exp.max_steps, exp.n_distractors,
                             keep_frames=True)
    write_json(out / "rollout.json", {
        "task": task.instruction, "env_seed": a["env_seed"], "success": ok, "length": length,
        "poses": [[float(x) for x in p] for p in ep.poses],
    })
    save_strip(ep, out / "rollout.png", _exp(cfg).model_config().frame_interval)
    print(f"{task.instruction}: {'success' if ok else 'failure'} after {length} steps")
    return 0


def cmd_eval(cfg: dict, a: dict, out: Path) -> int:
    from .runtime import config_hash, evaluate

    exp = _exp(cfg)
    trials = a["trials"] if a.get("trials") is not None else exp.eval_trials
    seeds = [exp.eval_seed + j for j in range(trials)]
    rep = evaluate(_policy(cfg, a["ckpt"]), exp.tasks(), trials, seeds, exp.max_steps, exp.n_distractors,
                   config_hash(cfg), jobs=a.get("jobs") or 1)
    rep.write_csv(out / "eval_report.csv")
    rep.write_episodes(out / "episodes.csv")
    for r in rep.rows:
        print(f"{r['task']}: {r['successes']}/{r['trials']}")
    print(f"overall {rep.overall_rate:.3f}")
    return 0


def cmd_ablate(cfg: dict, a: dict, out: Path) -> int:
    from .runtime import ablate

    for v in a["variant"]:
        rep = ablate(v, _exp(cfg), out)
        print(f"{v}: overall {rep.overall_rate:.3f}")
    return 0


def cmd_flops(cfg: dict, a: dict, out: Path) -> int:
    from .config import count_tokens, estimate_flops
    from .padnet import PadNet, parameter_count

    mc = _exp(cfg).model_config()
    t_i, t_a, t_e, n = count_tokens(mc)
    info = {"preset": cfg["preset"], "tokens": n, "image_tokens": t_i, "action_tokens": t_a, "depth_tokens": t_e,
            "gflops": estimate_flops(mc), "params": parameter_count(PadNet(mc)) if a.get("params") else None}
    write_json(out / "flops.json", info)
    print(f"{cfg['preset']}: tokens {n} gflops {info['gflops']:.1f}")
    return 0


def cmd_selftest(cfg: dict, a: dict, out: Path) -> int:
    from .selftest import run_all

    results = run_all()
    for c in results:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
    write_json(out / "selftest.json", [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in results])
    return 0 if all(c.ok for c in results) else 1


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out", help="output directory (default: $PAD_OUT or ./runs/<command>)")
    common.add_argument("--seed", type=int, help="data, training and planning seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("--preset", help="model preset")
    common.add_argument("--jobs", type=int, default=1, help="parallel rollout workers")

    p = _Parser(prog="pad", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pad {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="scripted expert episodes plus a video-only split")
    g.add_argument("--tasks", help="comma-separated task families")
    g.add_argument("--episodes", type=int, help="robot episodes")
    g.add_argument("--video-episodes", type=int, help="video-only episodes")

    t = sub.add_parser("train", parents=[common], help="pretrain then adapt")
    t.add_argument("--data", help="dataset directory from gen-data (generated in memory when omitted)")

    r = sub.add_parser("rollout", parents=[common], help="one closed-loop episode")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", default="reach", choices=bw.FAMILIES)
    r.add_argument("--color", default="red", choices=list(bw.COLORS))
    r.add_argument("--env-seed", type=int, default=0)

    e = sub.add_parser("eval", parents=[common], help="success rates over seeded rollouts")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--trials", type=int)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    a.add_argument("--variant", action="append", choices=["full", "no_img", "no_cotrain", "with_depth"])

    f = sub.add_parser("flops", parents=[common], help="token count and forward GFLOPs of a preset")
    f.add_argument("--params", action="store_true", help="also count parameters (builds the network)")

    sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")

    rp = sub.add_parser("replay", help="rerun a command from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="output directory for the rerun")
    return p


_COMMON = ("config", "out", "seed", "set", "preset", "jobs", "command")


def _command_args(command: str, ns: argparse.Namespace, cfg: dict) -> dict:
    a = {k: v for k, v in vars(ns).items() if k not in _COMMON}
    a["jobs"] = ns.jobs
    if command == "gen-data":
        if a.pop("tasks"):
            cfg["families"] = ns.tasks.split(",")
        if a.get("episodes") is not None:
            cfg["episodes"] = a["episodes"]
        if a.get("video_episodes") is not None:
            cfg["video_episodes"] = a["video_episodes"]
        a.pop("episodes", None)
        a.pop("video_episodes", None)
    if command == "ablate" and not a.get("variant"):
        a["variant"] = ["no_img", "no_cotrain", "with_depth"]
    for key in ("ckpt", "data"):
        if a.get(key):
            a[key] = str(Path(a[key]).resolve())
    return a


def default_out(command: str) -> Path:
    return Path(os.environ.get("PAD_OUT") or Path("runs") / command)


def execute(command: str, cfg: dict, a: dict, out: Path, argv: list[str]) -> int:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "args": a,
        "config": cfg,
        "seeds": {"data": cfg["data_seed"], "train": cfg["train"].get("seed", 0), "plan": cfg["plan_seed"],
                  "eval": cfg["eval_seed"]},
        "version": __version__,
        "code": code_stamp(),
        "torch": torch.__version__,
        "out": str(out.resolve()),
    }
    write_json(out / "manifest.json", manifest)
    log.info("%s -> %s", command, out)
    return HANDLERS[command](cfg, a, out)


def replay(path: str, out: str | None) -> int:
    try:
        m = json.loads(Path(path).read_text())
        command, cfg, a = m["command"], m["config"], m["args"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"unreadable manifest {path}: {e}") from e
    if command not in HANDLERS:
        raise UsageError(f"manifest names unknown command {command!r}")
    target = Path(out) if out else Path(m["out"])
    return execute(command, cfg, a, target, m.get("argv", []))


def resolve_config_dict(cfg: dict) -> dict:
    """Re-validate after command-specific edits."""
    from .runtime import ExperimentConfig

    try:
        exp = ExperimentConfig.from_dict(cfg)
        exp.tasks()
        exp.model_config()
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"invalid config: {e}") from e
    return exp.to_dict()


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        ns = build_parser().parse_args(argv)
        if ns.command == "replay":
            return replay(ns.manifest, ns.out)
        cfg = resolve_config(ns)
        a = _command_args(ns.command, ns, cfg)
        cfg = resolve_config_dict(cfg)
        out = Path(ns.out) if ns.out else default_out(ns.command)
        return execute(ns.command, cfg, a, out, argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:
        log.exception("run failed: %s", e)
        return 1


def main() -> None:
    sys.exit(run())
