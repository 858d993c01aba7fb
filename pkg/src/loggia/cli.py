"""Command-line entry points: train, eval, gen-topo, gen-traffic, payload, verify-determinism."""

from __future__ import annotations

import argparse
import csv
import filecmp
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .agent import METRIC_KEYS, aggregate, evaluate
from .env import MODES, EnvConfig
from .routing import METRICS
from .telemetry import payload_size
from .topology import TopologyError, resolve_topology, save_topology
from .traffic import calibrate_intensity, generate_schedule, save_schedule
from .train import TrainConfig, held_out_seeds, load_policy, train_protocol

log = logging.getLogger("loggia")

PACKET_BYTES = 1500


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_episodes: int = 30
    eval_modes: list = field(default_factory=lambda: ["Local-Multi"])
    eval_lambda_ac: list = field(default_factory=lambda: [0.2])
    eval_baselines: list = field(default_factory=lambda: ["RIP", "OSPF", "EIGRP"])
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc or {})
        ev = doc.pop("eval", {}) or {}
        out = doc.pop("output_dir", "runs/default")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            train = TrainConfig(**doc)
            resolve_topology(train.topology, train.seed)
        except (TypeError, ValueError) as exc:  # TopologyError is a ValueError
            raise UsageError(str(exc)) from exc
        cfg = cls(train=train, output_dir=out)
        for key in ("episodes", "modes", "lambda_ac", "baselines"):
            if key in ev:
                setattr(cfg, f"eval_{key}", ev[key])
        if int(cfg.eval_episodes) < 1:
            raise UsageError("eval.episodes must be >= 1")
        for m in cfg.eval_modes:
            if m not in MODES:
                raise UsageError(f"eval mode {m!r} not in {MODES}")
        return cfg


def load_config(path) -> tuple[ExperimentConfig, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    return ExperimentConfig.from_dict(yaml.safe_load(text)), text


def write_csv(path: Path, rows: list[dict]) -> None:
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})


def write_rows(out_dir: Path, rows: list[dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "metrics.csv", rows)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _scalar_rows(path: Path) -> list[dict]:
    rows = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        rows.append({k: v for k, v in rec.items() if not isinstance(v, (list, dict))})
    return rows


# -- verbs ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, text = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(text)
    trainer = train_protocol(cfg.train, out, resume=not args.fresh)
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        write_csv(out / "metrics.csv", _scalar_rows(metrics))
    print(f"trained {trainer.iteration} iterations; checkpoints in {out / 'checkpoints'}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.baseline):
        raise UsageError("give exactly one of --checkpoint or --baseline")
    if args.baseline and args.baseline.upper() not in METRICS:
        raise UsageError(f"unknown baseline {args.baseline!r}; expected one of {METRICS}")
    if args.mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}; expected one of {MODES}")
    policy = normalizer = None
    meta = {}
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        policy, normalizer, meta = load_policy(args.checkpoint)
    try:
        topo = resolve_topology(args.topology, args.topology_seed)
    except TopologyError as exc:
        raise UsageError(str(exc)) from exc
    if args.intensity is not None:
        intensity = args.intensity
    elif str(args.topology_seed) in meta.get("intensity", {}):
        intensity = meta["intensity"][str(args.topology_seed)]
    else:
        intensity = calibrate_intensity(topo, args.calibration_seed)
    horizon = args.steps * args.step_ms
    seeds = held_out_seeds(args.episodes, args.seed_base)
    schedules = [generate_schedule(topo, s, intensity, horizon) for s in seeds]
    rows = []
    for lam in args.lambda_ac:
        cfg = EnvConfig(steps=args.steps, step_ms=args.step_ms, mode=args.mode, lambda_ac=lam)
        name = args.baseline.upper() if args.baseline else "policy"
        ep_rows = evaluate(topo, schedules, cfg, policy, normalizer, args.baseline,
                           args.synthetic_inference_ms)
        for r in ep_rows:
            rows.append({"agent": name, "mode": args.mode, "lambda_ac": lam, **r})
        rows.append({"agent": name, "mode": args.mode, "lambda_ac": lam, "episode": "mean", "seed": None,
                     **aggregate(ep_rows)})
    write_rows(Path(args.out), rows)
    for r in rows:
        if r["episode"] == "mean":
            print(f"{r['agent']} {r['mode']} lambda_ac={r['lambda_ac']}: " +
                  ", ".join(f"{k}={r[k]:.4f}" for k in METRIC_KEYS))
    return 0


def cmd_gen_topo(args) -> int:
    try:
        topo = resolve_topology(args.preset, args.seed)
    except TopologyError as exc:
        raise UsageError(str(exc)) from exc
    save_topology(topo, args.out)
    print(f"{topo.name}: {topo.num_nodes} nodes, {len(topo.links)} links -> {args.out}")
    return 0


def cmd_gen_traffic(args) -> int:
    try:
        topo = resolve_topology(args.topology, args.topology_seed)
    except TopologyError as exc:
        raise UsageError(str(exc)) from exc
    schedule = generate_schedule(topo, args.seed, args.intensity, args.horizon_ms)
    save_schedule(schedule, args.out)
    print(f"{len(schedule)} flows -> {args.out}")
    return 0


def payload_report(topo, n: int = 0) -> dict:
    nodes = []
    for v in range(topo.num_nodes):
        deg = topo.degree(v)
        full = payload_size("full", topo.num_nodes, deg, n)
        compact = payload_size("compact", topo.num_nodes, deg, n)
        nodes.append({"node": v, "neighbors": deg, "full": full, "compact": compact,
                      "compact_fits_one_packet": compact <= PACKET_BYTES})
    tot_full = sum(r["full"] for r in nodes)
    tot_compact = sum(r["compact"] for r in nodes)
    v = topo.num_nodes
    return {
        "nodes": nodes, "total_full": tot_full, "total_compact": tot_compact,
        # a central observer receives each node's snapshot once; local observers each receive all other nodes'
        "central_full": tot_full, "central_compact": tot_compact,
        "local_full": tot_full * (v - 1), "local_compact": tot_compact * (v - 1),
    }


def cmd_payload(args) -> int:
    try:
        topo = resolve_topology(args.topology, args.topology_seed)
    except TopologyError as exc:
        raise UsageError(str(exc)) from exc
    rep = payload_report(topo, args.n)
    modes = ("full", "compact") if args.mode == "both" else (args.mode,)
    for r in rep["nodes"]:
        parts = [f"{m}={r[m]} B" for m in modes]
        note = " (fits in one packet)" if r["compact_fits_one_packet"] and "compact" in modes else ""
        print(f"node {r['node']} |N|={r['neighbors']}: " + ", ".join(parts) + note)
    for m in modes:
        print(f"total {m}: {rep['total_' + m]} B; central observer {rep['central_' + m]} B; "
              f"local observers {rep['local_' + m]} B")
    if args.json:
        Path(args.json).write_text(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_verify_determinism(args) -> int:
    cfg, text = load_config(args.config)
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [Path(tmp) / "a", Path(tmp) / "b"]
        for d in dirs:
            d.mkdir()
            (d / "config.yaml").write_text(text)
            train_protocol(cfg.train, d, resume=False)
        a, b = (sorted(p.relative_to(d) for p in d.rglob("*") if p.is_file()) for d in dirs)
        if a != b:
            print(f"file sets differ: {sorted(set(a) ^ set(b))}")
            return 1
        diff = [str(p) for p in a if not filecmp.cmp(dirs[0] / p, dirs[1] / p, shallow=False)]
        if diff:
            print("non-identical outputs: " + ", ".join(diff))
            return 1
        print(f"deterministic: {len(a)} files byte-identical")
        if args.keep:
            shutil.copytree(dirs[0], args.keep, dirs_exist_ok=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loggia", description="Delay-aware learned routing experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="IL pretraining followed by PPO/MAPPO")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a shortest-path baseline")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", help="RIP, OSPF or EIGRP")
    e.add_argument("--topology", default="mini5")
    e.add_argument("--topology-seed", type=int, default=0)
    e.add_argument("--mode", default="Local-Multi")
    e.add_argument("--lambda-ac", type=float, nargs="+", default=[0.2])
    e.add_argument("--episodes", type=int, default=30)
    e.add_argument("--seed-base", type=int, default=10_000_000)
    e.add_argument("--intensity", type=float)
    e.add_argument("--calibration-seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=400)
    e.add_argument("--step-ms", type=float, default=5.0)
    e.add_argument("--synthetic-inference-ms", type=float)
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-topo", help="write a topology file")
    g.add_argument("--preset", default="mini5")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_topo)

    f = sub.add_parser("gen-traffic", help="write a flow schedule")
    f.add_argument("--topology", default="mini5")
    f.add_argument("--topology-seed", type=int, default=0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--intensity", type=float, default=1.0)
    f.add_argument("--horizon-ms", type=float, default=2000.0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_gen_traffic)

    s = sub.add_parser("payload", help="telemetry payload sizes per node")
    s.add_argument("--topology", default="mini5")
    s.add_argument("--topology-seed", type=int, default=0)
    s.add_argument("--mode", choices=("full", "compact", "both"), default="both")
    s.add_argument("--n", type=int, default=0)
    s.add_argument("--json")
    s.set_defaults(func=cmd_payload)

    d = sub.add_parser("verify-determinism", help="train twice and compare outputs byte by byte")
    d.add_argument("--config", required=True)
    d.add_argument("--keep", help="copy the first run's outputs here")
    d.set_defaults(func=cmd_verify_determinism)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    return 2


if __name__ == "__main__":
    sys.exit(main())
