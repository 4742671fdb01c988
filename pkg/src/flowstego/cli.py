"""Command-line entry point: ``flowstego <command> [--config FILE] [options]``.

Configs are YAML (or JSON) documents. Flags override file values, and the
environment variable FLOWSTEGO_SEED overrides the file's master seed (an
explicit --seed wins over both). Every command writes ``<command>.csv``,
``<command>.meta.json``, ``<command>.schema.json`` and the effective
``<command>.config.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import bench
from .channel import codec_roundtrip
from .core import (
    CapacityError,
    ConfigError,
    FlowStegoError,
    LatentVector,
    Message,
    StegoKey,
    TimeGrid,
    read_latent,
    write_latent,
    write_trajectory,
)
from .flows import VPScoreField
from .mapping import embed_message, extract_message, tolerance_radius
from .metrics import extraction_accuracy, straightness
from .samplers import SamplerKind, euler_forward

SCHEMA_VERSION = 1

SCHEMAS = {
    "embed": ["dim", "length", "sampler", "n_steps", "guidance", "r_tol", "straightness", "latent_sha256"],
    "extract": ["dim", "length", "sampler", "n_steps", "guidance", "bits_hex", "accuracy"],
    "train": ["net", "iteration", "loss"],
    "reflow": ["net", "iteration", "loss"],
    "bench-steps": bench.STEPS_COLUMNS,
    "bench-guidance": bench.GUIDANCE_COLUMNS,
    "bench-robustness": bench.ROBUSTNESS_COLUMNS,
    "security": bench.SECURITY_COLUMNS,
}

COLUMN_DOCS = {
    "acc_mean": "mean extraction accuracy 1 - hamming/L over trials",
    "acc_se": "standard error of acc_mean",
    "l2_mean": "mean Euclidean inversion error ||x0_hat - x0||",
    "l2_se": "standard error of l2_mean",
    "pcli_mean": "mean per-step gap between the velocity used on a step and the flow velocity at its end node",
    "p_e": "detection error (P_FA + P_MD) / 2 of the linear detector on the test split",
    "frechet_raw": "Frechet distance of Gaussian fits on raw latents (FID stand-in)",
    "energy_raw": "energy distance on raw latents",
    "r_tol": "tolerance radius: smallest |x0| over message-carrying coordinates",
    "straightness": "mean normalized deviation of the trajectory from its chord",
}


def _epilog(command):
    cols = SCHEMAS[command]
    lines = [f"CSV columns (schema v{SCHEMA_VERSION}): " + ", ".join(cols)]
    lines += [f"  {c}: {COLUMN_DOCS[c]}" for c in cols if c in COLUMN_DOCS]
    return "\n".join(lines)


def _number(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowstego", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, epilog=_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides FLOWSTEGO_SEED and the config)")
        p.add_argument("--out-dir", type=Path, help="output directory (config 'output_dir')")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set schedule.beta_max=8")
        p.add_argument("--unsafe-override", action="store_true", help="allow steps/guidance outside the menus")
        p.add_argument("--steps", type=int, help="Euler/DDIM steps N")
        p.add_argument("--guidance", type=float, help="guidance scale w")
        p.add_argument("--sampler", choices=[k.value for k in SamplerKind])
        p.add_argument("--trials", type=int)
        p.add_argument("--strict", action="store_true", help="exit with status 3 when a qualitative check fails")
        return p

    p = add("embed", "embed a message and write the stego latent x_T")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--message", help="message as a hex string")
    g.add_argument("--message-file", type=Path, help="raw bytes to embed")
    p.add_argument("--output", type=Path, required=True, help="stego latent file")
    p.add_argument("--trajectory", type=Path, help="optional trajectory dump")

    p = add("extract", "recover a message from a stego latent")
    p.add_argument("--input", type=Path, required=True, help="stego latent file")
    p.add_argument("--truth", help="ground-truth message hex, to report accuracy")

    add("train", "train conditional and unconditional 1-rectified flows on the config mixture")
    p = add("reflow", "retrain 1-RF checkpoints on their own couplings (2-rectified flow)")
    p.add_argument("--cond", type=Path, help="conditional 1-RF checkpoint")
    p.add_argument("--uncond", type=Path, help="unconditional 1-RF checkpoint")
    add("bench-steps", "extraction accuracy against the number of steps, per sampler")
    add("bench-guidance", "extraction accuracy against the guidance scale, per sampler")
    add("bench-robustness", "extraction accuracy under channel distortions and their combinations")
    add("security", "cover-vs-stego detection error and distribution distances")
    return parser


def load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def config_from_args(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _number(v)
    for name, key in [("seed", "seed"), ("steps", "steps"), ("guidance", "guidance"),
                      ("sampler", "sampler"), ("trials", "trials")]:
        if getattr(args, name) is not None:
            overrides[key] = getattr(args, name)
    if args.out_dir is not None:
        overrides["output_dir"] = str(args.out_dir)
    if args.unsafe_override:
        overrides["unsafe_override"] = True
    return bench.resolve_config(load_config(args.config), overrides, os.environ.get("FLOWSTEGO_SEED"))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_outputs(command, cfg, rows, meta) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cols = SCHEMAS[command]
    with open(out / f"{command}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    schema = {"schema_version": SCHEMA_VERSION, "command": command, "columns": cols,
              "descriptions": {c: COLUMN_DOCS[c] for c in cols if c in COLUMN_DOCS}}
    (out / f"{command}.schema.json").write_text(json.dumps(schema, indent=2) + "\n")
    (out / f"{command}.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    meta = {"schema_version": SCHEMA_VERSION, "version": __version__, **meta}
    (out / f"{command}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return out


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v)}")


# --- single-message commands ------------------------------------------------


def _message(args, cfg) -> Message:
    if args.message is not None:
        text = args.message
    else:
        text = args.message_file.read_bytes().hex()
    m = Message.from_hex(text)
    length = cfg["message"].get("length")
    if args.message is not None and length is not None and int(length) < m.length:
        m = Message(m.bits[: int(length)])
    return m


def _fields(cfg):
    return bench.build_rf_field(cfg), VPScoreField(bench.build_gmm(cfg), bench.build_schedule(cfg))


def cmd_embed(args, cfg):
    t0 = time.perf_counter()
    params = bench.mapping_params(cfg)
    m = _message(args, cfg)
    key = bench.master_key(cfg)
    x0 = embed_message(m, key, params)
    rf, vp = _fields(cfg)
    grid = TimeGrid(int(cfg["steps"]))
    seed_key = StegoKey.derive(key.key_bytes, "ddpm", grid.n_steps)
    traj, _ = bench.generate(x0.data, cfg["sampler"], rf, vp, grid, bench._label(cfg), float(cfg["guidance"]),
                             seed_key)
    codec = cfg["codec"]
    x_T = traj.end
    if codec.get("bits") is not None:
        x_T = codec_roundtrip(x_T, int(codec["bits"]), float(codec["lo"]), float(codec["hi"]))
    out = LatentVector(x_T, params.shape_hint)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_latent(args.output, out)
    if args.trajectory is not None:
        write_trajectory(args.trajectory, traj, params.shape_hint)
    report = {
        "dim": params.latent_dim,
        "length": m.length,
        "sampler": cfg["sampler"],
        "n_steps": grid.n_steps,
        "guidance": float(cfg["guidance"]),
        "r_tol": tolerance_radius(x0.data, key, params, m.length),
        "straightness": straightness(traj) if grid.n_steps >= 2 else 0.0,
        "latent_sha256": hashlib.sha256(args.output.read_bytes()).hexdigest(),
    }
    print(json.dumps(report), file=sys.stderr)
    return [report], {"wall_time_s": time.perf_counter() - t0}


def cmd_extract(args, cfg):
    t0 = time.perf_counter()
    params = bench.mapping_params(cfg)
    y = read_latent(args.input)
    if y.dim != params.latent_dim:
        raise CapacityError(f"latent file has dim {y.dim}, config expects {params.latent_dim}")
    rf, vp = _fields(cfg)
    grid = TimeGrid(int(cfg["steps"]))
    x_hat = bench.invert(y.data, cfg["sampler"], rf, vp, grid, bench._label(cfg), float(cfg["guidance"]))
    length = int(cfg["message"]["length"])
    if args.truth is not None:
        truth = Message.from_hex(args.truth)
        length = min(length, truth.length)
    m_hat = extract_message(x_hat, bench.master_key(cfg), params, length)
    acc = None
    if args.truth is not None:
        acc = extraction_accuracy(Message(truth.bits[:length]), m_hat)
    print(m_hat.to_hex())
    if acc is not None:
        print(json.dumps({"accuracy": acc}), file=sys.stderr)
    row = {"dim": params.latent_dim, "length": length, "sampler": cfg["sampler"], "n_steps": grid.n_steps,
           "guidance": float(cfg["guidance"]), "bits_hex": m_hat.to_hex(), "accuracy": acc}
    return [row], {"wall_time_s": time.perf_counter() - t0}


# --- training ----------------------------------------------------------------


def _train_cfg(cfg, reflow=False):
    from .nn import TrainConfig

    t = cfg["train"]
    return TrainConfig(
        batch_size=int(t["batch_size"]),
        n_iters=int(t["n_iters"]),
        learning_rate=float(t["reflow_learning_rate"] if reflow else t["learning_rate"]),
        optimizer=t["optimizer"],
        seed=int(t["seed"]) + (1 if reflow else 0),
        hidden=tuple(int(h) for h in t["hidden"]),
    )


def _samplers(gmm):
    def prior(n, rng):
        return rng.standard_normal((n, gmm.dim))

    def labels(n, rng):
        return rng.choice(np.asarray(gmm.labels), size=n, p=gmm.weights)

    def data_uncond(n, rng):
        return gmm.sample(n, rng)

    def data_cond(n, rng):
        lab = labels(n, rng)
        x = np.empty((n, gmm.dim))
        for c in gmm.classes:
            sel = lab == c
            x[sel] = gmm.sample(int(sel.sum()), rng, cond=c)
        return x, lab

    return prior, labels, data_uncond, data_cond


def train_pair(cfg, log=None):
    """Train the unconditional and (when labels exist) conditional 1-RF nets."""
    from .nn import independent_pairs, train_rectified_flow

    gmm = bench.build_gmm(cfg)
    prior, _, data_u, data_c = _samplers(gmm)
    tc = _train_cfg(cfg)
    nets = {"uncond": train_rectified_flow(independent_pairs(prior, data_u), tc, dim=gmm.dim)}
    if gmm.labels is not None:
        nets["cond"] = train_rectified_flow(independent_pairs(prior, data_c), tc, dim=gmm.dim,
                                            n_classes=max(gmm.classes) + 1)
    return nets


def reflow_pair(cfg, nets1):
    from .nn import reflow

    gmm = bench.build_gmm(cfg)
    prior, labels, _, _ = _samplers(gmm)
    tc = _train_cfg(cfg, reflow=True)
    grid = TimeGrid(int(cfg["train"]["reflow_steps"]))
    n_pairs = int(cfg["train"]["n_pairs"])
    return {name: reflow(net, prior, grid, tc, n_pairs, label_sampler=labels if net.n_classes else None)
            for name, net in nets1.items()}


def _history_rows(nets):
    return [{"net": name, "iteration": it, "loss": loss} for name, net in nets.items() for it, loss in net.history]


def cmd_train(args, cfg):
    from .nn import save_checkpoint

    t0 = time.perf_counter()
    nets = train_pair(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, net in nets.items():
        paths[name] = str(out / f"{name}_1rf.ck")
        save_checkpoint(paths[name], net)
    return _history_rows(nets), {"wall_time_s": time.perf_counter() - t0, "checkpoints": paths}


def cmd_reflow(args, cfg):
    from .metrics import straightness as straight
    from .nn import MlpField, load_checkpoint, save_checkpoint

    t0 = time.perf_counter()
    out = Path(cfg["output_dir"])
    field = cfg["field"]
    cond = args.cond or field.get("cond") or out / "cond_1rf.ck"
    uncond = args.uncond or field.get("uncond") or out / "uncond_1rf.ck"
    nets1 = {"uncond": load_checkpoint(uncond)}
    if Path(cond).exists():
        nets1["cond"] = load_checkpoint(cond)
    nets2 = reflow_pair(cfg, nets1)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, net in nets2.items():
        paths[name] = str(out / f"{name}_2rf.ck")
        save_checkpoint(paths[name], net)
    # paired straightness on shared starts, unconditional nets
    rng = np.random.default_rng(cfg["seed"])
    x0 = rng.standard_normal((256, nets1["uncond"].dim))
    grid = TimeGrid(20)
    s1 = straight(euler_forward(x0, MlpField(nets1["uncond"]), grid))
    s2 = straight(euler_forward(x0, MlpField(nets2["uncond"]), grid))
    meta = {"wall_time_s": time.perf_counter() - t0, "checkpoints": paths,
            "straightness_median": {"1rf": float(np.median(s1)), "2rf": float(np.median(s2))}}
    return _history_rows(nets2), meta


COMMANDS = {
    "embed": cmd_embed,
    "extract": cmd_extract,
    "train": cmd_train,
    "reflow": cmd_reflow,
    "bench-steps": lambda a, c: bench.run_bench_steps(c),
    "bench-guidance": lambda a, c: bench.run_bench_guidance(c),
    "bench-robustness": lambda a, c: bench.run_bench_robustness(c),
    "security": lambda a, c: bench.run_security(c),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        rows, meta = COMMANDS[args.command](args, cfg)
        out = write_outputs(args.command, cfg, rows, meta)
    except (FlowStegoError, ValueError, OSError) as exc:
        print(f"flowstego {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    checks = meta.get("checks", {})
    failed = [k for k, v in checks.items() if v is False]
    for k in failed:
        print(f"check failed: {k}", file=sys.stderr)
    print(f"wrote {out / (args.command + '.csv')}", file=sys.stderr)
    if failed and args.strict:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
