"""Experiment configuration and the benchmark drivers behind the CLI.

A config is a plain nested dict (loaded from YAML or JSON). ``resolve_config``
fills defaults, applies overrides and validates menus. Each ``run_*`` function
returns ``(rows, meta)``: CSV rows that depend only on the config and seed, and
a metadata dict that also carries wall times and the qualitative checks.

Trials are processed as one vectorized batch. Trial ``i`` draws its key and
message from ``(master key, i)``, so results never depend on evaluation order.
"""

from __future__ import annotations

import copy
import time

import numpy as np

from .channel import ChannelSpec, apply_channel, codec_roundtrip, combination_parts, robustness_presets
from .core import ConfigError, Message, StegoKey, TimeGrid, keyed_rng
from .flows import (
    ConstantField,
    GaussianEndpoints,
    GmmSpec,
    LinearField,
    RFGmmField,
    VelocityField,
    VPSchedule,
    VPScoreField,
    rf_gaussian_field,
)
from .mapping import MappingParams, embed_message, extract_message, keyed_normals
from .metrics import detection_error, energy_distance, extraction_accuracy, frechet_distance, inversion_error
from .samplers import (
    SamplerKind,
    ddim_inverse,
    ddpm_forward,
    euler_forward,
    euler_inverse,
    pcli_residual,
)

STEP_MENU = (10, 20, 30, 40, 50)
GUIDANCE_MENU = (1.0, 1.25, 1.5, 1.75, 2.0)

# two offset, tight classes: curved enough that DDIM inversion loses bits
DEFAULT_GMM = {
    "weights": [0.5, 0.5],
    "means": [[3.0, 2.0], [2.6, 2.5]],
    "stds": [0.1, 0.1],
    "labels": [0, 1],
}

DEFAULTS = {
    "seed": None,
    "key": None,
    "latent": {"dim": 256, "shape": [16, 16]},
    "message": {"length": 64},
    "label": 0,
    "steps": 20,
    "guidance": 1.25,
    "sampler": "euler_rf",
    "field": {"kind": "rf_gmm"},
    "gmm": DEFAULT_GMM,
    "schedule": {"beta_min": 0.1, "beta_max": 8.0, "eps": 1e-3},
    "codec": {"bits": None, "lo": -8.0, "hi": 8.0},
    "channel": [],
    "trials": 256,
    "output_dir": "out",
    "unsafe_override": False,
    "bench": {
        "samplers": ["euler_rf", "ddim", "ddpm"],
        "steps": list(STEP_MENU),
        "guidance": list(GUIDANCE_MENU),
        "robustness": {"quant_bits": 6, "noise": 0.05, "median": 3},
    },
    "security": {"n_per_class": 2500, "split": [8, 1, 1], "mapping": "sign", "stage": "x0"},
    "train": {
        "n_iters": 10000,
        "batch_size": 512,
        "learning_rate": 3e-3,
        "reflow_learning_rate": 1e-3,
        "optimizer": "adam",
        "hidden": [128, 128],
        "seed": 0,
        "n_pairs": 50000,
        "reflow_steps": 100,
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def resolve_config(file_cfg: dict | None, overrides: dict | None = None, env_seed: str | None = None) -> dict:
    """Defaults < config file < FLOWSTEGO_SEED < explicit overrides."""
    cfg = _merge(DEFAULTS, file_cfg or {})
    if env_seed not in (None, ""):
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"FLOWSTEGO_SEED must be an integer, got {env_seed!r}") from exc
    for k, v in (overrides or {}).items():
        set_path(cfg, k, v)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg.get("seed") is None:
        raise ConfigError("a master seed is required (config 'seed', --seed or FLOWSTEGO_SEED)")
    cfg["seed"] = int(cfg["seed"])
    dim = int(cfg["latent"]["dim"])
    shape = cfg["latent"].get("shape")
    if shape is not None and int(shape[0]) * int(shape[1]) != dim:
        raise ConfigError(f"latent shape {shape} does not match dim {dim}")
    if int(cfg["trials"]) < 2:
        raise ConfigError("at least two trials are needed for a standard error")
    SamplerKind(cfg["sampler"])
    for s in cfg["bench"]["samplers"]:
        SamplerKind(s)
    if cfg.get("unsafe_override"):
        return
    steps = [cfg["steps"]] + list(cfg["bench"]["steps"])
    if any(int(n) not in STEP_MENU for n in steps):
        raise ConfigError(f"steps must come from {STEP_MENU} (use --unsafe-override to leave the menu)")
    ws = [cfg["guidance"]] + list(cfg["bench"]["guidance"])
    if any(float(w) not in GUIDANCE_MENU for w in ws):
        raise ConfigError(f"guidance must come from {GUIDANCE_MENU} (use --unsafe-override to leave the menu)")


# --- shared side information ------------------------------------------------


def master_key(cfg: dict) -> StegoKey:
    if cfg.get("key"):
        return StegoKey(bytes.fromhex(cfg["key"]))
    return StegoKey.derive("master", cfg["seed"])


def trial_key(master: StegoKey, i: int) -> StegoKey:
    return StegoKey.derive(master.key_bytes, "trial", i)


def mapping_params(cfg: dict) -> MappingParams:
    shape = cfg["latent"].get("shape")
    return MappingParams(int(cfg["latent"]["dim"]), shape_hint=None if shape is None else tuple(shape))


def trial_messages(cfg: dict, n: int | None = None):
    """Keys, message bits ``(n, L)`` and embedded latents ``(n, d)`` for ``n`` trials."""
    n = int(cfg["trials"]) if n is None else n
    params = mapping_params(cfg)
    length = int(cfg["message"]["length"])
    master = master_key(cfg)
    keys, bits, x0 = [], np.empty((n, length), np.uint8), np.empty((n, params.latent_dim))
    for i in range(n):
        k = trial_key(master, i)
        bits[i] = keyed_rng(k.with_domain("msg")).integers(0, 2, length)
        x0[i] = embed_message(Message(bits[i]), k, params).data
        keys.append(k)
    return keys, bits, x0


def decode_trials(keys, x_hat, cfg: dict) -> np.ndarray:
    params = mapping_params(cfg)
    length = int(cfg["message"]["length"])
    return np.stack([extract_message(x, k, params, length).bits for k, x in zip(keys, x_hat)])


# --- fields -------------------------------------------------------------------


class _FixedCondition(VelocityField):
    """Wraps a field with its condition baked in (a plain conditional run)."""

    def __init__(self, field, cond):
        self.field, self.cond = field, cond
        self.dim = field.dim
        self.lipschitz_bound = field.lipschitz_bound

    def __call__(self, x, t, cond=None):
        return self.field(x, t, self.cond)

    def eps(self, x, s, cond=None):
        return self.field.eps(x, s, self.cond)


def build_gmm(cfg: dict) -> GmmSpec:
    return GmmSpec.from_dict(cfg["gmm"])


def build_schedule(cfg: dict) -> VPSchedule:
    s = cfg["schedule"]
    return VPSchedule(float(s["beta_min"]), float(s["beta_max"]), float(s.get("eps", 1e-3)))


def build_rf_field(cfg: dict) -> VelocityField:
    from .nn import MlpField, load_checkpoint

    spec = cfg["field"]
    kind = spec.get("kind")
    if kind == "constant":
        value = np.atleast_1d(np.asarray(spec.get("value", 0.0), dtype=np.float64))
        return ConstantField(value)
    if kind == "linear":
        return LinearField(float(spec.get("a", 1.0)))
    if kind == "rf_gaussian":
        ep = GaussianEndpoints(*(np.atleast_1d(np.asarray(spec[k], float)) for k in ("mu0", "sigma0", "mu1", "sigma1")))
        return rf_gaussian_field(ep)
    if kind == "rf_gmm":
        return RFGmmField(build_gmm(cfg))
    if kind == "checkpoint":
        if "cond" not in spec:
            raise ConfigError("checkpoint field needs a 'cond' path")
        cond = load_checkpoint(spec["cond"])
        uncond = load_checkpoint(spec["uncond"]) if spec.get("uncond") else None
        return MlpField(cond, uncond)
    raise ConfigError(f"unknown field kind {kind!r}")


def _label(cfg):
    return None if cfg.get("label") is None else int(cfg["label"])


# --- pipeline -------------------------------------------------------------------


def generate(x0, kind, rf, vp, grid, cond, w, seed_key):
    """Sender side: returns the forward trajectory and its mean PCLI residual per trial."""
    kind = SamplerKind(kind)
    if kind is SamplerKind.EULER_RF:
        traj = euler_forward(x0, rf, grid, cond, w)
        res = pcli_residual(traj, rf, cond, w)
    else:
        eta = 1.0 if kind is SamplerKind.DDPM else 0.0
        traj = ddpm_forward(x0, vp, vp.schedule, grid, seed=seed_key, cond=cond, w=w, eta=eta)
        res = pcli_residual(traj, vp, cond, w)
    return traj, res.mean


def invert(x_T, kind, rf, vp, grid, cond, w):
    """Receiver side: DDIM inversion serves both diffusion samplers."""
    if SamplerKind(kind) is SamplerKind.EULER_RF:
        return euler_inverse(x_T, rf, grid, cond, w).end
    return ddim_inverse(x_T, vp, vp.schedule, grid, cond, w).end


def channel_pass(x_T, cfg: dict, spec: ChannelSpec | None = None):
    codec = cfg["codec"]
    y = x_T
    if codec.get("bits") is not None:
        y = codec_roundtrip(y, int(codec["bits"]), float(codec["lo"]), float(codec["hi"]))
    spec = ChannelSpec.from_config(cfg["channel"], seed=cfg["seed"]) if spec is None else spec
    shape = cfg["latent"].get("shape")
    return apply_channel(y, spec, shape_hint=None if shape is None else tuple(shape))


def _summary(acc, err, res=None):
    n = len(acc)
    row = {
        "acc_mean": float(np.mean(acc)),
        "acc_se": float(np.std(acc, ddof=1) / np.sqrt(n)),
        "l2_mean": float(np.mean(err)),
        "l2_se": float(np.std(err, ddof=1) / np.sqrt(n)),
    }
    if res is not None:
        row["pcli_mean"] = float(np.mean(res))
    return row


def run_cell(cfg, material, kind, n_steps, w, rf, vp, spec=None):
    keys, bits, x0 = material
    grid = TimeGrid(int(n_steps))
    cond = _label(cfg)
    seed_key = StegoKey.derive(master_key(cfg).key_bytes, "ddpm", int(n_steps))
    traj, res = generate(x0, kind, rf, vp, grid, cond, float(w), seed_key)
    y = channel_pass(traj.end, cfg, spec)
    x_hat = invert(y, kind, rf, vp, grid, cond, float(w))
    acc = extraction_accuracy(bits, decode_trials(keys, x_hat, cfg))
    err = inversion_error(x0, x_hat).l2
    return acc, err, res, x_hat


def non_increasing(means, ses) -> bool:
    """Each step may rise by at most the larger standard error of the pair."""
    return all(means[i + 1] <= means[i] + max(ses[i], ses[i + 1]) for i in range(len(means) - 1))


STEPS_COLUMNS = ["sampler", "n_steps", "guidance", "label", "trials", "acc_mean", "acc_se", "l2_mean", "l2_se",
                 "pcli_mean"]


def run_bench_steps(cfg: dict):
    t0 = time.perf_counter()
    rf, vp = build_rf_field(cfg), VPScoreField(build_gmm(cfg), build_schedule(cfg))
    material = trial_messages(cfg)
    rows, timing = [], {}
    w = float(cfg["guidance"])
    for kind in cfg["bench"]["samplers"]:
        for n in cfg["bench"]["steps"]:
            t1 = time.perf_counter()
            acc, err, res, _ = run_cell(cfg, material, kind, n, w, rf, vp)
            timing[f"{kind}/{n}"] = time.perf_counter() - t1
            rows.append({"sampler": kind, "n_steps": int(n), "guidance": w, "label": _label(cfg),
                         "trials": len(acc), **_summary(acc, err, res)})
    meta = {"wall_time_s": time.perf_counter() - t0, "cell_wall_time_s": timing, "checks": steps_checks(rows)}
    return rows, meta


def steps_checks(rows) -> dict:
    by = {}
    for r in rows:
        by.setdefault(r["sampler"], {})[r["n_steps"]] = r
    out = {}
    if {"euler_rf", "ddim", "ddpm"} <= set(by):
        ns = sorted(set(by["euler_rf"]) & set(by["ddim"]) & set(by["ddpm"]))
        out["ordering_rf_ddim_ddpm"] = all(
            by["euler_rf"][n]["acc_mean"] > by["ddim"][n]["acc_mean"] > by["ddpm"][n]["acc_mean"] for n in ns)
        gaps = [by["euler_rf"][n]["acc_mean"] - by["ddim"][n]["acc_mean"] for n in ns]
        out["min_rf_ddim_gap"] = float(min(gaps)) if gaps else None
        out["rf_ddim_gap_ge_5pp"] = bool(gaps) and min(gaps) >= 0.05
    if "euler_rf" in by:
        ns = sorted(by["euler_rf"])
        rf = [by["euler_rf"][n] for n in ns]
        out["rf_non_increasing_in_steps"] = non_increasing([r["acc_mean"] for r in rf], [r["acc_se"] for r in rf])
    return out


GUIDANCE_COLUMNS = ["sampler", "guidance", "n_steps", "label", "trials", "acc_mean", "acc_se", "l2_mean", "l2_se",
                    "pcli_mean"]


def run_bench_guidance(cfg: dict):
    t0 = time.perf_counter()
    rf, vp = build_rf_field(cfg), VPScoreField(build_gmm(cfg), build_schedule(cfg))
    material = trial_messages(cfg)
    n = int(cfg["steps"])
    cond = _label(cfg)
    rows, identical = [], {}
    for kind in cfg["bench"]["samplers"]:
        for w in cfg["bench"]["guidance"]:
            acc, err, res, x_hat = run_cell(cfg, material, kind, n, w, rf, vp)
            rows.append({"sampler": kind, "guidance": float(w), "n_steps": n, "label": cond,
                         "trials": len(acc), **_summary(acc, err, res)})
            if float(w) == 1.0:
                # plain conditional run: the condition is baked into the field
                pure = {"label": None}
                cfg_pure = {**cfg, **pure}
                rf_c, vp_c = _FixedCondition(rf, cond), _FixedCondition(vp, cond)
                vp_c.schedule = vp.schedule
                *_, x_pure = run_cell(cfg_pure, material, kind, n, 1.0, rf_c, vp_c)
                identical[kind] = bool(np.array_equal(x_hat, x_pure))
    meta = {"wall_time_s": time.perf_counter() - t0, "checks": guidance_checks(rows, identical)}
    return rows, meta


def guidance_checks(rows, identical) -> dict:
    out = {}
    for kind in dict.fromkeys(r["sampler"] for r in rows):
        rs = sorted((r for r in rows if r["sampler"] == kind), key=lambda r: r["guidance"])
        out[f"{kind}_non_increasing_in_w"] = non_increasing([r["acc_mean"] for r in rs], [r["acc_se"] for r in rs])
        if kind in identical:
            out[f"{kind}_w1_bit_identical"] = identical[kind]
    return out


ROBUSTNESS_COLUMNS = ["preset", "distortions", "sampler", "n_steps", "guidance", "trials", "acc_mean", "acc_se",
                      "l2_mean", "l2_se"]


def run_bench_robustness(cfg: dict):
    t0 = time.perf_counter()
    rf, vp = build_rf_field(cfg), VPScoreField(build_gmm(cfg), build_schedule(cfg))
    material = trial_messages(cfg)
    rob = cfg["bench"]["robustness"]
    presets = robustness_presets(int(rob["quant_bits"]), float(rob["noise"]), int(rob["median"]))
    kind, n, w = cfg["sampler"], int(cfg["steps"]), float(cfg["guidance"])
    rows = []
    for name, dists in presets.items():
        spec = ChannelSpec(dists, seed=cfg["seed"])
        acc, err, _, _ = run_cell(cfg, material, kind, n, w, rf, vp, spec)
        rows.append({"preset": name, "distortions": spec.label(), "sampler": kind, "n_steps": n, "guidance": w,
                     "trials": len(acc), **_summary(acc, err)})
    parts = combination_parts(int(rob["quant_bits"]), float(rob["noise"]), int(rob["median"]))
    meta = {"wall_time_s": time.perf_counter() - t0, "checks": robustness_checks(rows, parts)}
    return rows, meta


def robustness_checks(rows, parts) -> dict:
    by = {r["preset"]: r for r in rows}
    out = {}
    noise = sorted((k for k in by if k.startswith("noise_")), key=lambda k: float(k.split("_")[1]))
    chain = ["lossless"] + noise
    out["noise_non_increasing"] = all(by[chain[i + 1]]["acc_mean"] <= by[chain[i]]["acc_mean"]
                                      for i in range(len(chain) - 1))
    for combo, singles in parts.items():
        floor = min(by[s]["acc_mean"] for s in singles)
        out[f"{combo}_le_min_constituent"] = by[combo]["acc_mean"] <= floor + by[combo]["acc_se"]
    out["lossless_accuracy"] = by["lossless"]["acc_mean"]
    return out


SECURITY_COLUMNS = ["mapping", "stage", "n_cover", "n_stego", "split", "p_e", "p_fa", "p_md", "frechet_raw",
                    "frechet_regularized", "energy_raw"]


def security_sets(cfg: dict, n: int):
    """Cover latents (keyed noise) and stego latents (keyed embeddings), fresh key per sample."""
    sec = cfg["security"]
    params = mapping_params(cfg)
    length = int(cfg["message"]["length"])
    master = master_key(cfg)
    cover = np.empty((n, params.latent_dim))
    stego = np.empty((n, params.latent_dim))
    for i in range(n):
        kc = StegoKey.derive(master.key_bytes, "cover", i)
        cover[i] = keyed_normals(kc, params.latent_dim)
        ks = StegoKey.derive(master.key_bytes, "stego", i)
        if sec["mapping"] == "sign":
            bits = keyed_rng(ks.with_domain("msg")).integers(0, 2, length)
            stego[i] = embed_message(Message(bits), ks, params).data
        elif sec["mapping"] == "broken":
            # negative control: magnitudes only, every coordinate positive
            stego[i] = np.abs(keyed_normals(ks, params.latent_dim))
        elif sec["mapping"] == "none":
            stego[i] = keyed_normals(ks, params.latent_dim)
        else:
            raise ConfigError(f"unknown security mapping {sec['mapping']!r}")
    if sec.get("stage", "x0") == "xT":
        rf = build_rf_field(cfg)
        grid = TimeGrid(int(cfg["steps"]))
        cover = euler_forward(cover, rf, grid, _label(cfg), float(cfg["guidance"])).end
        stego = euler_forward(stego, rf, grid, _label(cfg), float(cfg["guidance"])).end
    return cover, stego


def run_security(cfg: dict):
    t0 = time.perf_counter()
    sec = cfg["security"]
    n = int(sec["n_per_class"])
    cover, stego = security_sets(cfg, n)
    det = detection_error(cover, stego, tuple(sec["split"]), seed=cfg["seed"])
    fd = frechet_distance(cover, stego)
    ed = energy_distance(cover, stego)
    row = {"mapping": sec["mapping"], "stage": sec.get("stage", "x0"), "n_cover": n, "n_stego": n,
           "split": ":".join(str(int(s)) for s in sec["split"]), "p_e": det.p_e, "p_fa": det.p_fa,
           "p_md": det.p_md, "frechet_raw": fd.value, "frechet_regularized": fd.regularized,
           "energy_raw": ed.value}
    meta = {"wall_time_s": time.perf_counter() - t0,
            "checks": {"p_e_in_chance_band": 0.45 <= det.p_e <= 0.55},
            "note": "frechet_raw and energy_raw are raw-latent stand-ins for FID"}
    return [row], meta
