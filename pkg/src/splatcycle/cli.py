"""Command-line entry point: gen-data, train, sample, eval, turntable.

Every command reads a key=value config (``--config``); any key may also be
given as a flag, and flags win. Exit codes: 0 success, 2 usage or config
error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Optional

import torch

from . import __version__
from .cameras import orbit_camera
from .dataset import (FOV_DEG, ORBIT_RADIUS, TOKEN_ID, PerturbConfig, list_scenes, load_scene, write_scene)
from .io import (FormatError, load_png, read_ftc, read_kv, read_ply, save_png, tensor_text, text_tensor, write_ftc,
                 write_kv, write_ply)
from .metrics import config_hash, consistency_error, evaluate_views
from .pipeline import (IMAGE_TO_3D, LEARNED_MULTIVIEW, ORACLE_PERTURBED, PURE_NOISE, TEXT_TO_3D, CycleModel,
                       ModelConfig, PriorProvider, TrainConfig, fit, make_optimizer, pretrain_denoiser, sample,
                       single_pass_reconstruction)
from .scheduler import GuidanceConfig
from .splat import GaussianCloud, render_batch

log = logging.getLogger("splatcycle")


class ConfigError(Exception):
    """Bad usage or configuration; maps to exit code 2."""


# ---- config schema ------------------------------------------------------------

@dataclass(frozen=True)
class Key:
    kind: Callable[[str], Any]
    default: Any = None
    required: bool = False
    help: str = ""


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


MODEL_KEYS = {
    "resolution": Key(int, 64, help="image side in pixels (multiple of 4)"),
    "denoiser_width": Key(int, 64),
    "reconstructor_width": Key(int, 64),
    "num_steps": Key(int, 1000, help="diffusion length T"),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "gen-data": {
        "out": Key(str, required=True, help="dataset directory"),
        "n_scenes": Key(int, required=True),
        "seed": Key(int, required=True),
        "resolution": Key(int, 64),
        "png": Key(_bool, False, help="also write 8-bit PNG previews"),
    },
    "train": {
        "data": Key(str, required=True, help="dataset directory"),
        "out": Key(str, required=True, help="run directory"),
        "seed": Key(int, 0),
        "steps": Key(int, 0, help="joint steps; 0 means epochs * scenes / batch_size"),
        "epochs": Key(int, 30),
        "batch_size": Key(int, 1),
        "learning_rate": Key(float, 1e-4),
        "weight_decay": Key(float, 0.05),
        "grad_clip_norm": Key(float, 1.0),
        "lambda_perceptual": Key(float, 0.5),
        "prompt_dropout": Key(float, 0.3),
        "reference_noisy_prob": Key(float, 0.3),
        "frozen_2d": Key(_bool, True),
        "freeze_gates": Key(_bool, False, help="ablation: keep feature-interaction gates closed"),
        "pretrain_steps": Key(int, 0, help="epsilon-prediction steps for the 2D model before joint training"),
        "pretrain_lr": Key(float, 1e-3),
        "denoiser_checkpoint": Key(str, "", help="checkpoint directory to take the 2D model from"),
        "checkpoint_every": Key(int, 100),
        "resume": Key(str, "", help="checkpoint directory to continue from"),
        "denoiser_width": MODEL_KEYS["denoiser_width"],
        "reconstructor_width": MODEL_KEYS["reconstructor_width"],
        "num_steps": MODEL_KEYS["num_steps"],
    },
    "sample": {
        "checkpoint": Key(str, required=True),
        "out": Key(str, required=True),
        "mode": Key(str, IMAGE_TO_3D, help="image_to_3d or text_to_3d"),
        "input": Key(str, "", help="reference PNG"),
        "scene": Key(str, "", help="dataset scene directory supplying cameras, reference and oracle prior"),
        "prior": Key(str, ORACLE_PERTURBED, help="oracle_perturbed, learned_multiview or pure_noise"),
        "hue": Key(float, 0.2),
        "brightness": Key(float, 0.0),
        "warp_px": Key(float, 2.0),
        "texture_noise": Key(float, 0.0),
        "steps": Key(int, 30),
        "cfg_scale": Key(float, 3.0),
        "seed": Key(int, 0),
        "tokens": Key(str, "", help="comma-separated token names or ids"),
        "per_view_prompts": Key(str, "", help="view:tok,tok;view:tok,..."),
        "save_steps": Key(_bool, False, help="write per-step x0 and re-render images"),
        "baseline": Key(_bool, False, help="also write the single-pass reconstruction of the prior"),
        "resolution": Key(int, 0, help="must match the checkpoint when given"),
        "denoiser_width": Key(int, 0, help="must match the checkpoint when given"),
        "reconstructor_width": Key(int, 0, help="must match the checkpoint when given"),
    },
    "eval": {
        "cloud": Key(str, required=True, help="cloud .ftc or .ply"),
        "scene": Key(str, required=True),
        "out": Key(str, required=True),
        "stem": Key(str, "eval"),
        "seed": Key(int, 0),
        "figures": Key(_bool, True),
    },
    "turntable": {
        "cloud": Key(str, required=True),
        "out": Key(str, required=True),
        "n_frames": Key(int, 36),
        "elevation": Key(float, 15.0),
        "radius": Key(float, ORBIT_RADIUS),
        "fov_deg": Key(float, FOV_DEG),
        "resolution": Key(int, 64),
        "seed": Key(int, 0),
    },
}


def resolve_config(command: str, file_values: dict[str, str], flag_values: dict[str, Any]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    for key in file_values:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for {command}")
    merged: dict[str, Any] = {}
    for key, entry in schema.items():
        raw = flag_values.get(key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            if entry.required:
                raise ConfigError(f"missing required key {key!r}")
            merged[key] = entry.default
            continue
        try:
            merged[key] = entry.kind(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return merged


# ---- manifest ---------------------------------------------------------------

def child_seed(seed: int, name: str) -> int:
    """Named child seed; every stage draws from its own stream."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"{__version__}-unknown"


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict, inputs: list, outputs: list,
                   started: float, extra: Optional[dict] = None) -> Path:
    values = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.get("seed", ""),
        "child_seeds": ",".join(f"{k}:{v}" for k, v in seeds.items()),
        "inputs": ",".join(str(p) for p in inputs),
        "outputs": ",".join(str(p) for p in outputs),
        "version": version_string(),
        "wall_clock_s": f"{time.time() - started:.3f}",
    }
    values.update(extra or {})
    path = Path(out_dir) / "manifest.txt"
    write_kv(path, values)
    return path


# ---- checkpoints ----------------------------------------------------------------

def _module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def save_checkpoint(directory: Path, model: CycleModel, optimizer=None, step: int = 0,
                    gen: Optional[torch.Generator] = None, train_config: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg_text = text_tensor("".join(f"{k}={v}\n" for k, v in asdict(model.config).items()))
    write_ftc(d / "denoiser.ftc", {"__config__": cfg_text, **_module_tensors("denoiser", model.denoiser)})
    write_ftc(d / "reconstructor.ftc", {"__config__": cfg_text, **_module_tensors("reconstructor", model.reconstructor)})
    state = {"step": torch.tensor(step, dtype=torch.int64)}
    if gen is not None:
        state["rng"] = gen.get_state()
    if optimizer is not None:
        for i, st in optimizer.state_dict()["state"].items():
            for k, v in st.items():
                state[f"optim.{i}.{k}"] = torch.as_tensor(v)
    if train_config is not None:
        state["__train_config__"] = text_tensor("".join(f"{k}={v}\n" for k, v in train_config.items()))
    write_ftc(d / "state.ftc", state)
    return d


def _model_config_from(t: dict) -> ModelConfig:
    from .io import parse_kv

    raw = parse_kv(tensor_text(t["__config__"]))
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name in raw:
            kwargs[f.name] = type(f.default)(raw[f.name])
    return ModelConfig(**kwargs)


def load_checkpoint(directory: Path, expect: Optional[dict] = None) -> CycleModel:
    d = Path(directory)
    try:
        den = read_ftc(d / "denoiser.ftc")
        rec = read_ftc(d / "reconstructor.ftc")
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {d} is missing {Path(exc.filename).name}") from None
    cfg = _model_config_from(den)
    if _model_config_from(rec) != cfg:
        raise ConfigError("denoiser and reconstructor checkpoints disagree on the model config")
    for key, value in (expect or {}).items():
        if value and getattr(cfg, key) != value:
            raise ConfigError(f"checkpoint/config mismatch: {key}={getattr(cfg, key)} in checkpoint, {value} in config")
    model = CycleModel(cfg)
    _load_into(model.denoiser, den, "denoiser")
    _load_into(model.reconstructor, rec, "reconstructor")
    return model


def _load_into(module: torch.nn.Module, tensors: dict, prefix: str):
    sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing, unexpected = module.load_state_dict(sd, strict=False)
    if missing or unexpected:
        raise ConfigError(f"{prefix} checkpoint does not match the architecture "
                          f"(missing {list(missing)[:3]}, unexpected {list(unexpected)[:3]})")


def _restore_state(directory: Path, optimizer, gen: torch.Generator) -> int:
    state = read_ftc(Path(directory) / "state.ftc")
    if "rng" in state:
        gen.set_state(state["rng"])
    sd = optimizer.state_dict()
    per_param: dict[int, dict] = {}
    for key, value in state.items():
        if key.startswith("optim."):
            _, idx, name = key.split(".", 2)
            per_param.setdefault(int(idx), {})[name] = value
    sd["state"] = per_param
    optimizer.load_state_dict(sd)
    return int(state["step"])


def read_cloud(path) -> GaussianCloud:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"cloud file {path} does not exist")
    if path.suffix == ".ply":
        return read_ply(path)
    t = read_ftc(path)
    try:
        return GaussianCloud(**{k: t[k] for k in GaussianCloud.ATTRIBUTES})
    except KeyError as exc:
        raise FormatError(f"{path} lacks cloud tensor {exc}") from None


def write_cloud(path, cloud: GaussianCloud):
    write_ftc(path, {k: v.detach().float() for k, v in cloud.tensors().items()})


# ---- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    started = time.time()
    out = Path(cfg["out"])
    if cfg["n_scenes"] < 0:
        raise ConfigError("n_scenes must be nonnegative")
    if cfg["resolution"] % 4:
        raise ConfigError("resolution must be a multiple of 4")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create {out}: {exc}") from None
    base = child_seed(cfg["seed"], "scenes")
    written = []
    for i in range(cfg["n_scenes"]):
        d = write_scene(out, base + i, (cfg["resolution"], cfg["resolution"]), png=cfg["png"])
        written.append(d.name)
    write_manifest(out, "gen-data", cfg, {"scenes": base}, [], written, started, {"n_scenes": len(written)})
    print(f"wrote {len(written)} scenes to {out}")
    return 0


def _load_dataset(root: Path):
    samples, skipped = [], []
    if not root.is_dir():
        raise ConfigError(f"dataset {root} does not exist")
    for d in list_scenes(root):
        try:
            samples.append(load_scene(d).sample())
        except (FormatError, KeyError, ValueError, OSError) as exc:
            log.warning("skipping corrupted scene %s: %s", d.name, exc)
            skipped.append(d.name)
    return samples, skipped


def cmd_train(cfg: dict) -> int:
    started = time.time()
    samples, skipped = _load_dataset(Path(cfg["data"]))
    if not samples:
        raise RuntimeError("no readable scenes in the dataset")
    res = samples[0].input_images.shape[-1]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(
        learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"], epochs=cfg["epochs"],
        grad_clip_norm=cfg["grad_clip_norm"], lambda_perceptual=cfg["lambda_perceptual"],
        prompt_dropout=cfg["prompt_dropout"], reference_noisy_prob=cfg["reference_noisy_prob"],
        num_steps=cfg["num_steps"], batch_size=cfg["batch_size"], seed=cfg["seed"], frozen_2d=cfg["frozen_2d"],
        freeze_gates=cfg["freeze_gates"])
    mcfg = ModelConfig(resolution=res, denoiser_width=cfg["denoiser_width"],
                       reconstructor_width=cfg["reconstructor_width"], num_steps=cfg["num_steps"])
    seeds = {"init": child_seed(cfg["seed"], "init"), "pretrain": child_seed(cfg["seed"], "pretrain"),
             "train": child_seed(cfg["seed"], "train")}
    torch.manual_seed(seeds["init"])
    gen = torch.Generator().manual_seed(seeds["train"])
    start = 0
    if cfg["resume"]:
        model = load_checkpoint(cfg["resume"], {"resolution": res, "denoiser_width": cfg["denoiser_width"],
                                                "reconstructor_width": cfg["reconstructor_width"]})
        opt = make_optimizer(model, tcfg)
        start = _restore_state(cfg["resume"], opt, gen)
    else:
        model = CycleModel(mcfg)
        if cfg["denoiser_checkpoint"]:
            donor = load_checkpoint(cfg["denoiser_checkpoint"], {"resolution": res,
                                                                 "denoiser_width": cfg["denoiser_width"]})
            model.denoiser.load_state_dict(donor.denoiser.state_dict())
        elif cfg["pretrain_steps"] > 0:
            pre_gen = torch.Generator().manual_seed(seeds["pretrain"])
            with open(out / "pretrain_log.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "L_eps"])
                pretrain_denoiser(model, samples, cfg["pretrain_steps"], pre_gen, cfg["pretrain_lr"],
                                  callback=lambda s, l: w.writerow([s, f"{l:.6g}"]))
        opt = make_optimizer(model, tcfg)

    total = cfg["steps"] or max(1, tcfg.epochs * len(samples) // tcfg.batch_size)
    log_path = out / "loss_log.csv"
    mode = "a" if cfg["resume"] and log_path.exists() else "w"
    ckpt_root = out / "checkpoints"
    history = {"step": [], "L_total": [], "L_img": [], "L_mask": []}
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "L_total", "L_img", "L_mask", "grad_norm", "clipped"])

        def on_step(step, r):
            writer.writerow([step, f"{r.loss_total:.6g}", f"{r.loss_image:.6g}", f"{r.loss_mask:.6g}",
                             f"{r.grad_norm:.6g}", int(r.clipped)])
            for k, v in zip(history, (step, r.loss_total, r.loss_image, r.loss_mask)):
                history[k].append(v)
            done = step + 1
            if cfg["checkpoint_every"] > 0 and done % cfg["checkpoint_every"] == 0 and done < total:
                fh.flush()
                save_checkpoint(ckpt_root / f"step_{done:06d}", model, opt, done, gen, cfg)

        remaining = max(0, total - start)
        fit(model, opt, samples, tcfg, remaining, gen, on_step, start_step=start)
    final = save_checkpoint(ckpt_root / f"step_{total:06d}", model, opt, total, gen, cfg)
    (out / "latest.txt").write_text(str(final.resolve()) + "\n")
    if history["step"]:
        from .plotting import loss_curve

        loss_curve(history["step"], {k: history[k] for k in ("L_total", "L_img", "L_mask")}, out / "loss_curve.png")
    write_manifest(out, "train", cfg, seeds, [cfg["data"]], [str(final)], started,
                   {"scenes_used": len(samples), "scenes_skipped": len(skipped), "steps": total})
    print(f"trained {total - start} steps; checkpoint {final}")
    return 0


def parse_tokens(text: str) -> list[int]:
    out = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if part.isdigit():
            out.append(int(part))
        elif part in TOKEN_ID:
            out.append(TOKEN_ID[part])
        else:
            raise ConfigError(f"unknown token {part!r}")
    return out


def parse_per_view_prompts(text: str) -> dict[int, list[int]]:
    out = {}
    for chunk in (c.strip() for c in text.split(";")):
        if not chunk:
            continue
        if ":" not in chunk:
            raise ConfigError(f"per_view_prompts entry {chunk!r} needs view:tokens")
        view, toks = chunk.split(":", 1)
        try:
            out[int(view)] = parse_tokens(toks)
        except ValueError:
            raise ConfigError(f"bad view index in {chunk!r}") from None
    return out


def cmd_sample(cfg: dict) -> int:
    started = time.time()
    if cfg["mode"] not in (IMAGE_TO_3D, TEXT_TO_3D):
        raise ConfigError(f"mode must be {IMAGE_TO_3D} or {TEXT_TO_3D}")
    if cfg["prior"] not in (ORACLE_PERTURBED, LEARNED_MULTIVIEW, PURE_NOISE):
        raise ConfigError(f"unknown prior {cfg['prior']!r}")
    if cfg["steps"] < 1:
        raise ConfigError("steps must be >= 1")
    scene = load_scene(Path(cfg["scene"])) if cfg["scene"] else None
    if cfg["mode"] == IMAGE_TO_3D and scene is None and not cfg["input"]:
        raise ConfigError("image_to_3d needs an input image (input=...) or a scene")
    if cfg["prior"] == ORACLE_PERTURBED and scene is None:
        raise ConfigError("the oracle_perturbed prior needs a scene with ground truth")
    model = load_checkpoint(cfg["checkpoint"], {k: cfg[k] for k in ("resolution", "denoiser_width",
                                                                  "reconstructor_width")})
    res = model.config.resolution
    seeds = {"noise": child_seed(cfg["seed"], "noise"), "prior": child_seed(cfg["seed"], "prior")}

    if scene is not None:
        s = scene.sample()
        if s.input_images.shape[-1] != res:
            raise ConfigError(f"checkpoint/config mismatch: resolution={res} in checkpoint, "
                              f"{s.input_images.shape[-1]} in scene")
        cameras, gt_views, tokens = s.input_cameras, s.input_images, s.tokens
        reference = s.input_images[0]
    else:
        cameras = [orbit_camera(90.0 * i, 0.0, ORBIT_RADIUS, FOV_DEG, (res, res)) for i in range(4)]
        gt_views, tokens, reference = None, [], None
    if cfg["input"]:
        reference = load_png(cfg["input"])
        if reference.shape[-2:] != (res, res):
            raise ConfigError(f"input image is {tuple(reference.shape[-2:])}, checkpoint expects {res}x{res}")
    if cfg["tokens"]:
        tokens = parse_tokens(cfg["tokens"])
    if cfg["mode"] == TEXT_TO_3D:
        reference_for_sampling = None
    else:
        reference_for_sampling = reference
        if gt_views is not None:
            gt_views = gt_views.clone()
            gt_views[0] = reference

    provider = PriorProvider(cfg["prior"], PerturbConfig(cfg["hue"], cfg["brightness"], cfg["warp_px"],
                                                         cfg["texture_noise"]), seed=seeds["prior"],
                             steps=cfg["steps"])
    prior = provider.views(cameras, gt_views=gt_views, reference=reference_for_sampling, tokens=tokens, model=model)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = sample(model, cameras, reference=reference_for_sampling, tokens=tokens, prior_views=prior,
                    steps=cfg["steps"], mode=cfg["mode"], per_view_prompts=parse_per_view_prompts(cfg["per_view_prompts"]),
                    guidance=GuidanceConfig(scale=cfg["cfg_scale"]),
                    generator=torch.Generator().manual_seed(seeds["noise"]), record=cfg["save_steps"],
                    diagnostics_dir=out / "diagnostics")
    write_cloud(out / "cloud.ftc", result.cloud)
    write_ply(out / "cloud.ply", result.cloud)
    (out / "views").mkdir(exist_ok=True)
    for i, v in enumerate(result.views):
        save_png(out / "views" / f"view_{i:02d}.png", v)
    outputs = ["cloud.ftc", "cloud.ply", "views/"]
    if prior is not None:
        write_ftc(out / "prior.ftc", {"views": prior.float()})
        outputs.append("prior.ftc")
    if cfg["baseline"]:
        if prior is None:
            raise ConfigError("baseline=true needs a prior other than pure_noise")
        base = single_pass_reconstruction(model, prior, cameras, tokens)
        write_cloud(out / "baseline_cloud.ftc", base)
        outputs.append("baseline_cloud.ftc")
    if cfg["save_steps"]:
        from .plotting import step_strip

        d = out / "steps"
        d.mkdir(exist_ok=True)
        for k, st in enumerate(result.trajectory):
            for i in range(st["x0_hat"].shape[0]):
                save_png(d / f"step_{k:03d}_t{st['t']:04d}_view{i}_x0.png", (st["x0_hat"][i] + 1) / 2)
                save_png(d / f"step_{k:03d}_t{st['t']:04d}_view{i}_render.png", (st["x0_rendered"][i] + 1) / 2)
        step_strip(result.trajectory, out / "step_strip.png")
        outputs.append("steps/")
    write_manifest(out, "sample", cfg, seeds, [cfg["checkpoint"], cfg["scene"] or cfg["input"]], outputs, started,
                   {"mode": cfg["mode"], "prior": cfg["prior"], "num_gaussians": len(result.cloud)})
    print(f"sampled {len(result.cloud)} Gaussians to {out}")
    return 0


def cmd_eval(cfg: dict) -> int:
    started = time.time()
    scene_dir = Path(cfg["scene"])
    if not (scene_dir / "views.ftc").exists():
        raise ConfigError(f"ground truth missing: {scene_dir} has no views.ftc")
    scene = load_scene(scene_dir)
    cloud = read_cloud(cfg["cloud"]).to(torch.float32)
    vs = scene.views
    held = [i for i in range(len(vs.azimuths)) if i not in vs.input_indices]
    cams = [vs.cameras[i] for i in held]
    with torch.no_grad():
        pred, _ = render_batch(cloud, cams)
    gt = vs.images[held]
    report = evaluate_views(pred, gt, seed=cfg["seed"], config_hash=config_hash(cfg))
    report.consistency = consistency_error(pred, cams, vs.depths[held], vs.masks[held])
    report.extra["gt_consistency"] = _fmt(consistency_error(gt, cams, vs.depths[held], vs.masks[held]))
    report.extra["num_gaussians"] = len(cloud)
    out = Path(cfg["out"])
    txt, rows = report.write(out, cfg["stem"])
    outputs = [txt.name, rows.name]
    if cfg["figures"]:
        from .plotting import image_grid, metric_bars

        outputs.append(metric_bars(report, out / f"{cfg['stem']}_metrics.png").name)
        pick = held[:: max(1, len(held) // 8)][:8]
        idx = [held.index(i) for i in pick]
        outputs.append(image_grid([("ground truth", gt[idx]), ("render", pred[idx])], out / f"{cfg['stem']}_views.png",
                                  [f"view {i}" for i in pick]).name)
    write_manifest(out, "eval", cfg, {}, [cfg["cloud"], cfg["scene"]], outputs, started)
    print(f"psnr={report.mean_psnr:.4f} ssim={report.mean_ssim:.4f} consistency={report.summary()['consistency']}")
    return 0


def _fmt(v):
    return "absent" if v is None else f"{v:.6f}"


def cmd_turntable(cfg: dict) -> int:
    started = time.time()
    if cfg["n_frames"] < 1:
        raise ConfigError("n_frames must be >= 1")
    cloud = read_cloud(cfg["cloud"]).to(torch.float32)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n = cfg["n_frames"]
    outputs = []
    res = (cfg["resolution"], cfg["resolution"])
    for k in range(n):
        cam = orbit_camera(360.0 * k / n, cfg["elevation"], cfg["radius"], cfg["fov_deg"], res)
        with torch.no_grad():
            img, _ = render_batch(cloud, [cam])
        name = f"frame_{k:04d}.png"
        save_png(out / name, img[0])
        outputs.append(name)
    write_manifest(out, "turntable", cfg, {}, [cfg["cloud"]], outputs, started)
    print(f"wrote {n} frames to {out}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "turntable": cmd_turntable}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatcycle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        for key, entry in schema.items():
            p.add_argument(f"--{key}", dest=key, default=None, help=entry.help or None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_values = read_kv(args.config) if args.config else {}
        flags = {k: getattr(args, k) for k in SCHEMAS[args.command]}
        cfg = resolve_config(args.command, file_values, flags)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        if args.config and "line" in str(exc):
            print(f"error: config {args.config}: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        if args.config and Path(exc.filename or "") == Path(args.config):
            print(f"error: config file {args.config} not found", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
