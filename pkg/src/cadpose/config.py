"""Run configuration: an INI-style file (sections of key = value) mapped onto
the component configs, with validation against known keys."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .features import ExtractorConfig
from .geom import CameraIntrinsics
from .posenet import NetConfig, TrainConfig
from .retrieval import RespcConfig
from .solver import RansacConfig, RefineConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class KbConfig:
    views: int = 42
    points: int = 1024
    tau_vis: float = 0.01
    bands: int = 6
    radius_factor: float = 2.5


@dataclass(frozen=True)
class SolverConfig:
    n_keys: int = 2048
    mask_thresh: float = 0.5
    max_pixels: int = 4096
    icp: bool = False
    icp_iters: int = 30


@dataclass(frozen=True)
class RunConfig:
    objects: tuple[str, ...] = ("cube", "sphere", "bracket", "mug")
    seed: int = 0
    camera: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(450.0, 450.0, 160.0, 160.0, 320, 320)
    )
    kb: KbConfig = field(default_factory=KbConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)


_SECTION_TYPES = {
    "kb": KbConfig,
    "train": TrainConfig,
    "ransac": RansacConfig,
    "refine": RefineConfig,
    "solver": SolverConfig,
}


def _coerce(raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw.strip()
    raise ConfigError(f"unsupported config value type {target_type}")


def _parse_section(parser: configparser.ConfigParser, name: str, cls):
    kwargs = {}
    if not parser.has_section(name):
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r} (known: {sorted(known)})")
        f = known[key]
        base = cls()
        current = getattr(base, key)
        if f.name == "early_exit_conf" and raw.strip().lower() in ("none", "off"):
            kwargs[key] = None
            continue
        target = type(current) if current is not None else float
        kwargs[key] = _coerce(raw, target)
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults overlaid with an optional INI file."""
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(Path(path))
    if not read:
        raise ConfigError(f"config file not found: {path}")
    objects = RunConfig().objects
    seed = RunConfig().seed
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key == "objects":
                objects = tuple(x.strip() for x in raw.split(",") if x.strip())
            elif key == "seed":
                seed = int(raw)
            else:
                raise ConfigError(f"[run] unknown key {key!r}")
    cam = RunConfig().camera
    if parser.has_section("camera"):
        vals = {k: float(v) for k, v in parser.items("camera")}
        allowed = {"fx", "fy", "cx", "cy", "width", "height"}
        unknown = set(vals) - allowed
        if unknown:
            raise ConfigError(f"[camera] unknown keys {sorted(unknown)}")
        cam = CameraIntrinsics(
            fx=vals.get("fx", cam.fx), fy=vals.get("fy", cam.fy),
            cx=vals.get("cx", cam.cx), cy=vals.get("cy", cam.cy),
            width=int(vals.get("width", cam.width)), height=int(vals.get("height", cam.height)),
        )
    net = _parse_net(parser)
    return RunConfig(
        objects=objects,
        seed=seed,
        camera=cam,
        kb=_parse_section(parser, "kb", KbConfig),
        net=net,
        train=_parse_section(parser, "train", TrainConfig),
        ransac=_parse_section(parser, "ransac", RansacConfig),
        refine=_parse_section(parser, "refine", RefineConfig),
        solver=_parse_section(parser, "solver", SolverConfig),
    )


_NET_KEYS = {"d_cnn", "d_e", "dec_width", "mask_width", "siren_width", "bands"}
_RESPC_KEYS = {f.name for f in fields(RespcConfig)}


def _parse_net(parser: configparser.ConfigParser) -> NetConfig:
    net_kwargs = {}
    respc_kwargs = {}
    if parser.has_section("model"):
        for key, raw in parser.items("model"):
            if key in _NET_KEYS:
                net_kwargs[key] = int(raw)
            elif key in _RESPC_KEYS:
                respc_kwargs[key] = int(raw)
            else:
                raise ConfigError(f"[model] unknown key {key!r}")
    return NetConfig(respc=RespcConfig(**respc_kwargs), **net_kwargs)


def write_default_config(path: str | Path) -> None:
    """Emit a commented config file with the package defaults."""
    rc = RunConfig()
    lines = [
        "# cadpose run configuration (key = value, INI sections)",
        "[run]",
        f"objects = {', '.join(rc.objects)}",
        f"seed = {rc.seed}",
        "",
        "[camera]",
        f"fx = {rc.camera.fx}", f"fy = {rc.camera.fy}",
        f"cx = {rc.camera.cx}", f"cy = {rc.camera.cy}",
        f"width = {rc.camera.width}", f"height = {rc.camera.height}",
        "",
        "[kb]",
        f"views = {rc.kb.views}",
        f"points = {rc.kb.points}",
        f"tau_vis = {rc.kb.tau_vis}",
        "",
        "[train]",
        f"alpha = {rc.train.alpha}",
        f"lr = {rc.train.lr}",
        f"steps = {rc.train.steps}",
        f"n_pos = {rc.train.n_pos}",
        f"n_neg = {rc.train.n_neg}",
        "",
        "[ransac]",
        f"iterations = {rc.ransac.iterations}",
        f"inlier_px = {rc.ransac.inlier_px}",
        "",
        "[solver]",
        f"n_keys = {rc.solver.n_keys}",
        f"mask_thresh = {rc.solver.mask_thresh}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
