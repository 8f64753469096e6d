"""Run configuration: a flat ``key = value`` file with ``#`` comments.

Unknown keys are rejected, and every value is parsed according to the type of
its :class:`RunConfig` field.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .model import Ablation, ModelConfig

STAGES = ("lift", "mesh", "end2end")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    stage: str = "end2end"
    seed: int = 0
    # data
    T: int = 16
    stride: int = 4
    n_train: int = 8
    n_eval: int = 2
    amplitude: float = 0.6
    occlusion_rate: float = 0.05
    keypoint_noise_sigma: float = 0.005
    fps: float = 25.0
    # model
    lift_width: int = 256
    width_factor: float = 0.25
    lift_layers: int = 3
    recon_dim: int = 64
    recon_layers: int = 3
    n_state: int = 8
    conv_kernel: int = 3
    heads: int = 2
    points: int = 4
    mesh_hidden: int = 128
    # lifting stage optimisation
    lr: float = 2e-4
    batch: int = 64
    epochs: int = 100
    weight_decay: float = 0.01
    lr_decay: float = 0.99
    # mesh stage optimisation
    lr_mesh: float = 5e-5
    batch_mesh: int = 32
    epochs_mesh: int = 20
    # ablation flags
    ga: bool = True
    em: bool = True
    im: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        positive = ("T", "stride", "n_train", "n_eval", "fps", "lift_width", "width_factor", "lift_layers",
                    "recon_dim", "recon_layers", "n_state", "conv_kernel", "heads", "points", "mesh_hidden",
                    "batch", "batch_mesh")
        bad = [k for k in positive if not getattr(self, k) > 0]
        bad += [k for k in ("lr", "lr_mesh", "weight_decay", "epochs", "epochs_mesh", "amplitude",
                            "occlusion_rate", "keypoint_noise_sigma") if getattr(self, k) < 0]
        if not 0 < self.lr_decay <= 1:
            bad.append("lr_decay")
        if bad:
            raise ConfigError(f"invalid values for {bad}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")

    @property
    def lift_dim(self) -> int:
        return max(self.heads, int(round(self.lift_width * self.width_factor)))

    @property
    def flags(self) -> Ablation:
        return Ablation(self.ga, self.em, self.im)

    def model_config(self, n_joints: int = 17, n_vertices: int = 602) -> ModelConfig:
        return ModelConfig(n_joints=n_joints, n_vertices=n_vertices, lift_dim=self.lift_dim,
                           lift_layers=self.lift_layers, n_state=self.n_state, conv_kernel=self.conv_kernel,
                           heads=self.heads, points=self.points, recon_dim=self.recon_dim,
                           recon_layers=self.recon_layers, mesh_hidden=self.mesh_hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    types = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(cp["run"]) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    values = {k: _parse_value(v, types[k], k) for k, v in cp["run"].items()}
    return replace(base or RunConfig(), **values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def format_config(cfg: RunConfig) -> str:
    lines = ["# deskhmr run configuration"]
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
