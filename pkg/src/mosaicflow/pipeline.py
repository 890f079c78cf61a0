"""Scene synthesis, run configuration and the two-stage training driver."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cfm, prior, sampler, storage, voting
from .degradation import (Observation, SfaPattern, apply_mosaic, apply_spectral,
                          srf_for_bands)

log = logging.getLogger(__name__)

OUT_ENV = "MOSAICFLOW_OUT"
SCENE_KINDS = ("smooth", "patches", "file")


class ConfigError(ValueError):
    """A configuration field is missing, unknown or out of range."""


def output_dir(path: str | os.PathLike | None = None) -> Path:
    """Explicit ``path`` first, then ``$MOSAICFLOW_OUT``, then ``./runs``."""
    if path is not None:
        return Path(path)
    return Path(os.environ.get(OUT_ENV, "runs"))


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneSpec:
    bands: int = 16
    size: int = 64
    kind: str = "smooth"
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"scene kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("scene kind 'file' needs a path")
        if self.kind != "file":
            if self.bands < 1:
                raise ConfigError(f"bands must be >= 1, got {self.bands}")
            if self.size < 8 or self.size % 8:
                raise ConfigError(f"size must be a positive multiple of 8, got {self.size}")


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Periodic Gaussian-filtered white noise, standardised."""
    noise = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size)
    gain = np.exp(-2.0 * (np.pi * sigma) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * gain))
    return (field - field.mean()) / field.std()


def _endmembers(rng: np.random.Generator, k: int, bands: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, bands)[None]
    base = 0.25 + 0.5 * rng.random((k, 1))
    wave = 0.2 * np.sin(2 * np.pi * (x * rng.uniform(0.3, 1.2, (k, 1)) + rng.random((k, 1))))
    return base + wave


def smooth_scene(bands: int, size: int, seed: int, materials: int = 4) -> np.ndarray:
    """Softmax-mixed endmember spectra over smooth abundance maps, times fine shading."""
    rng = np.random.default_rng(seed)
    lat = np.stack([_smooth_field(rng, size, (6.0, 10.0)[i % 2]) for i in range(materials)])
    ab = np.exp(2.0 * lat)
    ab /= ab.sum(axis=0)
    refl = np.einsum("kc,khw->chw", _endmembers(rng, materials, bands), ab)
    shading = np.clip(1.0 + 0.35 * _smooth_field(rng, size, 1.5), 0.2, 1.8)
    return np.clip(0.8 * refl * shading[None], 0.0, 1.0)


def patch_scene(bands: int, size: int, seed: int, materials: int = 5, rects: int = 12) -> np.ndarray:
    """Random axis-aligned rectangles of constant spectra over a background."""
    rng = np.random.default_rng(seed)
    spectra = np.clip(_endmembers(rng, materials, bands), 0.0, 1.0)
    label = np.zeros((size, size), dtype=int)
    for _ in range(rects):
        y, x = rng.integers(0, size, 2)
        h, w = rng.integers(size // 8, size // 2, 2)
        label[y:y + h, x:x + w] = rng.integers(materials)
    return spectra[label].transpose(2, 0, 1).copy()


def make_scene(spec: SceneSpec) -> np.ndarray:
    if spec.kind == "smooth":
        return smooth_scene(spec.bands, spec.size, spec.seed)
    if spec.kind == "patches":
        return patch_scene(spec.bands, spec.size, spec.seed)
    cube = storage.load_cube(spec.path)
    _, h, w = cube.shape
    if h % 8 or w % 8:
        raise ConfigError(f"{spec.path}: extents ({h}, {w}) are not divisible by 8")
    if cube.min() < 0.0 or cube.max() > 1.0:
        raise ConfigError(f"{spec.path}: values must lie in [0, 1]")
    return cube


def simulate(spec: SceneSpec | np.ndarray) -> tuple[np.ndarray, Observation]:
    """Ground truth plus its mosaic and PAN under the simulation operators."""
    h_gt = spec if isinstance(spec, np.ndarray) else make_scene(spec)
    c, h, w = h_gt.shape
    if h % 8 or w % 8:
        raise ConfigError(f"scene extents ({h}, {w}) are not divisible by 8")
    pattern = SfaPattern.default(c)
    obs = Observation(apply_mosaic(h_gt, pattern), apply_spectral(h_gt, srf_for_bands(c)), pattern)
    return h_gt, obs


def save_scene(directory, h_gt: np.ndarray | None, obs: Observation) -> Path:
    d = Path(directory)
    if h_gt is not None:
        storage.save_cube(d / "gt.cube", h_gt)
    storage.save_cube(d / "mosaic.cube", obs.mosaic)
    storage.save_cube(d / "pan.cube", obs.pan)
    storage.atomic_write(d / "pattern.txt", "\n".join(
        " ".join(str(v) for v in row) for row in obs.pattern.base) + "\n")
    return d


def load_scene(directory) -> tuple[np.ndarray | None, Observation]:
    d = Path(directory)
    mosaic = storage.load_plane(d / "mosaic.cube")
    pan = storage.load_plane(d / "pan.cube")
    gt = storage.load_cube(d / "gt.cube") if (d / "gt.cube").exists() else None
    bands = gt.shape[0] if gt is not None else None
    pattern = SfaPattern.load(d / "pattern.txt", bands)
    return gt, Observation(mosaic, pan, pattern)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Every stage-1 and stage-2 hyperparameter; validated on construction."""

    seed: int = 0
    # stage 1
    prior_epochs: int = 300
    prior_width: int = 32
    prior_lr: float = 1e-4
    prior_lr_srf: float = 1e-5
    # stage 2
    flow_epochs: int = 30
    batch_size: int = 16
    patch_mosaic: int = 32
    patch_pan: int = 64
    patch_repeats: int = 16
    flow_lr: float = 1e-4
    flow_lr_srf: float = 1e-5
    lam: float = 0.1
    warmup_fraction: float = 0.2
    widths: tuple[int, int] = (32, 64)
    endpoint: bool = True
    # voting
    window: int = 10
    k: int = 4
    threshold: float = 0.75
    selection: str = "random"
    # sampling
    steps: int = 10
    gamma_norm: float = 0.4
    guidance_norm: str = "l1"
    sample_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        positive = ("prior_epochs", "prior_width", "flow_epochs", "batch_size", "patch_mosaic",
                    "patch_pan", "patch_repeats", "window", "k", "steps")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("prior_lr", "prior_lr_srf", "flow_lr", "flow_lr_srf"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.patch_pan != 2 * self.patch_mosaic:
            raise ConfigError(f"patch_pan ({self.patch_pan}) must be twice patch_mosaic "
                              f"({self.patch_mosaic})")
        if self.patch_pan % 8:
            raise ConfigError(f"patch_pan must be a multiple of 8, got {self.patch_pan}")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ConfigError(f"widths must be two positive integers, got {self.widths}")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.k > self.window:
            raise ConfigError(f"k ({self.k}) must not exceed window ({self.window})")
        if self.selection not in ("random", "fixed"):
            raise ConfigError(f"selection must be 'random' or 'fixed', got {self.selection!r}")
        if not 0.0 <= self.gamma_norm <= 1.0:
            raise ConfigError(f"gamma_norm must lie in [0, 1], got {self.gamma_norm}")
        if self.guidance_norm not in ("l1", "l2"):
            raise ConfigError(f"guidance_norm must be 'l1' or 'l2', got {self.guidance_norm!r}")

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale settings for a 64x64 PAN scene on one core."""
        base = dict(prior_epochs=300, prior_lr=1e-3, prior_lr_srf=1e-4, flow_epochs=30,
                    patch_mosaic=16, patch_pan=32, patch_repeats=16, flow_lr=1e-3,
                    flow_lr_srf=1e-4, widths=(16, 32))
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**raw)

    def save(self, path) -> Path:
        return storage.atomic_write(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def flow_config(self) -> cfm.FlowConfig:
        return cfm.FlowConfig(epochs=self.flow_epochs, batch_size=self.batch_size,
                              patch=self.patch_pan, patch_repeats=self.patch_repeats,
                              lr=self.flow_lr, lr_srf=self.flow_lr_srf, lam=self.lam,
                              warmup_fraction=self.warmup_fraction, widths=self.widths)

    def guidance(self, seed: int | None = None) -> sampler.GuidanceConfig:
        return sampler.GuidanceConfig(self.steps, self.gamma_norm,
                                      self.sample_seed if seed is None else seed,
                                      self.guidance_norm)

    def new_flow_net(self, bands: int) -> cfm.VectorFieldNet:
        return cfm.VectorFieldNet(bands, self.widths, seed=self.seed + 1, endpoint=self.endpoint)


# ---------------------------------------------------------------------------
# logs


TRAIN_COLUMNS = ("epoch", "l_dir", "l_trans", "l_deg", "l_total", "e_target")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def read_train_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageOne:
    y: np.ndarray
    srf_logits: np.ndarray
    losses: list[float]


@dataclass
class StageTwo:
    net: cfm.VectorFieldNet
    target: np.ndarray
    epoch_logs: list[cfm.EpochLog]
    scores: list[float]
    votes: list[voting.VoteRecord]


@dataclass
class RunArtifacts:
    stage1: StageOne
    stage2: StageTwo
    h_final: np.ndarray
    out_dir: Path | None = None
    meta: dict = field(default_factory=dict)

    @property
    def y(self) -> np.ndarray:
        return self.stage1.y


def run_stage1(config: RunConfig, obs: Observation, out_dir=None) -> StageOne:
    """Pretrain the prior and persist Y, its checkpoint and the loss curve."""
    res = prior.pretrain(obs, config.prior_epochs, seed=config.seed, width=config.prior_width,
                         lr=config.prior_lr, lr_srf=config.prior_lr_srf)
    stage = StageOne(res.y, res.net.params["srf.logits"].copy(), list(res.losses))
    if out_dir is not None:
        d = Path(out_dir)
        storage.save_cube(d / "y.cube", res.y)
        storage.save_checkpoint(d / "prior.ckpt", res.net.params)
        storage.atomic_write(d / "pretrain_log.csv",
                             _csv_text(("epoch", "l_pre"), enumerate(stage.losses, 1)))
    log.info("stage 1 done: L_pre %.4g -> %.4g", stage.losses[0], stage.losses[-1])
    return stage


def _load_net(config: RunConfig, bands: int, path) -> cfm.VectorFieldNet:
    net = config.new_flow_net(bands)
    params = storage.load_checkpoint(path)
    missing = set(net.params) ^ set(params)
    if missing:
        raise storage.FormatError(f"{path}: checkpoint does not match the network ({sorted(missing)})")
    for k, v in params.items():
        if v.shape != net.params[k].shape:
            raise storage.FormatError(f"{path}: {k} has shape {v.shape}, expected {net.params[k].shape}")
        net.params[k] = v
    return net


def load_flow_net(config: RunConfig, bands: int, path) -> cfm.VectorFieldNet:
    return _load_net(config, bands, path)


def run_stage2(config: RunConfig, obs: Observation, y: np.ndarray, srf_logits: np.ndarray,
               out_dir) -> StageTwo:
    """Flow-matching epochs with checkpointing and voting every ``window`` epochs.

    Every epoch appends to ``train_log.csv``; every vote appends a record to
    ``votes.jsonl``.  Checkpoints are needed to draw vote candidates, so an
    output directory is required.
    """
    d = Path(out_dir)
    ckpt_dir = d / "checkpoints"
    net = config.new_flow_net(obs.bands)
    net.params["srf.logits"] = np.array(srf_logits, dtype=float)
    trainer = cfm.FlowTrainer(net, config.flow_config(), seed=config.seed + 2)
    data = cfm.FlowData.from_observation(obs, y)
    vote_rng = np.random.default_rng(config.seed + 3)
    state = voting.VoteState(np.array(y), voting.eval_consistency(y, obs, net.spectral_weights()),
                             config.window, config.k, config.threshold)
    rows, logs, scores, votes, vote_lines = [], [], [], [], []
    for epoch in range(1, config.flow_epochs + 1):
        elog = trainer.train_epoch(data, ckpt_dir)
        weights = net.spectral_weights()
        if epoch % config.window == 0:
            window = range(epoch - config.window + 1, epoch + 1)
            picks = voting.select_checkpoints(window, config.k, vote_rng, config.selection)
            candidates = []
            for e in picks:
                cand_net = _load_net(config, obs.bands, ckpt_dir / cfm.checkpoint_name(e))
                candidates.append(sampler.sample(cand_net, data.cond, data.pan_expanded, obs,
                                                 config.guidance(config.sample_seed + e)))
            state, rec = voting.vote(state, candidates,
                                     lambda x: voting.eval_consistency(x, obs, weights),
                                     epoch=epoch, checkpoints=picks)
            if rec.updated:
                data.target = np.array(state.target)
            votes.append(rec)
            doc = rec.to_json()
            doc["score_after"] = state.score
            vote_lines.append(json.dumps(doc, sort_keys=True))
            storage.atomic_write(d / "votes.jsonl", "\n".join(vote_lines) + "\n")
            log.info("vote at epoch %d: win rate %.2f, updated=%s", epoch, rec.win_rate, rec.updated)
        score = voting.eval_consistency(data.target, obs, weights)
        logs.append(elog)
        scores.append(score)
        rows.append((epoch, elog.l_dir, elog.l_trans, elog.l_deg, elog.l_total, score))
        storage.atomic_write(d / "train_log.csv", _csv_text(TRAIN_COLUMNS, rows))
    storage.save_checkpoint(d / "flow_final.ckpt", net.params)
    storage.save_cube(d / "target.cube", data.target)
    return StageTwo(net, data.target, logs, scores, votes)


def final_sample(config: RunConfig, net: cfm.VectorFieldNet, obs: Observation) -> np.ndarray:
    return sampler.sample(net, cfm.conditioning(obs), obs.pan_expanded(), obs, config.guidance())


def run_two_stage(config: RunConfig, obs: Observation, out_dir=None) -> RunArtifacts:
    """Pretrain, train the flow with voting, then draw the final guided sample."""
    d = output_dir(out_dir)
    config.save(d / "config.json")
    s1 = run_stage1(config, obs, d)
    s2 = run_stage2(config, obs, s1.y, s1.srf_logits, d)
    h = final_sample(config, s2.net, obs)
    storage.save_cube(d / "h_final.cube", h)
    if obs.bands >= 13:
        storage.save_ppm(d / "h_final.ppm", h)
    return RunArtifacts(s1, s2, h, d)
