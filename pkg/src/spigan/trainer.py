"""Alternating minimax optimisation: generator-side steps, discriminator steps, schedule, stopping."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff_core as ad
from . import nets
from .autodiff_core import Tape, Tensor
from .objectives import (GENERATOR_GAN_FORMS, LossReport, LossWeights, cross_entropy_seg, lsgan_discriminator_loss,
                         perceptual_loss, privileged_loss, task_loss, total_generator_objective)
from .toysim import Dataset, augment

log = logging.getLogger(__name__)

MODES = ("spigan", "no_pi", "base", "source_only")
CSV_FIELDS = ("step", "epoch", "gan_d", "gan_g", "task", "privileged", "perceptual", "total", "lr")


class NumericError(RuntimeError):
    """A loss went non-finite; ``batch_indices`` names the offending samples."""

    def __init__(self, msg, step=None, batch_indices=None):
        super().__init__(msg)
        self.step = step
        self.batch_indices = batch_indices


@dataclass
class EarlyStopConfig:
    window: int = 5
    margin: float = 0.1
    enabled: bool = True


@dataclass
class TrainConfig:
    loss_weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 8
    lr0: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_flat: int = 20
    epochs_decay: int = 20
    gen_steps_per_cycle: int = 5
    mode: str = "spigan"
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0
    crop_h: int = 32
    crop_w: int = 32
    gen_channels: int = 16
    gen_resblocks: int = 2
    disc_channels: int = 16
    disc_layers: int = 3
    seg_channels: int = 16
    n_classes: int = 5
    norm: str = "batch"
    dropout: float = 0.5
    generator_gan_form: str = "least_squares"  # or "minimax"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.early_stop, dict):
            self.early_stop = EarlyStopConfig(**self.early_stop)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.generator_gan_form not in GENERATOR_GAN_FORMS:
            raise ValueError(f"generator_gan_form must be one of {sorted(GENERATOR_GAN_FORMS)}")
        if self.batch_size < 1 or self.gen_steps_per_cycle < 1:
            raise ValueError("batch_size and gen_steps_per_cycle must be >= 1")
        if self.epochs_flat < 0 or self.epochs_decay < 1:
            raise ValueError("need epochs_flat >= 0 and epochs_decay >= 1")

    @property
    def total_epochs(self) -> int:
        return self.epochs_flat + self.epochs_decay

    def effective_weights(self) -> LossWeights:
        w = self.loss_weights
        if self.mode == "no_pi":
            return replace(w, gamma=0.0)
        if self.mode == "base":
            return replace(w, gamma=0.0, delta=0.0)
        return w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def paper_preset(cls, **overrides) -> "TrainConfig":
        return cls(**{"batch_size": 32, "epochs_flat": 100, "epochs_decay": 100, **overrides})


# ---------------------------------------------------------------------------
# optimiser and schedule


class AdamState:
    def __init__(self, params: nets.ParamSet):
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}
        self.t = 0


def adam_step(params: nets.ParamSet, state: AdamState, lr: float, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; clears gradients afterwards."""
    missing = [name for name, t in params if t.grad is None]
    if missing:
        raise RuntimeError(f"missing gradients for {len(missing)} parameter(s), e.g. {missing[0]!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params:
        g = p.grad
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad = None


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Flat at lr0, then linear decay that would reach 0 at the end of the budget."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.epochs_flat:
        return cfg.lr0
    return cfg.lr0 * (cfg.epochs_decay - (epoch - cfg.epochs_flat)) / cfg.epochs_decay


def early_stop_check(history_d, history_g, window: int = 5, margin: float = 0.1) -> int | None:
    """First epoch closing a window where D is consistently better than G, or both converged.

    Histories are per-epoch means of the discriminator and generator
    adversarial losses. Returns None when no epoch qualifies.
    """
    d = np.asarray(history_d, dtype=np.float64)
    g = np.asarray(history_g, dtype=np.float64)
    n = min(len(d), len(g))
    if window < 1 or window > n:
        return None
    for e in range(window - 1, n):
        wd = d[e - window + 1:e + 1]
        wg = g[e - window + 1:e + 1]
        if np.all(wd < wg - margin):
            return e
        if np.ptp(wd) < margin / 10 and np.ptp(wg) < margin / 10:
            return e
    return None


# ---------------------------------------------------------------------------
# state


@dataclass
class EarlyStopEvent:
    epoch: int
    window_d: list
    window_g: list


class TrainState:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.step = 0
        self.epoch = 0
        self.nets: dict[str, nets.Network] = {}
        self.opt: dict[str, AdamState] = {}
        self.history_d: list[float] = []
        self.history_g: list[float] = []
        self.gen_steps = 0
        self.disc_steps = 0
        self.early_stop: EarlyStopEvent | None = None
        seed = cfg.seed
        seg = nets.NetworkSpec("segmenter", base_channels=cfg.seg_channels, n_classes=cfg.n_classes, norm=cfg.norm)
        self.nets["T"] = nets.build_segmenter(seg, np.random.default_rng([seed, 12]), out_channels=cfg.n_classes)
        if cfg.mode != "source_only":
            gen = nets.NetworkSpec("generator", base_channels=cfg.gen_channels, n_resblocks=cfg.gen_resblocks,
                                   norm=cfg.norm, dropout=cfg.dropout)
            disc = nets.NetworkSpec("discriminator", base_channels=cfg.disc_channels, n_layers=cfg.disc_layers,
                                    norm=cfg.norm)
            self.nets["G"] = nets.build_generator(gen, np.random.default_rng([seed, 10]))
            self.nets["D"] = nets.build_discriminator(disc, np.random.default_rng([seed, 11]))
            self.nets["P"] = nets.build_segmenter(seg, np.random.default_rng([seed, 13]), out_channels=1)
            self.phi = nets.feature_extractor_phi()
        else:
            self.phi = None
        for key, net in self.nets.items():
            self.opt[key] = AdamState(net.params)

    def adam(self, key: str, lr: float) -> None:
        c = self.cfg
        adam_step(self.nets[key].params, self.opt[key], lr, c.adam_beta1, c.adam_beta2, c.adam_eps)

    # checkpoint state beyond the network parameters
    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key, st in self.opt.items():
            for name in st.m:
                out[f"{key}/{name}"] = st.m[name]
                out[f"{key}/{name}.v"] = st.v[name]
        return out

    def meta(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "gen_steps": self.gen_steps,
            "disc_steps": self.disc_steps,
            "adam_t": {k: st.t for k, st in self.opt.items()},
            "history_d": [repr(x) for x in self.history_d],
            "history_g": [repr(x) for x in self.history_g],
            "config": self.cfg.to_dict(),
            "early_stop": None if self.early_stop is None else asdict(self.early_stop),
        }


def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> None:
    arrays = {}
    for key, net in state.nets.items():
        for name, a in net.params.state_arrays().items():
            arrays[f"{key}/{name}"] = a
    for name, a in state.optimizer_arrays().items():
        arrays[f"adam/{name}"] = a
    specs = {k: {"spec": asdict(n.spec), "out_channels": n.out_channels} for k, n in state.nets.items()}
    manifest = {"networks": specs, "train_state": state.meta(), "phi": "frozen random pyramid (seed %d)" % nets.PHI_SEED}
    if extra:
        manifest.update(extra)
    nets.save_archive(path, arrays, manifest)


def load_checkpoint(path, state: TrainState | None = None) -> TrainState:
    arrays, manifest = nets.load_archive(path)
    meta = manifest["train_state"]
    if state is None:
        state = TrainState(TrainConfig.from_dict(meta["config"]))
    for key, net in state.nets.items():
        pre = f"{key}/"
        net.params.load_state_arrays({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})
        st = state.opt[key]
        for name in st.m:
            st.m[name] = arrays[f"adam/{key}/{name}"].copy()
            st.v[name] = arrays[f"adam/{key}/{name}.v"].copy()
        st.t = meta["adam_t"][key]
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    state.gen_steps = meta["gen_steps"]
    state.disc_steps = meta["disc_steps"]
    state.history_d = [float(x) for x in meta["history_d"]]
    state.history_g = [float(x) for x in meta["history_g"]]
    return state


# ---------------------------------------------------------------------------
# steps


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray | None = None
    inv_depth: np.ndarray | None = None
    indices: tuple = ()


def _check_finite(report: LossReport, step: int, batch: Batch) -> None:
    if not report.is_finite():
        raise NumericError(f"non-finite loss at step {step}: {report}", step=step, batch_indices=list(batch.indices))


def _d_joint(D: nets.Network, x_r: Tensor, x_f: Tensor, frozen: bool = False) -> tuple[Tensor, Tensor]:
    """Score real and fake in one batch-norm batch and split the scores.

    Normalising each half on its own would remove the per-channel colour
    statistics that separate the domains.
    """
    n = x_r.shape[0]
    scores = D(ad.concat([x_r, x_f], axis=0), mode="train", frozen=frozen)
    return ad.slice_batch(scores, 0, n), ad.slice_batch(scores, n, scores.shape[0])


def train_step_generator_side(state: TrainState, batch_s: Batch, batch_r: Batch | None, lr: float) -> LossReport:
    """One combined backward through G, T and P with D held fixed."""
    cfg = state.cfg
    w = cfg.effective_weights()
    x_s = Tensor(batch_s.images)
    T = state.nets["T"]
    report = LossReport()
    if cfg.mode == "source_only":
        with Tape() as tape:
            ce = cross_entropy_seg(T(x_s), batch_s.labels)
            total = ad.mul(ce, w.beta)
        tape.backward(total)
        report.task = ce.item()
        report.total_generator_side = total.item()
        _check_finite(report, state.step, batch_s)
        state.adam("T", lr)
        state.gen_steps += 1
        return report

    G, D, P = state.nets["G"], state.nets["D"], state.nets["P"]
    drop = np.random.default_rng([cfg.seed, 4, state.step])
    with Tape() as tape:
        x_f = G(x_s, mode="train", rng=drop)
        _, d_fake = _d_joint(D, Tensor(batch_r.images), x_f, frozen=True)
        gan_g = GENERATOR_GAN_FORMS[cfg.generator_gan_form](d_fake)
        task = task_loss(T, G, x_s, batch_s.labels, x_f=x_f)
        priv = privileged_loss(P, G, x_s, batch_s.inv_depth, x_f=x_f) if w.gamma > 0 else None
        perc = perceptual_loss(state.phi, x_s, x_f) if w.delta > 0 else None
        total = total_generator_objective(w, gan_g, task, priv, perc)
    tape.backward(total)
    report.gan_g = gan_g.item()
    report.task = task.item()
    report.privileged = priv.item() if priv is not None else 0.0
    report.perceptual = perc.item() if perc is not None else 0.0
    report.total_generator_side = total.item()
    _check_finite(report, state.step, batch_s)
    state.adam("G", lr)
    state.adam("T", lr)
    if priv is not None:
        state.adam("P", lr)
    state.gen_steps += 1
    return report


def train_step_discriminator(state: TrainState, batch_s: Batch, batch_r: Batch, lr: float) -> LossReport:
    """LS-GAN discriminator update on real target vs adapted source; everything else fixed."""
    cfg = state.cfg
    G, D = state.nets["G"], state.nets["D"]
    drop = np.random.default_rng([cfg.seed, 5, state.step])
    x_f = G(Tensor(batch_s.images), mode="train", rng=drop, frozen=True).detach()
    with Tape() as tape:
        loss = lsgan_discriminator_loss(*_d_joint(D, Tensor(batch_r.images), x_f))
    tape.backward(loss)
    report = LossReport(gan_d=loss.item())
    _check_finite(report, state.step, batch_r)
    state.adam("D", lr)
    state.disc_steps += 1
    return report


# ---------------------------------------------------------------------------
# loop


def _make_batch(ds: Dataset, idx: np.ndarray, rng: np.random.Generator, crop_h: int, crop_w: int) -> Batch:
    samples = [augment(ds[int(i)], rng, crop_h, crop_w) for i in idx]
    return Batch(
        images=np.stack([s.image for s in samples]),
        labels=np.stack([s.label for s in samples]) if samples[0].label is not None else None,
        inv_depth=np.stack([s.inv_depth for s in samples]) if samples[0].inv_depth is not None else None,
        indices=tuple(int(i) for i in idx),
    )


def validate_inputs(cfg: TrainConfig, source: Dataset, target: Dataset | None) -> None:
    if not source.has_labels:
        raise ValueError("source dataset must carry labels")
    if cfg.mode in ("spigan",) and cfg.loss_weights.gamma > 0 and not source.has_depth:
        raise ValueError("spigan mode needs inverse depth on the source dataset")
    if source.cfg.n_classes != cfg.n_classes:
        raise ValueError(f"dataset has {source.cfg.n_classes} classes, config expects {cfg.n_classes}")
    h, w = source.cfg.height, source.cfg.width
    if cfg.crop_h > h or cfg.crop_w > w:
        raise ValueError(f"crop {cfg.crop_h}x{cfg.crop_w} exceeds image size {h}x{w}")
    if len(source) < cfg.batch_size:
        raise ValueError("source dataset smaller than one batch")
    if cfg.mode != "source_only":
        if target is None:
            raise ValueError(f"mode {cfg.mode} needs a target dataset")
        if (target.cfg.height, target.cfg.width) != (h, w):
            raise ValueError("source and target image sizes differ")
        if len(target) < cfg.batch_size:
            raise ValueError("target dataset smaller than one batch")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class TrainResult:
    def __init__(self, state: TrainState, rows: list[dict]):
        self.state = state
        self.rows = rows

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows: list[dict], header: bool = True) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    if header:
        wr.writeheader()
    for r in rows:
        wr.writerow(r)
    return buf.getvalue()


def train(cfg: TrainConfig, source: Dataset, target: Dataset | None, out_dir=None,
          resume_from=None, max_epochs: int | None = None, manifest_extra: dict | None = None) -> TrainResult:
    """Run the epoch loop; with ``out_dir`` writes loss.csv and per-epoch checkpoints.

    Each source batch drives one generator-side step; after every
    ``gen_steps_per_cycle`` of them one discriminator step follows.
    ``max_epochs`` truncates the run (used for resume tests) without
    changing the schedule. ``manifest_extra`` is merged into every
    checkpoint manifest.
    """
    validate_inputs(cfg, source, target)
    state = TrainState(cfg)
    start_epoch = 0
    if resume_from is not None:
        load_checkpoint(resume_from, state)
        start_epoch = state.epoch + 1
    out = Path(out_dir) if out_dir is not None else None
    csv_path = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        if resume_from is None:
            csv_path.write_text(rows_to_csv([]))
    rows: list[dict] = []
    nb = len(source) // cfg.batch_size
    last_epoch = cfg.total_epochs if max_epochs is None else min(cfg.total_epochs, max_epochs)
    adversarial = cfg.mode != "source_only"

    for epoch in range(start_epoch, last_epoch):
        state.epoch = epoch
        lr = lr_schedule(epoch, cfg)
        perm_s = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(source))
        perm_r = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(target)) if adversarial else None
        aug = np.random.default_rng([cfg.seed, 3, epoch])
        epoch_rows = []
        d_losses, g_losses = [], []
        for b in range(nb):
            bs = _make_batch(source, perm_s[b * cfg.batch_size:(b + 1) * cfg.batch_size], aug, cfg.crop_h, cfg.crop_w)
            br = None
            if adversarial:
                ridx = perm_r[(np.arange(cfg.batch_size) + b * cfg.batch_size) % len(target)]
                br = _make_batch(target, ridx, aug, cfg.crop_h, cfg.crop_w)
            rep = train_step_generator_side(state, bs, br, lr)
            epoch_rows.append({"step": state.step, "epoch": epoch, "gan_d": "", "gan_g": _fmt(rep.gan_g) if adversarial else "",
                               "task": _fmt(rep.task), "privileged": _fmt(rep.privileged) if adversarial else "",
                               "perceptual": _fmt(rep.perceptual) if adversarial else "",
                               "total": _fmt(rep.total_generator_side), "lr": _fmt(lr)})
            if adversarial:
                g_losses.append(rep.gan_g)
            state.step += 1
            if adversarial and (b + 1) % cfg.gen_steps_per_cycle == 0:
                rep = train_step_discriminator(state, bs, br, lr)
                epoch_rows.append({"step": state.step, "epoch": epoch, "gan_d": _fmt(rep.gan_d), "gan_g": "",
                                   "task": "", "privileged": "", "perceptual": "", "total": "", "lr": _fmt(lr)})
                d_losses.append(rep.gan_d)
                state.step += 1
        rows.extend(epoch_rows)
        if csv_path is not None:
            with open(csv_path, "a") as f:
                f.write(rows_to_csv(epoch_rows, header=False))
        stop = None
        if adversarial and d_losses:
            state.history_d.append(float(np.mean(d_losses)))
            state.history_g.append(float(np.mean(g_losses)))
            es = cfg.early_stop
            if es.enabled:
                stop = early_stop_check(state.history_d, state.history_g, es.window, es.margin)
        if out is not None:
            save_checkpoint(state, out / "checkpoints" / f"epoch_{epoch:04d}.zip", manifest_extra)
        log.info("epoch %d done: step=%d lr=%.3g", epoch, state.step, lr)
        if stop is not None:
            w = cfg.early_stop.window
            state.early_stop = EarlyStopEvent(stop, state.history_d[stop - w + 1:stop + 1],
                                              state.history_g[stop - w + 1:stop + 1])
            log.info("early stop at epoch %d", stop)
            break
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / "final.zip", manifest_extra)
    return TrainResult(state, rows)


def predict_labels(T: nets.Network, images: np.ndarray, batch: int = 25) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        logits = T(Tensor(images[i:i + batch]), mode="eval")
        out.append(logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def adapt_images(G: nets.Network, images: np.ndarray, batch: int = 25) -> np.ndarray:
    return np.concatenate([G(Tensor(images[i:i + batch]), mode="eval").data for i in range(0, len(images), batch)])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
