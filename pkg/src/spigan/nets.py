"""Generator, patch discriminator, FCN-style segmenter and the frozen feature pyramid.

Every network is a :class:`Network`: a :class:`ParamSet` plus a forward
function ``net(x, mode=..., rng=..., frozen=...)``. ``frozen=True`` runs the
forward with detached parameters and leaves batch-norm buffers untouched,
which is how one phase of the alternating optimisation holds the other
networks fixed.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff_core as ad
from .autodiff_core import RunningStats, Tensor

INIT_STD = 0.02
LEAKY_SLOPE = 0.2
PHI_SEED = 20190506


@dataclass
class NetworkSpec:
    kind: str  # generator | discriminator | segmenter
    base_channels: int = 16
    n_resblocks: int = 2
    n_layers: int = 3
    n_classes: int = 5
    norm: str = "batch"
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in ("generator", "discriminator", "segmenter"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.norm not in ("batch", "instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.n_resblocks < 0:
            raise ValueError("n_resblocks must be >= 0")
        if self.kind == "segmenter" and self.n_classes < 2:
            raise ValueError("segmenters need n_classes >= 2")


class ParamSet:
    """Named trainable tensors plus named batch-norm buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, RunningStats] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_elements(self) -> int:
        return int(np.sum([t.size for t in self.params.values()]))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of parameters and buffers."""
        out = {name: t.data for name, t in self.params.items()}
        for name, rs in self.buffers.items():
            out[f"{name}.running_mean"] = rs.mean
            out[f"{name}.running_var"] = rs.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {t.shape}")
            t.data = src.copy()
        for name, rs in self.buffers.items():
            rs.mean = np.asarray(arrays[f"{name}.running_mean"], dtype=np.float64).copy()
            rs.var = np.asarray(arrays[f"{name}.running_var"], dtype=np.float64).copy()


class Network:
    def __init__(self, spec, params: ParamSet, fn: Callable, out_channels: int | None = None):
        self.spec = spec
        self.params = params
        self._fn = fn
        self.out_channels = out_channels

    def __call__(self, x: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 frozen: bool = False) -> Tensor:
        if frozen:
            p = {name: t.detach() for name, t in self.params}
        else:
            p = self.params.params
        ctx = _Ctx(p, self.params.buffers, mode, rng, update_stats=not frozen)
        return self._fn(ctx, x)


class _Ctx:
    """Per-forward bundle of parameters, buffers and mode flags."""

    def __init__(self, p, buffers, mode, rng, update_stats):
        self.p = p
        self.buffers = buffers
        self.mode = mode
        self.rng = rng
        self.update_stats = update_stats

    def conv(self, name, x, stride=1, padding=1):
        return ad.conv2d(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"], stride=stride, padding=padding)

    def norm(self, name, x, kind):
        if kind == "none":
            return x
        if kind == "instance":
            return instance_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"])
        return ad.batch_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"], mode=self.mode,
                             running=self.buffers[name], update_stats=self.update_stats)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = ad.BN_EPS) -> Tensor:
    """Per-sample, per-channel normalisation over (H, W); no running stats."""
    n, c, h, w = x.shape
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gxh = g * gamma.data[None, :, None, None]
        gx = inv / m * (m * gxh - gxh.sum(axis=(2, 3), keepdims=True)
                        - xhat * (gxh * xhat).sum(axis=(2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return ad._emit(out, (x, gamma, beta), bw)


class _Init:
    def __init__(self, rng: np.random.Generator, std: float, norm: str):
        self.rng = rng
        self.std = std
        self.norm_kind = norm
        self.ps = ParamSet()

    def conv(self, name, cin, cout, k):
        if self.std > 0:
            w = self.rng.normal(0.0, self.std, size=(cout, cin, k, k))
        else:
            w = np.zeros((cout, cin, k, k))
        self.ps.add(f"{name}.weight", w)
        self.ps.add(f"{name}.bias", np.zeros(cout))

    def norm(self, name, c, kind=None):
        kind = kind or self.norm_kind
        if kind == "none":
            return
        self.ps.add(f"{name}.gamma", np.ones(c))
        self.ps.add(f"{name}.beta", np.zeros(c))
        if kind == "batch":
            self.ps.buffers[name] = RunningStats(c)


def _check_div4(x: Tensor, what: str) -> None:
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ValueError(f"{what} needs spatial dims divisible by 4, got {h}x{w}")


def build_generator(spec: NetworkSpec, rng: np.random.Generator, init_std: float = INIT_STD) -> Network:
    """Encoder / residual trunk / decoder image translator, output in (-1, 1)."""
    b, nk = spec.base_channels, spec.norm
    init = _Init(rng, init_std, nk)
    init.conv("stem", 3, b, 3)
    init.norm("stem.norm", b)
    init.conv("down1", b, 2 * b, 3)
    init.norm("down1.norm", 2 * b)
    init.conv("down2", 2 * b, 4 * b, 3)
    init.norm("down2.norm", 4 * b)
    for i in range(spec.n_resblocks):
        init.conv(f"res{i}.conv1", 4 * b, 4 * b, 3)
        init.norm(f"res{i}.norm1", 4 * b)
        init.conv(f"res{i}.conv2", 4 * b, 4 * b, 3)
        init.norm(f"res{i}.norm2", 4 * b)
    init.conv("up1", 4 * b, 2 * b, 3)
    init.norm("up1.norm", 2 * b)
    init.conv("up2", 2 * b, b, 3)
    init.norm("up2.norm", b)
    init.conv("out", b, 3, 3)

    def forward(c: _Ctx, x: Tensor) -> Tensor:
        _check_div4(x, "generator")
        h = ad.relu(c.norm("stem.norm", c.conv("stem", x), nk))
        h = ad.relu(c.norm("down1.norm", c.conv("down1", h, stride=2), nk))
        h = ad.relu(c.norm("down2.norm", c.conv("down2", h, stride=2), nk))
        for i in range(spec.n_resblocks):
            r = ad.relu(c.norm(f"res{i}.norm1", c.conv(f"res{i}.conv1", h), nk))
            r = ad.dropout(r, spec.dropout, c.rng, c.mode)
            r = c.norm(f"res{i}.norm2", c.conv(f"res{i}.conv2", r), nk)
            h = h + r
        h = ad.relu(c.norm("up1.norm", c.conv("up1", ad.upsample2x(h)), nk))
        h = ad.relu(c.norm("up2.norm", c.conv("up2", ad.upsample2x(h)), nk))
        return ad.tanh(c.conv("out", h))

    return Network(spec, init.ps, forward, out_channels=3)


def build_discriminator(spec: NetworkSpec, rng: np.random.Generator, init_std: float = INIT_STD) -> Network:
    """PatchGAN: stride-2 conv stages, then a 1-channel raw score map."""
    b, nk = spec.base_channels, spec.norm
    init = _Init(rng, init_std, nk)
    cin = 3
    widths = []
    for i in range(spec.n_layers):
        cout = b * min(2 ** i, 8)
        init.conv(f"layer{i}", cin, cout, 4)
        if i > 0:
            init.norm(f"layer{i}.norm", cout)
        widths.append(cout)
        cin = cout
    init.conv("head", cin, 1, 3)

    def forward(c: _Ctx, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h >> spec.n_layers < 1 or w >> spec.n_layers < 1:
            raise ValueError(f"input {h}x{w} collapses below 1x1 after {spec.n_layers} stride-2 stages")
        y = x
        for i in range(spec.n_layers):
            y = c.conv(f"layer{i}", y, stride=2, padding=1)
            if i > 0:
                y = c.norm(f"layer{i}.norm", y, nk)
            y = ad.leaky_relu(y, LEAKY_SLOPE)
        return c.conv("head", y)

    return Network(spec, init.ps, forward, out_channels=1)


def build_segmenter(spec: NetworkSpec, rng: np.random.Generator, out_channels: int,
                    init_std: float = INIT_STD) -> Network:
    """Two-scale FCN: shared by the task net (logits) and the privileged net.

    ``out_channels == 1`` gives the privileged head: a sigmoid map in [0, 1].
    """
    b, nk = spec.base_channels, spec.norm
    init = _Init(rng, init_std, nk)
    init.conv("enc0", 3, b, 3)
    init.norm("enc0.norm", b)
    init.conv("enc1", b, 2 * b, 3)
    init.norm("enc1.norm", 2 * b)
    init.conv("enc2", 2 * b, 4 * b, 3)
    init.norm("enc2.norm", 4 * b)
    init.conv("enc3", 4 * b, 4 * b, 3)
    init.norm("enc3.norm", 4 * b)
    init.conv("score2", 4 * b, out_channels, 1)
    init.conv("skip1", 2 * b, out_channels, 1)
    init.conv("skip0", b, out_channels, 1)
    sigmoid_head = out_channels == 1

    def forward(c: _Ctx, x: Tensor) -> Tensor:
        _check_div4(x, "segmenter")
        e0 = ad.relu(c.norm("enc0.norm", c.conv("enc0", x), nk))
        e1 = ad.relu(c.norm("enc1.norm", c.conv("enc1", e0, stride=2), nk))
        e2 = ad.relu(c.norm("enc2.norm", c.conv("enc2", e1, stride=2), nk))
        e3 = ad.relu(c.norm("enc3.norm", c.conv("enc3", e2), nk))
        s = c.conv("score2", e3, padding=0)
        s = ad.upsample2x(s) + c.conv("skip1", e1, padding=0)
        s = ad.upsample2x(s) + c.conv("skip0", e0, padding=0)
        return ad.sigmoid(s) if sigmoid_head else s

    return Network(spec, init.ps, forward, out_channels=out_channels)


@dataclass
class PhiSpec:
    kind: str = "phi"
    widths: tuple = (8, 16, 32)
    seed: int = PHI_SEED


def feature_extractor_phi(seed: int = PHI_SEED, widths=(8, 16, 32)) -> Network:
    """Frozen random conv pyramid: returns [x, a1, a2, a3] at strides 1, 2, 4, 8.

    Stands in for pretrained perceptual features; weights are He-scaled so
    activations keep their magnitude through the stages.
    """
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    cin = 3
    for i, cout in enumerate(widths):
        std = np.sqrt(2.0 / (cin * 9))
        t = ps.add(f"stage{i}.weight", rng.normal(0.0, std, size=(cout, cin, 3, 3)))
        t.requires_grad = False
        t = ps.add(f"stage{i}.bias", np.zeros(cout))
        t.requires_grad = False
        cin = cout

    def forward(c: _Ctx, x: Tensor) -> list[Tensor]:
        feats = [x]
        h = x
        for i in range(len(widths)):
            h = ad.leaky_relu(c.conv(f"stage{i}", h, stride=2, padding=1), LEAKY_SLOPE)
            feats.append(h)
        return feats

    return Network(PhiSpec(widths=tuple(widths), seed=seed), ps, forward)


# ---------------------------------------------------------------------------
# checkpoints: zip of SPGTENS1 tensors + manifest.json

_ZIP_DATE = (2019, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write named arrays and a JSON manifest; byte-deterministic."""
    man = dict(manifest)
    man["tensors"] = {name: list(np.shape(a)) for name, a in arrays.items()}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(man, indent=2, sort_keys=True).encode())
        for name in sorted(arrays):
            _zip_write(zf, f"tensors/{name}.spgt", ad.tensor_to_bytes(arrays[name]))


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in manifest["tensors"]:
            arrays[name] = ad.tensor_from_bytes(zf.read(f"tensors/{name}.spgt")).data
    return arrays, manifest


def save_networks(path, nets: dict[str, Network], extra: dict | None = None) -> None:
    arrays = {}
    specs = {}
    for key, net in nets.items():
        for name, a in net.params.state_arrays().items():
            arrays[f"{key}/{name}"] = a
        specs[key] = {"spec": asdict(net.spec), "out_channels": net.out_channels}
    manifest = {"networks": specs}
    if extra:
        manifest.update(extra)
    save_archive(path, arrays, manifest)


def load_networks(path, nets: dict[str, Network]) -> dict:
    arrays, manifest = load_archive(path)
    for key, net in nets.items():
        prefix = f"{key}/"
        net.params.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    return manifest


def archive_bytes(arrays: dict[str, np.ndarray], manifest: dict) -> bytes:
    buf = io.BytesIO()
    save_archive(buf, arrays, manifest)
    return buf.getvalue()
