"""The saliency network: multi-tap 3D encoder, four conspicuity decoder
branches, late fusion, gradient-reversal domain heads, and the per-domain
specialization bank (priors, learnable smoothing, per-domain BN stats).

Branches never exchange features before the fusion layer; each decodes its
own encoder tap to a full-resolution map in (0,1).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import filters, ops
from .errors import ConfigError, InputError, ModeError, ShapeError, UnknownDomainError
from .tensor import Tensor

ALL_BRANCHES = (1, 2, 3, 4)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    clip_len: int = 8
    height: int = 32
    width: int = 48
    in_channels: int = 1
    stem_channels: int = 16
    stem_spatial_stride: int = 1
    stage_channels: tuple = (16, 32, 64, 128)
    pool_strides: tuple = ((2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))
    decoder_channels: int = 8
    domain_count: int = 1
    enable_da: bool = False
    enable_dsl: bool = False
    enabled_branches: tuple = ALL_BRANCHES
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    da_channels: tuple = (16, 8)
    da_hidden: int = 16
    sigma_init: float = 1.5
    sigma_floor: float = 0.1

    @classmethod
    def paper_scale(cls, **overrides):
        """Full-size configuration: 16-frame 128x192 clips, deepest tap
        1024 channels at 2x4x6."""
        base = dict(clip_len=16, height=128, width=192, in_channels=3,
                    stem_channels=64, stem_spatial_stride=2,
                    stage_channels=(192, 480, 832, 1024),
                    pool_strides=((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2)),
                    decoder_channels=32)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.pool_strides) != 4:
            raise ConfigError("exactly 4 encoder stages are required "
                              "(one per decoder branch)")
        if self.stem_spatial_stride not in (1, 2):
            raise ConfigError(f"stem_spatial_stride must be 1 or 2, "
                              f"got {self.stem_spatial_stride}")
        branches = tuple(sorted(set(self.enabled_branches)))
        if not branches or any(b not in ALL_BRANCHES for b in branches):
            raise ConfigError(f"enabled_branches must be a nonempty subset of "
                              f"{ALL_BRANCHES}, got {self.enabled_branches}")
        if self.enable_da and self.enable_dsl:
            raise ConfigError("enable_da and enable_dsl are mutually exclusive")
        if (self.enable_da or self.enable_dsl) and self.domain_count < 2:
            raise ConfigError("domain adaptation / specialization needs "
                              "domain_count >= 2")
        if self.clip_len < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("clip_len, height and width must be positive")
        for st in self.pool_strides:
            if len(st) != 3 or any(s not in (1, 2) for s in st):
                raise ConfigError(f"pool strides must be triples of 1/2, got {st}")
            if st[1] != st[2]:
                raise ConfigError("spatial pool strides must be symmetric "
                                  "(decoders upsample isotropically)")
        self.tap_shapes()

    def tap_shapes(self):
        """Extents (C, T, H, W) of the four encoder taps."""
        t, h, w = self.clip_len, self.height, self.width
        ss = self.stem_spatial_stride
        for name, e in (("H", h), ("W", w)):
            if e % ss != 0:
                raise ConfigError(f"input {name}={e} not divisible by stem stride {ss}")
        h, w = h // ss, w // ss
        taps = []
        for i, (st, c) in enumerate(zip(self.pool_strides, self.stage_channels), 1):
            for name, e, s in (("T", t, st[0]), ("H", h, st[1]), ("W", w, st[2])):
                if e % s != 0:
                    raise ConfigError(
                        f"stage {i}: extent {name}={e} not divisible by pool stride {s}")
            t, h, w = t // st[0], h // st[1], w // st[2]
            if not _is_pow2(t):
                raise ConfigError(f"stage {i}: tap temporal extent {t} is not a power of two")
            for name, full, e in (("H", self.height, h), ("W", self.width, w)):
                if full % e != 0 or not _is_pow2(full // e):
                    raise ConfigError(
                        f"stage {i}: tap {name}={e} is not a power-of-two fraction "
                        f"of the input {name}={full}")
            if self.height // h != self.width // w:
                raise ConfigError(f"stage {i}: anisotropic tap downscale "
                                  f"{self.height // h} vs {self.width // w}")
            taps.append((c, t, h, w))
        return taps

    def branches(self):
        return tuple(sorted(set(self.enabled_branches)))

    def with_branches(self, branches):
        return replace(self, enabled_branches=tuple(sorted(set(branches))))


@dataclass
class ForwardResult:
    taps: list
    features: dict = field(default_factory=dict)
    conspicuity: dict = field(default_factory=dict)
    fused: Tensor = None
    final: Tensor = None
    domain_probs: dict = field(default_factory=dict)


class SaliencyModel:
    """Holds all learnable tensors and implements the computation graph."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.params = {}
        self.bn_stats = {}
        self._rng = np.random.default_rng(seed)
        self._taps = config.tap_shapes()
        self._build()

    # -- construction -------------------------------------------------------

    def _param(self, name, arr):
        t = Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def _conv_w(self, name, shape):
        fan_in = int(np.prod(shape[1:]))
        return self._param(name, self._rng.standard_normal(shape) * math.sqrt(2.0 / fan_in))

    def _fc_w(self, name, shape):
        return self._param(name, self._rng.standard_normal(shape) * math.sqrt(2.0 / shape[0]))

    def _make_bn(self, name, channels):
        self._param(f"{name}.scale", np.ones(channels))
        self._param(f"{name}.shift", np.zeros(channels))
        self.bn_stats[name] = ops.RunningStats(channels, self.config.bn_eps,
                                               self.config.bn_momentum)

    def _build(self):
        cfg = self.config
        self._conv_w("encoder.stem.conv", (cfg.stem_channels, cfg.in_channels, 3, 3, 3))
        self._make_bn("encoder.stem.bn", cfg.stem_channels)
        prev = cfg.stem_channels
        for i, c in enumerate(cfg.stage_channels, 1):
            self._conv_w(f"encoder.stage{i}.conv1", (c, prev, 3, 3, 3))
            self._make_bn(f"encoder.stage{i}.bn1", c)
            self._conv_w(f"encoder.stage{i}.conv2", (c, c, 3, 3, 3))
            self._make_bn(f"encoder.stage{i}.bn2", c)
            prev = c

        dc = cfg.decoder_channels
        for j in cfg.branches():
            c, t, h, w = self._taps[j - 1]
            for k in range(int(math.log2(t))):
                self._conv_w(f"branch{j}.tconv{k}.weight", (c, c, 3, 1, 1))
                self._param(f"branch{j}.tconv{k}.bias", np.zeros(c))
            ups = int(math.log2(cfg.height // h))
            ch = c
            for u in range(ups):
                self._conv_w(f"branch{j}.dec{u}.weight", (dc, ch, 3, 3))
                self._param(f"branch{j}.dec{u}.bias", np.zeros(dc))
                ch = dc
            self._conv_w(f"branch{j}.out.weight", (1, ch, 1, 1))
            self._param(f"branch{j}.out.bias", np.zeros(1))

        k = len(cfg.branches())
        self._param("fusion.weight", np.full((1, k, 1, 1), 1.0 / k))
        self._param("fusion.bias", np.zeros(1))

        if cfg.enable_da:
            d0, d1 = cfg.da_channels
            for j in cfg.branches():
                c = self._taps[j - 1][0]
                self._conv_w(f"da{j}.conv1.weight", (d0, c, 1, 1))
                self._param(f"da{j}.conv1.bias", np.zeros(d0))
                self._conv_w(f"da{j}.conv2.weight", (d1, d0, 1, 1))
                self._param(f"da{j}.conv2.bias", np.zeros(d1))
                self._fc_w(f"da{j}.fc1.weight", (d1, cfg.da_hidden))
                self._param(f"da{j}.fc1.bias", np.zeros(cfg.da_hidden))
                self._fc_w(f"da{j}.fc2.weight", (cfg.da_hidden, 1))
                self._param(f"da{j}.fc2.bias", np.zeros(1))

        if cfg.enable_dsl:
            raw = math.log(math.expm1(cfg.sigma_init - cfg.sigma_floor))
            for d in range(cfg.domain_count):
                for j in cfg.branches():
                    _, _, h, w = self._taps[j - 1]
                    sig = h / 4.0
                    ys = np.arange(h) - (h - 1) / 2.0
                    xs = np.arange(w) - (w - 1) / 2.0
                    prior = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * sig * sig))
                    self._param(f"dsl.prior.d{d}.b{j}", prior)
                self._param(f"dsl.sigma_raw.d{d}", np.full(1, raw))

    # -- small helpers ------------------------------------------------------

    def trainable(self):
        return dict(sorted(self.params.items()))

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def fusion_weights(self):
        """Learned per-branch fusion weights plus the bias, for reporting."""
        w = self.params["fusion.weight"].data.reshape(-1)
        out = {f"branch{j}": float(v) for j, v in zip(self.config.branches(), w)}
        out["bias"] = float(self.params["fusion.bias"].data[0])
        return out

    def domain_sigma(self, domain):
        self._check_domain(domain)
        raw = float(self.params[f"dsl.sigma_raw.d{domain}"].data[0])
        return self.config.sigma_floor + math.log1p(math.exp(-abs(raw))) + max(raw, 0.0)

    def _check_domain(self, domain):
        if not 0 <= domain < self.config.domain_count:
            raise UnknownDomainError(
                f"domain {domain} outside configured range 0..{self.config.domain_count - 1}")

    def _bn_domain(self, domain):
        return domain if self.config.enable_dsl else 0

    def _bias5(self, x, b):
        return ops.add(x, ops.reshape(b, (1, b.shape[0], 1, 1, 1)))

    def _bias4(self, x, b):
        return ops.add(x, ops.reshape(b, (1, b.shape[0], 1, 1)))

    def _bn(self, x, name, domain, training):
        return ops.batchnorm(x, self.params[f"{name}.scale"], self.params[f"{name}.shift"],
                             self.bn_stats[name], domain, training)

    # -- graph pieces -------------------------------------------------------

    def encode(self, clip, domain=0, training=False):
        """Run the 4-stage encoder; returns the four tap tensors."""
        cfg = self.config
        if not isinstance(clip, Tensor):
            clip = Tensor(np.asarray(clip, dtype=np.float32))
        if clip.ndim == 4:
            clip = Tensor(clip.data[None])
        want = (cfg.in_channels, cfg.clip_len, cfg.height, cfg.width)
        if clip.ndim != 5 or clip.shape[1:] != want:
            raise ConfigError(f"clip shape {tuple(clip.shape)} does not match "
                              f"configured [N,{','.join(map(str, want))}]")
        if cfg.enable_dsl:
            self._check_domain(domain)
        bd = self._bn_domain(domain)
        ss = cfg.stem_spatial_stride
        x = ops.conv3d(clip, self.params["encoder.stem.conv"], (1, ss, ss), (1, 1, 1))
        x = ops.relu(self._bn(x, "encoder.stem.bn", bd, training))
        taps = []
        for i, st in enumerate(cfg.pool_strides, 1):
            x = ops.conv3d(x, self.params[f"encoder.stage{i}.conv1"], (1, 1, 1), (1, 1, 1))
            x = ops.relu(self._bn(x, f"encoder.stage{i}.bn1", bd, training))
            x = ops.conv3d(x, self.params[f"encoder.stage{i}.conv2"], (1, 1, 1), (1, 1, 1))
            x = ops.relu(self._bn(x, f"encoder.stage{i}.bn2", bd, training))
            x = ops.maxpool3d(x, st, st)
            taps.append(x)
        return taps

    def branch_features(self, tap, branch_index, domain=0, training=False):
        """Temporal-removal stack (plus domain prior when specialization is
        on); output is purely spatial [N,C,H,W]."""
        j = branch_index
        if j not in self.config.branches():
            raise ConfigError(f"branch {j} is not enabled ({self.config.branches()})")
        c, t, h, w = self._taps[j - 1]
        if tuple(tap.shape[1:]) != (c, t, h, w):
            raise ConfigError(f"tap shape {tuple(tap.shape)} does not match "
                              f"configured branch {j} tap {(c, t, h, w)}")
        if not _is_pow2(t):
            raise ConfigError(f"tap temporal extent {t} is not a power of two")
        x = tap
        for k in range(int(math.log2(t))):
            x = ops.conv3d(x, self.params[f"branch{j}.tconv{k}.weight"], (2, 1, 1), (1, 0, 0))
            x = ops.relu(self._bias5(x, self.params[f"branch{j}.tconv{k}.bias"]))
        x = ops.reshape(x, (x.shape[0], c, h, w))
        if self.config.enable_dsl:
            self._check_domain(domain)
            prior = self.params[f"dsl.prior.d{domain}.b{j}"]
            x = ops.mul(x, ops.reshape(prior, (1, 1, h, w)))
        return x

    def decode_branch(self, features, branch_index):
        """2D conv + bilinear-upsample pairs up to full resolution, then a
        1x1 projection and logistic activation."""
        j = branch_index
        cfg = self.config
        _, _, h, _ = self._taps[j - 1]
        x = features
        for u in range(int(math.log2(cfg.height // h))):
            x = ops.conv2d(x, self.params[f"branch{j}.dec{u}.weight"], (1, 1), (1, 1))
            x = ops.relu(self._bias4(x, self.params[f"branch{j}.dec{u}.bias"]))
            x = ops.bilinear_upsample2x(x)
        x = ops.conv2d(x, self.params[f"branch{j}.out.weight"], (1, 1), (0, 0))
        x = self._bias4(x, self.params[f"branch{j}.out.bias"])
        return ops.sigmoid(x)

    def conspicuity_branch(self, tap, branch_index, domain=0, training=False):
        feats = self.branch_features(tap, branch_index, domain, training)
        return self.decode_branch(feats, branch_index)

    def fuse(self, maps):
        """1x1 convolution over the concatenated conspicuity maps, then
        logistic activation. ``maps`` follows enabled-branch order."""
        k = len(self.config.branches())
        if len(maps) != k:
            raise ShapeError(f"fuse expects {k} maps (enabled branches), got {len(maps)}")
        x = ops.concat_channels(list(maps))
        x = ops.conv2d(x, self.params["fusion.weight"], (1, 1), (0, 0))
        x = self._bias4(x, self.params["fusion.bias"])
        return ops.sigmoid(x)

    def domain_classify(self, features, branch_index, grl_lambda):
        """Probability that the clip comes from the target domain, with the
        reversal layer between trunk features and the classifier stack."""
        if not self.config.enable_da:
            raise ModeError("domain_classify requires enable_da")
        j = branch_index
        x = ops.grl(features, grl_lambda)
        x = ops.conv2d(x, self.params[f"da{j}.conv1.weight"], (1, 1), (0, 0))
        x = ops.relu(self._bias4(x, self.params[f"da{j}.conv1.bias"]))
        x = ops.conv2d(x, self.params[f"da{j}.conv2.weight"], (1, 1), (0, 0))
        x = ops.relu(self._bias4(x, self.params[f"da{j}.conv2.bias"]))
        x = ops.mean(x, axes=(2, 3))
        x = ops.relu(ops.fully_connected(x, self.params[f"da{j}.fc1.weight"],
                                         self.params[f"da{j}.fc1.bias"]))
        x = ops.fully_connected(x, self.params[f"da{j}.fc2.weight"],
                                self.params[f"da{j}.fc2.bias"])
        return ops.sigmoid(x)

    def smooth_output(self, s_map, domain):
        """Blur with a Gaussian rebuilt from the domain's learnable sigma;
        the kernel is normalized, so constants pass through unchanged."""
        if not self.config.enable_dsl:
            raise ModeError("smooth_output requires enable_dsl")
        self._check_domain(domain)
        raw = self.params[f"dsl.sigma_raw.d{domain}"]
        sigma = ops.add_scalar(ops.softplus(raw), self.config.sigma_floor)
        side = filters.kernel_side(self.domain_sigma(domain))
        r2 = Tensor(filters.radius_sq_grid(side).astype(s_map.dtype.type))
        expo = ops.div(ops.mul_scalar(r2, -0.5), ops.mul(sigma, sigma))
        wraw = ops.exp(expo)
        kern = ops.reshape(ops.div(wraw, ops.sum(wraw)), (1, 1, side, side))
        return ops.conv2d(s_map, kern, (1, 1), (side // 2, side // 2))

    # -- whole-model passes -------------------------------------------------

    def forward(self, clip, domain=0, training=False, grl_lambda=0.0,
                want_da=False, compute_saliency=True):
        taps = self.encode(clip, domain, training)
        res = ForwardResult(taps=taps)
        for j in self.config.branches():
            feats = self.branch_features(taps[j - 1], j, domain, training)
            res.features[j] = feats
            if compute_saliency:
                res.conspicuity[j] = self.decode_branch(feats, j)
            if want_da:
                res.domain_probs[j] = self.domain_classify(feats, j, grl_lambda)
        if compute_saliency:
            res.fused = self.fuse([res.conspicuity[j] for j in self.config.branches()])
            res.final = (self.smooth_output(res.fused, domain)
                         if self.config.enable_dsl else res.fused)
        return res

    def predict_video(self, frames, domain=0, postfilter_sigma=None, clip_log=None):
        """One saliency map per frame via sliding windows.

        Frames before the first full window use reversed clips. Every map is
        post-filtered with a fixed normalized Gaussian (sigma 5 at the
        128-pixel reference height, scaled with the configured height).
        BN statistics for the domain must exist (train or load first).
        """
        cfg = self.config
        t_len = cfg.clip_len
        frames = [self._as_chw(f) for f in frames]
        if len(frames) < t_len:
            raise InputError(f"video has {len(frames)} frames, need at least {t_len}")
        sigma = (postfilter_sigma if postfilter_sigma is not None
                 else 5.0 * cfg.height / 128.0)
        maps = []
        for t in range(1, len(frames) + 1):
            idxs = (list(range(t - t_len, t)) if t >= t_len
                    else list(range(t + t_len - 2, t - 2, -1)))
            clip = np.stack([frames[i] for i in idxs], axis=1)
            out = self.forward(Tensor(clip[None]), domain, training=False)
            m = filters.blur2d(out.final.data[0, 0], sigma)
            maps.append(m)
            if clip_log is not None:
                clip_log.append(tuple(idxs))
        return maps

    def _as_chw(self, frame):
        f = np.asarray(frame, dtype=np.float32)
        if f.ndim == 2:
            f = np.repeat(f[None], self.config.in_channels, axis=0)
        if f.shape != (self.config.in_channels, self.config.height, self.config.width):
            raise InputError(f"frame shape {f.shape} does not match configured "
                             f"[{self.config.in_channels},{self.config.height},"
                             f"{self.config.width}]")
        return f
