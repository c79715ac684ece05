"""Optimization loops for the three regimes, plus evaluation.

Regimes: ``supervised`` (single labeled source), ``da`` (labeled source +
unlabeled target through the gradient reversal heads), ``dsl`` (several
labeled sources with per-domain modules, one domain per mini-batch in
round-robin order).

One iteration is one parameter update: ``accumulation_steps`` micro-batches
of ``micro_batch`` clips are forwarded, gradients accumulate, and Adam
applies the averaged gradient. Everything is seeded and single-threaded, so
identical plans give bit-identical checkpoints.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, losses, metrics, ops
from .checkpoint import save_checkpoint, write_checkpoint
from .errors import ConfigError, InputError
from .metrics import EvalRecord
from .tensor import Tensor, record_tape

REGIMES = ("supervised", "da", "dsl")


@dataclass
class TrainPlan:
    total_iterations: int = 2500
    lr: float = 1e-3
    weight_decay: float = 2e-7
    micro_batch: int = 8
    accumulation_steps: int = 25
    regime: str = "supervised"
    seed: int = 0
    log_every: int = 10
    validate_every: int = 0
    checkpoint_every: int = 0
    target_update_classifier_only: bool = False
    bn_batch_stats: bool = True

    @property
    def logical_batch(self):
        return self.micro_batch * self.accumulation_steps

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for name in ("total_iterations", "micro_batch", "accumulation_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def lambda_schedule(iteration, total_iterations):
    """Reversal strength ramp: 2 / (1 + exp(-10 p)) - 1 with p = it/total."""
    if total_iterations <= 0:
        raise ConfigError("total_iterations must be positive")
    if not 0 <= iteration <= total_iterations:
        raise ConfigError(f"iteration {iteration} outside [0, {total_iterations}]")
    p = iteration / total_iterations
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


class Adam:
    """Adam with L2 regularization added to the gradient, float32 state."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = sorted(params)
        self.params = params
        self.lr = np.float32(lr)
        self.wd = np.float32(weight_decay)
        self.b1 = np.float32(beta1)
        self.b2 = np.float32(beta2)
        self.eps = np.float32(eps)
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self, grad_scale=1.0):
        self.t += 1
        scale = np.float32(grad_scale)
        c1 = np.float32(1.0 - float(self.b1) ** self.t)
        c2 = np.float32(1.0 - float(self.b2) ** self.t)
        for n in self.names:
            p = self.params[n]
            g = (p.grad * scale if p.grad is not None
                 else np.zeros_like(p.data))
            if self.wd != 0:
                g = g + self.wd * p.data
            self.m[n] = self.b1 * self.m[n] + (np.float32(1) - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (np.float32(1) - self.b2) * (g * g)
            mhat = self.m[n] / c1
            vhat = self.v[n] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class ClipSampler:
    """Uniform random (video, target-frame) pairs from a manifest."""

    def __init__(self, manifest, clip_len, rng):
        self.manifest = manifest
        self.clip_len = clip_len
        self.rng = rng
        self.entries = [e for e in manifest.videos if e.frame_count >= clip_len]
        if not self.entries:
            raise InputError(
                f"no video in {manifest.root} has >= {clip_len} frames")

    def sample(self):
        e = self.entries[int(self.rng.integers(len(self.entries)))]
        t = int(self.rng.integers(self.clip_len, e.frame_count + 1))
        return e.video_id, t


def _load_micro(manifest, sampler, cfg, n):
    clips, gts = [], []
    for _ in range(n):
        vid, t = sampler.sample()
        clip, gt, _, _ = data.load_clip(manifest, vid, t, cfg.clip_len,
                                        size=(cfg.height, cfg.width),
                                        channels=cfg.in_channels)
        clips.append(clip)
        gts.append(gt)
    return np.stack(clips), gts


def _batch_saliency_loss(model, res, gts):
    branches = model.config.branches()
    total = None
    for n, gt in enumerate(gts):
        s_n = ops.slice_batch(res.final, n)
        consp_n = [ops.slice_batch(res.conspicuity[j], n) for j in branches]
        term = losses.multi_level_loss(s_n, consp_n, gt[None])
        total = term if total is None else ops.add(total, term)
    return ops.mul_scalar(total, 1.0 / len(gts))


# ---------------------------------------------------------------------------
# one-iteration steps (gradient accumulation inside)


def step_supervised(model, opt, sampler, plan, manifest, domain=0):
    model.zero_grads()
    loss_sum = 0.0
    for _ in range(plan.accumulation_steps):
        clips, gts = _load_micro(manifest, sampler, model.config, plan.micro_batch)
        with record_tape() as tape:
            res = model.forward(Tensor(clips), domain=domain,
                                training=plan.bn_batch_stats)
            loss = _batch_saliency_loss(model, res, gts)
        tape.backward(loss)
        loss_sum += loss.item()
    opt.step(1.0 / plan.accumulation_steps)
    return loss_sum / plan.accumulation_steps


def step_da(model, opt, src_sampler, tgt_sampler, plan, iteration,
            src_manifest, tgt_manifest):
    lam = (0.0 if plan.target_update_classifier_only
           else lambda_schedule(iteration, plan.total_iterations))
    model.zero_grads()
    ls_sum = 0.0
    ld_sum = 0.0
    for _ in range(plan.accumulation_steps):
        clips, gts = _load_micro(src_manifest, src_sampler, model.config,
                                 plan.micro_batch)
        with record_tape() as tape:
            res = model.forward(Tensor(clips), domain=0,
                                training=plan.bn_batch_stats,
                                grl_lambda=lam, want_da=True)
            l_s = _batch_saliency_loss(model, res, gts)
            l_d = [losses.domain_nll(0, res.domain_probs[j])
                   for j in model.config.branches()]
            loss = losses.total_loss(l_s, l_d)
        tape.backward(loss)
        ls_sum += l_s.item()
        ld_sum += sum(t.item() for t in l_d)

        clips_t, _ = _load_micro(tgt_manifest, tgt_sampler, model.config,
                                 plan.micro_batch)
        with record_tape() as tape:
            res_t = model.forward(Tensor(clips_t), domain=1,
                                  training=plan.bn_batch_stats,
                                  grl_lambda=lam, want_da=True,
                                  compute_saliency=False)
            l_dt = [losses.domain_nll(1, res_t.domain_probs[j])
                    for j in model.config.branches()]
            loss_t = losses.total_loss(None, l_dt)
        tape.backward(loss_t)
        ld_sum += sum(t.item() for t in l_dt)
    opt.step(1.0 / plan.accumulation_steps)
    return (ls_sum / plan.accumulation_steps,
            ld_sum / plan.accumulation_steps, lam)


def step_dsl(model, opt, samplers, plan, micro_counter):
    domains = sorted(samplers)
    model.zero_grads()
    loss_sum = 0.0
    for a in range(plan.accumulation_steps):
        d = domains[(micro_counter + a) % len(domains)]
        manifest, sampler = samplers[d]
        clips, gts = _load_micro(manifest, sampler, model.config, plan.micro_batch)
        with record_tape() as tape:
            res = model.forward(Tensor(clips), domain=d,
                                training=plan.bn_batch_stats)
            loss = _batch_saliency_loss(model, res, gts)
        tape.backward(loss)
        loss_sum += loss.item()
    opt.step(1.0 / plan.accumulation_steps)
    return loss_sum / plan.accumulation_steps, micro_counter + plan.accumulation_steps


# ---------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    final_step: int = 0
    best_val_nss: float = None
    best_checkpoint: bytes = None


def train(model, plan, source=None, target=None, datasets=None,
          val_manifest=None, out_dir=None, log=print):
    """Run a full training session; returns history and best-val snapshot.

    ``source``: manifest for supervised and da; ``target``: unlabeled
    manifest for da; ``datasets``: {domain: manifest} for dsl.
    """
    plan.validate()
    rng = np.random.default_rng(plan.seed)
    cfg = model.config
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logfile = open(out_dir / "train_log.txt", "w") if out_dir is not None else None

    def emit(line):
        if logfile is not None:
            logfile.write(line + "\n")
        if log is not None:
            log(line)

    if plan.regime == "supervised":
        if source is None:
            raise ConfigError("supervised regime needs a source manifest")
        sampler = ClipSampler(source, cfg.clip_len, rng)
    elif plan.regime == "da":
        if source is None or target is None:
            raise ConfigError("da regime needs source and target manifests")
        if not cfg.enable_da:
            raise ConfigError("da regime needs a model with enable_da")
        sampler = ClipSampler(source, cfg.clip_len, rng)
        tgt_sampler = ClipSampler(target, cfg.clip_len, rng)
    else:
        if not datasets or len(datasets) < 2:
            raise ConfigError("dsl regime needs >= 2 dataset manifests")
        if not cfg.enable_dsl:
            raise ConfigError("dsl regime needs a model with enable_dsl")
        if any(not 0 <= d < cfg.domain_count for d in datasets):
            raise ConfigError("dataset domain tags exceed configured domain_count")
        samplers = {d: (m, ClipSampler(m, cfg.clip_len, rng))
                    for d, m in sorted(datasets.items())}

    opt = Adam(model.params, plan.lr, plan.weight_decay)
    result = TrainResult()
    micro_counter = 0
    try:
        for it in range(plan.total_iterations):
            if plan.regime == "supervised":
                loss = step_supervised(model, opt, sampler, plan, source)
                entry = {"iteration": it + 1, "loss": loss, "lambda": 0.0}
                line = f"iter={it + 1}/{plan.total_iterations} loss={loss:.6f}"
            elif plan.regime == "da":
                l_s, l_d, lam = step_da(model, opt, sampler, tgt_sampler, plan,
                                        it, source, target)
                entry = {"iteration": it + 1, "loss": l_s + l_d, "l_s": l_s,
                         "l_d": l_d, "lambda": lam}
                line = (f"iter={it + 1}/{plan.total_iterations} l_s={l_s:.6f} "
                        f"l_d={l_d:.6f} lambda={lam:.6f}")
            else:
                loss, micro_counter = step_dsl(model, opt, samplers, plan,
                                               micro_counter)
                entry = {"iteration": it + 1, "loss": loss, "lambda": 0.0}
                line = f"iter={it + 1}/{plan.total_iterations} loss={loss:.6f}"

            if plan.log_every and (it + 1) % plan.log_every == 0:
                emit(line)
            if (plan.validate_every and val_manifest is not None
                    and (it + 1) % plan.validate_every == 0):
                rec = evaluate(model, val_manifest)
                val_nss = rec.aggregate()["nss"]
                entry["val_nss"] = val_nss
                emit(f"iter={it + 1} val_nss="
                     f"{'nan' if val_nss is None else f'{val_nss:.4f}'}")
                if val_nss is not None and (result.best_val_nss is None
                                            or val_nss > result.best_val_nss):
                    result.best_val_nss = val_nss
                    result.best_checkpoint = save_checkpoint(model, it + 1)
            if (plan.checkpoint_every and out_dir is not None
                    and (it + 1) % plan.checkpoint_every == 0):
                write_checkpoint(model, out_dir / f"checkpoint_{it + 1:06d}.bin",
                                 it + 1)
            result.history.append(entry)
        result.final_step = plan.total_iterations
        if out_dir is not None:
            write_checkpoint(model, out_dir / "checkpoint_final.bin",
                             plan.total_iterations)
            if result.best_checkpoint is not None:
                (out_dir / "checkpoint_best.bin").write_bytes(result.best_checkpoint)
    finally:
        if logfile is not None:
            logfile.close()
    return result


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, manifest, report_path=None, domain=None, sauc_seed=0):
    """Predict every video, score all five metrics, optionally write the CSV.

    Shuffled-AUC negatives pool the fixations of the manifest's other
    videos; sampling is seeded per frame for determinism.
    """
    cfg = model.config
    size = (cfg.height, cfg.width)
    domain = manifest.domain if domain is None else domain
    record = EvalRecord()

    fixmaps = {}
    natives = {}
    for entry in manifest.videos:
        native = data.read_pnm(entry.frames_dir / "000000.pgm").shape[:2]
        natives[entry.video_id] = native
        fixations = data.load_fixations(entry)
        acc = np.zeros(size, dtype=np.uint8)
        per_frame = {}
        for fidx in range(entry.frame_count):
            fm = data.fixation_map(fixations.get(fidx, []), native, size)
            per_frame[fidx] = fm
            acc |= fm
        fixmaps[entry.video_id] = (per_frame, acc)

    for vi, entry in enumerate(manifest.videos):
        frames = [data.load_frame(entry.frames_dir / f"{i:06d}.pgm", size,
                                  cfg.in_channels)
                  for i in range(entry.frame_count)]
        maps = model.predict_video(frames, domain=domain)
        others = np.zeros(size, dtype=np.uint8)
        for vid, (_, acc) in fixmaps.items():
            if vid != entry.video_id:
                others |= acc
        per_frame = fixmaps[entry.video_id][0]
        for fidx in range(entry.frame_count):
            gt = data.load_gt(entry, fidx, size)
            fm = per_frame[fidx]
            pred = maps[fidx]
            record.add_frame(entry.video_id, fidx, {
                "nss": metrics.nss(pred, fm),
                "cc": metrics.cc(pred, gt),
                "sim": metrics.sim(pred, gt),
                "aucj": metrics.auc_judd(pred, fm),
                "sauc": metrics.shuffled_auc(
                    pred, fm, others,
                    seed=sauc_seed * 1000003 + vi * 10007 + fidx),
            })

    if report_path is not None:
        record.write_csv(report_path)
    return record


# ---------------------------------------------------------------------------
# linear probe for feature separability


def collect_branch_features(model, manifest, n_clips, seed=0):
    """Spatial-mean branch features for random clips, inference mode."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    sampler = ClipSampler(manifest, cfg.clip_len, rng)
    feats = []
    for _ in range(n_clips):
        vid, t = sampler.sample()
        clip, _, _, _ = data.load_clip(manifest, vid, t, cfg.clip_len,
                                       size=(cfg.height, cfg.width),
                                       channels=cfg.in_channels)
        res = model.forward(Tensor(clip[None]), domain=0, training=False,
                            compute_saliency=False)
        vec = np.concatenate([res.features[j].data.mean(axis=(2, 3)).ravel()
                              for j in cfg.branches()])
        feats.append(vec.astype(np.float64))
    return np.stack(feats)


def domain_probe_accuracy(model, manifest_a, manifest_b, n_clips=40,
                          steps=400, lr=0.5, seed=0):
    """Held-out accuracy of a logistic probe separating the two domains on
    frozen features. High accuracy = domain-specific features."""
    fa = collect_branch_features(model, manifest_a, n_clips, seed)
    fb = collect_branch_features(model, manifest_b, n_clips, seed + 1)
    x = np.concatenate([fa, fb])
    y = np.concatenate([np.zeros(len(fa)), np.ones(len(fb))])
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-8
    x = (x - mu) / sd
    rng = np.random.default_rng(seed + 2)
    order = rng.permutation(len(x))
    cut = len(x) // 2
    tr, te = order[:cut], order[cut:]

    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(steps):
        z = x[tr] @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - y[tr]
        w -= lr * (x[tr].T @ g / len(tr) + 1e-4 * w)
        b -= lr * g.mean()
    pred = (x[te] @ w + b) > 0
    return float((pred == y[te]).mean())
