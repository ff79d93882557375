"""Training, evaluation and benchmarking for the interpolation model.

The recipe is plain: L1 loss against all interior target frames, AdamW with
decoupled weight decay, linear warmup followed by cosine decay, global-norm
gradient clipping at 1.0. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import math
import os
import statistics
import time

import numpy as np

from . import tensor as T
from .attention import GranularityConfig
from .metrics import aggregate, psnr, ssim, write_metrics_csv
from .model import GaraMoSt, ModelConfig
from .phantom import make_samples, random_samples
from .tensor import NonFiniteError, Tensor

__all__ = ["lr_schedule", "AdamW", "l1_loss", "clip_grad_norm",
           "TrainingDiverged", "build_model", "train_model",
           "evaluate_model", "baseline_frames", "bench_model",
           "load_sequence_dir", "load_dataset"]


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(step, total_steps, warmup_steps, lr_peak, lr_final):
    """Linear warmup 0 -> lr_peak, then cosine decay to lr_final.

    Defined on 0 <= step <= total_steps. The ramp hits lr_peak exactly at
    step == warmup_steps (so the midpoint is lr_peak / 2) and the cosine
    hits lr_final exactly at step == total_steps. The training loop
    evaluates it at step + 1 so the very first update is one ramp increment
    rather than zero.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_peak
    progress = (step - warmup_steps) / span
    return lr_final + (lr_peak - lr_final) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with decoupled weight decay (applied before the moment update)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=6e-5):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def l1_loss(pred, target):
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    return T.tmean(T.absolute(T.sub(pred, target)))


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def build_model(cfg):
    gran = GranularityConfig(cfg.granularity_a, cfg.granularity_b)
    return GaraMoSt(ModelConfig(granularity=gran, deep_structs=cfg.deep_structs,
                                seed=cfg.seed))


def _t_list(n_interp):
    return [k / (n_interp + 1) for k in range(1, n_interp + 1)]


def baseline_frames(i0, i1):
    """The analytic bootstrap output: clamp((I0 + I1) / 2, 0, 1)."""
    return np.clip((i0 + i1) / 2.0, 0.0, 1.0)


def load_sequence_dir(path):
    """Load one sequence directory of frame_0000.pgm ... as float frames."""
    from . import pgm

    names = sorted(n for n in os.listdir(path) if n.endswith(".pgm"))
    if not names:
        raise ValueError(f"no .pgm frames in {path}")
    frames = []
    for name in names:
        samples, maxval = pgm.read_pgm(os.path.join(path, name))
        frames.append(pgm.to_float(samples, maxval))
    return np.stack(frames)


def load_dataset(path, n_interp):
    """Windowed samples from a sequence dir, or a dir of sequence dirs.

    Returns batched arrays (i0, i1, targets, t_list) with i0/i1 shaped
    (B, 1, H, W) and targets (n_interp, B, 1, H, W).
    """
    subdirs = sorted(d for d in os.listdir(path)
                     if os.path.isdir(os.path.join(path, d)))
    if subdirs:
        seq_dirs = [os.path.join(path, d) for d in subdirs]
    else:
        seq_dirs = [path]
    samples = []
    for d in seq_dirs:
        samples.extend(make_samples(load_sequence_dir(d), n_interp))
    t_list = samples[0].t_list
    i0 = np.stack([s.i0 for s in samples])[:, None].astype(np.float32)
    i1 = np.stack([s.i1 for s in samples])[:, None].astype(np.float32)
    targets = np.stack([s.targets for s in samples], axis=1)
    targets = targets[:, :, None].astype(np.float32)
    return i0, i1, targets, t_list


def evaluate_model(model, n_interp, n_samples=8, seed=999331, height=128,
                   width=128, csv_path=None, data=None, baseline=None,
                   time_repeats=0, time_warmups=3):
    """Score interpolated frames against ground truth.

    The samples come from `data` (batched arrays as returned by
    load_dataset) when given, otherwise from held-out random phantoms.
    `baseline="mid"` replaces the model's prediction with the analytic
    average clamp((I0+I1)/2, 0, 1) — the comparison floor. With
    time_repeats > 0 the result also carries `time_median`: the median
    wall-clock of one n-frame inference over that many repeats, taken
    after `time_warmups` warmup calls.

    Returns a dict with per-frame rows plus mean/population-std aggregates.
    """
    if data is not None:
        i0, i1, targets, t_list = data
    else:
        i0, i1, targets, t_list = random_samples(n_samples, n_interp,
                                                 height=height, width=width,
                                                 seed=seed)

    def predict():
        if baseline == "mid":
            return [baseline_frames(i0, i1) for _ in t_list]
        if baseline is not None:
            raise ValueError(f"unknown baseline mode {baseline!r}")
        with T.no_grad():
            return [o.data for o in model.interpolate(i0, i1, t_list)]

    outs = predict()
    rows = []
    for k, t in enumerate(t_list):
        pred = outs[k]
        for b in range(len(i0)):
            rows.append((b, t, ssim(pred[b, 0], targets[k, b, 0]),
                         psnr(pred[b, 0], targets[k, b, 0])))
    s_mean, s_std = aggregate([r[2] for r in rows])
    p_mean, p_std = aggregate([r[3] for r in rows])
    if csv_path:
        write_metrics_csv(csv_path, rows)
    result = {"rows": rows, "ssim_mean": s_mean, "ssim_std": s_std,
              "psnr_mean": p_mean, "psnr_std": p_std}
    if time_repeats > 0:
        # Median wall-clock of a single-sample n-frame inference.
        def one_call():
            if baseline == "mid":
                return baseline_frames(i0[:1], i1[:1])
            with T.no_grad():
                return model.interpolate(i0[:1], i1[:1], t_list)

        for _ in range(time_warmups):
            one_call()
        times = []
        for _ in range(time_repeats):
            t0 = time.perf_counter()
            one_call()
            times.append(time.perf_counter() - t0)
        result["time_median"] = statistics.median(times)
    return result


def train_model(cfg, model=None, log=print):
    """Run the full training loop; returns a summary dict.

    Saves `best.ckpt` (highest eval SSIM) and `final.ckpt` under cfg.out_dir.
    A non-finite loss aborts with TrainingDiverged; the checkpoints on disk
    stay at the last good state.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    if model is None:
        model = build_model(cfg)
    params = model.named_parameters()
    opt = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    t_list = _t_list(cfg.n_interp)
    history = []
    losses_seen = []
    best_ssim = -math.inf
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    final_path = os.path.join(cfg.out_dir, "final.ckpt")
    model.save(best_path)
    model.save(final_path)
    dataset = load_dataset(cfg.data, cfg.n_interp) if cfg.data else None

    # The per-buffer finite check is useful while debugging graphs but costs
    # a full memory pass per node; the loop checks loss/grads itself instead.
    check_before = T.CHECK_FINITE
    T.CHECK_FINITE = False
    start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            if dataset is None:
                i0, i1, targets, _ = random_samples(
                    cfg.batch_size, cfg.n_interp, height=cfg.height,
                    width=cfg.width, seed=cfg.seed * 100003 + step)
            else:
                d0, d1, dt, _ = dataset
                rng = np.random.default_rng(cfg.seed * 100003 + step)
                idx = rng.integers(0, len(d0), size=cfg.batch_size)
                i0, i1, targets = d0[idx], d1[idx], dt[:, idx]
            outs = model.interpolate(i0, i1, t_list)
            losses = [l1_loss(out, tgt) for out, tgt in zip(outs, targets)]
            loss = losses[0]
            for extra in losses[1:]:
                loss = T.add(loss, extra)
            loss = T.scale(loss, 1.0 / len(losses))
            loss_val = loss.item()
            losses_seen.append(loss_val)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; checkpoints on disk "
                    f"retain the last good state")
            opt.zero_grad()
            loss.backward()
            grad_norm = clip_grad_norm(params, cfg.clip_norm)
            # step + 1 so the first update is one ramp increment, not lr 0.
            lr = lr_schedule(step + 1, cfg.steps, cfg.warmup_steps,
                             cfg.lr_peak, cfg.lr_final)
            opt.step(lr)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                elapsed = time.perf_counter() - start
                epoch = step // cfg.steps_per_epoch
                log(f"step {step:5d}  epoch {epoch:3d}  loss {loss_val:.5f}  "
                    f"lr {lr:.3e}  |g| {grad_norm:.3f}  "
                    f"{elapsed / (step + 1):.2f}s/step  {elapsed:.0f}s",
                    flush=True)
            if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
                res = evaluate_model(model, cfg.n_interp,
                                     n_samples=cfg.eval_samples,
                                     seed=cfg.seed + 999331,
                                     height=cfg.height, width=cfg.width)
                history.append({"step": step, "loss": loss_val,
                                "ssim": res["ssim_mean"],
                                "ssim_std": res["ssim_std"],
                                "psnr": res["psnr_mean"],
                                "psnr_std": res["psnr_std"]})
                log(f"  eval @ {step}: "
                    f"ssim {res['ssim_mean']:.3f}+-{res['ssim_std']:.3f}  "
                    f"psnr {res['psnr_mean']:.3f}+-{res['psnr_std']:.3f}",
                    flush=True)
                if res["ssim_mean"] > best_ssim:
                    best_ssim = res["ssim_mean"]
                    model.save(best_path)
                model.save(final_path)
    finally:
        T.CHECK_FINITE = check_before
    model.save(final_path)
    return {"model": model, "history": history, "losses": losses_seen,
            "best_ssim": best_ssim, "best_path": best_path,
            "final_path": final_path,
            "seconds": time.perf_counter() - start}


def bench_model(model, height=128, width=128, n_interp=3, repeats=20,
                warmups=3, seed=0):
    """Median timings for one-frame vs direct n-frame inference.

    Returns per-stage medians and the sharing ratio
    multi / (n_interp * single); direct multi-frame inference runs the
    encoder once, so the ratio should sit well below 1.
    """
    rng = np.random.default_rng(seed)
    i0 = rng.random((1, 1, height, width), dtype=np.float32)
    i1 = rng.random((1, 1, height, width), dtype=np.float32)
    t_multi = _t_list(n_interp)

    def run(t_list):
        with T.no_grad():
            model.interpolate(i0, i1, t_list)

    for _ in range(warmups):
        run([0.5])
        run(t_multi)

    singles, multis = [], []
    model.reset_stats()
    for _ in range(repeats):
        t0 = time.perf_counter()
        run([0.5])
        singles.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        run(t_multi)
        multis.append(time.perf_counter() - t0)
    stats = model.stats
    calls = stats["encoder_calls"]
    expected_calls = 2 * repeats          # one per interpolate() call
    if calls != expected_calls:
        raise RuntimeError(
            f"encoder ran {calls} times for {expected_calls} interpolation "
            f"calls; feature sharing is broken")
    single_med = statistics.median(singles)
    multi_med = statistics.median(multis)
    n_decodes = repeats * (1 + n_interp)
    return {
        "single_median": single_med,
        "multi_median": multi_med,
        "ratio": multi_med / (n_interp * single_med),
        "encoder_mean": (stats["time_encoder"] + stats["time_attention"]) / calls,
        "attention_mean": stats["time_attention"] / calls,
        "decode_mean": sum(stats["time_decode"]) / n_decodes,
        "repeats": repeats,
    }
