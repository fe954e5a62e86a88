"""Joint rate-distortion training with rate clipping, and R-D sweeps over real bitstreams."""

from __future__ import annotations

import csv
import dataclasses
import io
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import codec as codec_mod
from .autodiff import NonFiniteError, Tensor, no_grad, ops
from .autodiff.optim import adam_step, step_decay
from .codec import CodecConfig, HierarchicalCodec, weighted_distortion
from .corpus import Sample, load_corpus
from .metrics import default_extractor, dpl, dpl_value, ms_ssim, mse8, psnr


class TrainingDiverged(ArithmeticError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 10
    epochs: int = 6
    decay_factor: float = 0.1
    decay_every: int = 2
    mse_weight: float = 0.9
    dpl_weight: float = 0.1
    dpl_scale: float = 0.1
    aux_weight: float = 1.0
    clip_norm: float = 1.0
    warmup_steps: int = 0
    rate_warmup_steps: int = 50
    context_weight: float = 1.0
    extractor_steps: int = 150
    corpus: str = "synthetic:500"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    bpp: float
    bpp_plain: float
    distortion: float
    mse: float
    loss: float


LOG_FIELDS = [f.name for f in dataclasses.fields(StepRecord)]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("HSC_THREADS", "1")))
    except ValueError:
        return 1


def _batch(samples: list[Sample]):
    x = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    sal = np.stack([s.saliency_grid() for s in samples])
    return Tensor(x), sal


def base_distortion(tcfg: TrainConfig, extractor):
    """mse_weight * mse + dpl_weight * dpl_scale * dpl, on NCHW batches."""

    def metric(a, b):
        out = ops.mse(a, b) * tcfg.mse_weight
        if tcfg.dpl_weight > 0:
            out = out + dpl(a, b, extractor) * (tcfg.dpl_weight * tcfg.dpl_scale)
        return out

    return metric


def training_loss(model: HierarchicalCodec, tcfg: TrainConfig, x: Tensor, sal: np.ndarray, metric,
                  rate_scale: float = 1.0):
    cfg = model.config
    res = model.forward(x, sal)
    pixels = x.shape[2] * x.shape[3]
    bpp = ops.mean(res.weighted_bits()) * (1.0 / pixels)
    plain = ops.mean(res.plain_bits()) * (1.0 / pixels)
    # max(t, R): below the target the rate term is constant and contributes no gradient
    rate_term = ops.maximum(bpp, cfg.target_bpp) * (cfg.alpha * rate_scale)
    dist = weighted_distortion(x, res.xhat, sal, cfg.w1, cfg.w2, metric)
    # the auxiliary target is fixed so this term shapes only the hyper path, not the encoder
    aux = ops.mse(res.y_tilde.detach(), res.conditioning)
    loss = rate_term + dist * cfg.beta + aux * tcfg.aux_weight + plain * tcfg.context_weight
    mse = float(np.mean((res.xhat.data - x.data) ** 2))
    return loss, float(bpp.data), float(plain.data), float(dist.data), mse


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm`` (0 disables)."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def train(tcfg: TrainConfig, cfg: CodecConfig, out_dir=None, samples=None, log_path=None,
          progress=None) -> tuple[HierarchicalCodec, list[StepRecord]]:
    """Train a codec; returns the model and the per-step log.

    With ``out_dir`` a checkpoint is written after every epoch
    (``epoch<k>.hsc1``) and as ``final.hsc1``.
    """
    if cfg.beta == 0:
        warnings.warn("beta = 0: the distortion term is disabled and reconstructions will not improve",
                      stacklevel=2)
    samples = load_corpus(tcfg.corpus) if samples is None else samples
    if not samples:
        raise ValueError("empty training corpus")
    model = HierarchicalCodec(cfg)
    extractor = default_extractor(0, tcfg.extractor_steps) if tcfg.dpl_weight > 0 else None
    metric = base_distortion(tcfg, extractor)
    rng = np.random.default_rng(tcfg.seed)
    params = model.parameters()
    history: list[StepRecord] = []
    last_good = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    step = 0
    for epoch in range(tcfg.epochs):
        lr = step_decay(tcfg.lr, epoch, tcfg.decay_factor, tcfg.decay_every)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), tcfg.batch_size):
            batch = [samples[i] for i in order[start:start + tcfg.batch_size]]
            x, sal = _batch(batch)
            try:
                # the rate term fades in so the decoder learns to use the latent before masks close
                rate_scale = min(1.0, step / tcfg.rate_warmup_steps) if tcfg.rate_warmup_steps > 0 else 1.0
                loss, bpp, plain, dist, mse = training_loss(model, tcfg, x, sal, metric, rate_scale)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("non-finite loss")
                loss.backward()
                clip_gradients(params, tcfg.clip_norm)
                ramp = min(1.0, (step + 1) / tcfg.warmup_steps) if tcfg.warmup_steps > 0 else 1.0
                adam_step(params, lr * ramp)
            except NonFiniteError as exc:
                if last_good:
                    model = HierarchicalCodec.load(last_good)
                raise TrainingDiverged(f"training diverged at step {step}: {exc}", last_good) from None
            history.append(StepRecord(epoch, step, lr, bpp, plain, dist, mse, float(loss.data)))
            if progress:
                progress(history[-1])
            step += 1
        if out_dir:
            last_good = os.path.join(out_dir, f"epoch{epoch + 1}.hsc1")
            model.save(last_good)
    if out_dir:
        model.save(os.path.join(out_dir, "final.hsc1"))
    if log_path:
        write_log(log_path, history)
    return model, history


def write_log(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(log_csv(history))


def log_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for rec in history:
        writer.writerow([_fmt(getattr(rec, f)) for f in LOG_FIELDS])
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def epoch_mean(history, field: str = "bpp", epoch: int | None = None) -> float:
    epoch = max(r.epoch for r in history) if epoch is None else epoch
    return float(np.mean([getattr(r, field) for r in history if r.epoch == epoch]))


# -- evaluation ----------------------------------------------------------------------------

@dataclass
class ImageEval:
    bpp: float
    estimate_bpp: float
    stage2_fraction: float
    mse: float
    psnr: float
    ms_ssim: float
    dpl: float


def evaluate_image(model: HierarchicalCodec, sample: Sample, extractor=None) -> ImageEval:
    """Real-bitstream bpp plus quality of the reconstruction the decoder would produce."""
    sal = sample.saliency_grid()
    stream = codec_mod.compress(sample.image, model, sal)
    a = codec_mod.analyse(model, sample.image, sal)
    with no_grad():
        y = Tensor(model.codebook1.values().astype(np.float32)[a.q1.symbols])
        out = model.decoder(y).data[0].transpose(1, 2, 0)
    h, w = sample.image.shape[:2]
    recon = np.clip(out, 0.0, 1.0)[:h, :w].astype(np.float64)
    estimate = codec_mod.estimated_bits(model, sample.image, sal) / (h * w)
    ext = extractor or default_extractor()
    return ImageEval(stream.bpp, estimate, stream.stage2_fraction, mse8(sample.image, recon) / 255.0 ** 2,
                     psnr(sample.image, recon), ms_ssim(sample.image, recon), dpl_value(sample.image, recon, ext))


def evaluate(model: HierarchicalCodec, samples, extractor=None) -> list[ImageEval]:
    ext = extractor or default_extractor()
    with ThreadPoolExecutor(worker_count()) as pool:
        return list(pool.map(lambda s: evaluate_image(model, s, ext), samples))


@dataclass
class RdPoint:
    bpp: float
    mse: float
    psnr: float
    ms_ssim: float
    dpl: float
    digest: str

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("an R-D point needs positive bpp")


RD_FIELDS = ["bpp", "psnr", "ms_ssim", "dpl", "mse", "digest"]


def summarize(model: HierarchicalCodec, evals: list[ImageEval]) -> RdPoint:
    mean = lambda f: float(np.mean([getattr(e, f) for e in evals]))  # noqa: E731
    mse = mean("mse")
    return RdPoint(mean("bpp"), mse, psnr_from_mse(mse), mean("ms_ssim"), mean("dpl"),
                   f"{model.config.digest:016x}")


def psnr_from_mse(mse: float) -> float:
    return float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))


class SweepFailed(RuntimeError):
    def __init__(self, message, points):
        super().__init__(message)
        self.points = points


def rd_csv(points: list[RdPoint], partial: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RD_FIELDS + (["partial"] if partial else []))
    for p in sorted(points, key=lambda p: p.bpp):
        row = [repr(p.bpp), repr(p.psnr), repr(p.ms_ssim), repr(p.dpl), repr(p.mse), p.digest]
        writer.writerow(row + (["1"] if partial else []))
    return buf.getvalue()


def rd_dat(points: list[RdPoint]) -> str:
    lines = ["# bpp psnr ms_ssim dpl mse"]
    for p in sorted(points, key=lambda p: p.bpp):
        lines.append(f"{p.bpp!r} {p.psnr!r} {p.ms_ssim!r} {p.dpl!r} {p.mse!r}")
    return "\n".join(lines) + "\n"


def rd_sweep(runs, eval_samples, csv_path=None, dat_path=None, extractor=None) -> list[RdPoint]:
    """Measure each run on ``eval_samples``.

    ``runs`` holds trained models or (TrainConfig, CodecConfig) pairs to
    train first.  If any run fails the CSV is written with a ``partial``
    column and SweepFailed is raised carrying the points measured so far.
    """
    points = []
    try:
        for run in runs:
            model = run if isinstance(run, HierarchicalCodec) else train(*run)[0]
            points.append(summarize(model, evaluate(model, eval_samples, extractor)))
    except Exception as exc:
        _write(csv_path, rd_csv(points, partial=True))
        raise SweepFailed(f"sweep aborted after {len(points)} run(s): {exc}", points) from exc
    _write(csv_path, rd_csv(points))
    _write(dat_path, rd_dat(points))
    return sorted(points, key=lambda p: p.bpp)


def _write(path, text):
    if path:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
