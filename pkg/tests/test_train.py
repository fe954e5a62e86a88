import numpy as np
import pytest

from conftest import tiny_codec_config
from hsc.autodiff import Tensor, ops
from hsc.codec import HierarchicalCodec
from hsc.corpus import Sample, synthetic_corpus
from hsc.train import (
    LOG_FIELDS, SweepFailed, TrainConfig, TrainingDiverged, base_distortion, clip_gradients, epoch_mean, evaluate,
    log_csv, rd_sweep, summarize, train, training_loss,
)


def quick(**changes):
    base = dict(epochs=1, batch_size=4, dpl_weight=0.0, rate_warmup_steps=0)
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return synthetic_corpus(12, seed=3, size=32)


def test_rate_clipping_has_no_gradient_below_target():
    bpp = Tensor(np.array(0.2), requires_grad=True)
    ops.maximum(bpp, 0.4).backward()
    assert float(bpp.grad) == 0.0
    bpp = Tensor(np.array(0.6), requires_grad=True)
    ops.maximum(bpp, 0.4).backward()
    assert float(bpp.grad) == 1.0


def test_training_loss_terms(samples):
    model = HierarchicalCodec(tiny_codec_config(target_bpp=50.0))
    tcfg = quick()
    x = Tensor(np.stack([s.image.transpose(2, 0, 1) for s in samples[:2]]).astype(np.float32))
    sal = np.stack([s.saliency_grid() for s in samples[:2]])
    loss, bpp, plain, dist, mse = training_loss(model, tcfg, x, sal, base_distortion(tcfg, None))
    assert bpp <= plain + 1e-6
    # far below the target the rate term is the constant alpha * t
    assert float(loss.data) > 50.0
    assert dist > 0 and mse > 0


def test_train_writes_checkpoints_and_log(samples, tmp_path):
    model, history = train(quick(epochs=2), tiny_codec_config(), out_dir=str(tmp_path), samples=samples,
                           log_path=str(tmp_path / "log.csv"))
    assert {p.name for p in tmp_path.iterdir()} >= {"epoch1.hsc1", "epoch2.hsc1", "final.hsc1", "log.csv"}
    assert len(history) == 2 * 3
    text = (tmp_path / "log.csv").read_text()
    assert text.splitlines()[0] == ",".join(LOG_FIELDS)
    assert text == log_csv(history)
    assert HierarchicalCodec.load(tmp_path / "final.hsc1").config == model.config


def test_training_is_deterministic(samples):
    _, h1 = train(quick(), tiny_codec_config(), samples=samples)
    _, h2 = train(quick(), tiny_codec_config(), samples=samples)
    assert log_csv(h1) == log_csv(h2)


def test_non_finite_input_reports_divergence(samples):
    bad = [Sample(np.full((32, 32, 3), np.nan), np.ones((32, 32), dtype=np.uint8), "nan")]
    with pytest.raises(TrainingDiverged):
        train(quick(), tiny_codec_config(), samples=bad)


def test_zero_beta_warns(samples):
    with pytest.warns(UserWarning, match="beta"):
        train(quick(), tiny_codec_config(beta=0.0), samples=samples[:4])


def test_clip_gradients_caps_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_gradients([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_rate_weight_ablation_lowers_rate():
    """Dropping the rate term (alpha = 0) leaves a higher final-epoch rate than keeping it."""
    data = synthetic_corpus(40, seed=3, size=32)
    finals = []
    for alpha in (0.0, 1.0):
        tcfg = TrainConfig(epochs=6, batch_size=4, rate_warmup_steps=0, dpl_weight=0.0, lr=3e-3, decay_every=100)
        _, history = train(tcfg, tiny_codec_config(alpha=alpha, target_bpp=0.05, beta=50.0, C1=8), samples=data)
        finals.append(epoch_mean(history, "bpp"))
    assert finals[0] > finals[1]


def test_sweep_and_partial_failure(samples, tmp_path):
    models = [HierarchicalCodec(tiny_codec_config(seed=s)) for s in (0, 1)]
    points = rd_sweep(models, samples[:2], csv_path=tmp_path / "rd.csv", dat_path=tmp_path / "rd.dat")
    assert len(points) == 2
    assert (tmp_path / "rd.csv").read_text().startswith("bpp,psnr,ms_ssim,dpl,mse,digest")
    with pytest.raises(SweepFailed) as err:
        rd_sweep([models[0], "not a model"], samples[:2], csv_path=tmp_path / "partial.csv")
    assert len(err.value.points) == 1
    assert "partial" in (tmp_path / "partial.csv").read_text().splitlines()[0]


def test_evaluate_summary(samples):
    model = HierarchicalCodec(tiny_codec_config())
    evals = evaluate(model, samples[:2])
    point = summarize(model, evals)
    assert point.bpp == pytest.approx(np.mean([e.bpp for e in evals]))
    assert np.isfinite(point.psnr) and point.dpl >= 0
