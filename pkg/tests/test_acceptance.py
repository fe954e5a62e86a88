"""Acceptance criteria 1-12.

Each test prints ``criterion N: PASS|FAIL <measurements>``; the lines are
repeated in the pytest terminal summary.  Criteria 3 and 7-10 share trained
models (t = 0.2, 0.4, 0.8 on the 500-image synthetic corpus, 6 epochs),
so the whole file takes roughly 20-25 minutes on one core.
"""

import filecmp
import os
import time

import numpy as np
import pytest
from scipy.stats import binomtest

import grad_cases
from conftest import ACCEPTANCE_LINES, randomize
from hsc import arith
from hsc import codec as codec_mod
from hsc.autodiff import Tensor, no_grad
from hsc.cli import main as cli_main
from hsc.codec import CodecConfig, estimated_bits, stage1_site_bits
from hsc.context import FREQ_TOTAL, ContextModel, causality_audit, freqs_from_logits
from hsc.corpus import half_texture_samples, save_directory, synthetic_corpus
from hsc.metrics import (
    IdentityExtractor, default_extractor, dpl_value, fit_channel_weights, fit_linear_combo, metric_distances, ms_ssim,
    mse8, psnr, save_records, synthetic_records, twoafc_from_distances,
)
from hsc.train import TrainConfig, epoch_mean, evaluate, train
from test_masking import mask_algebra_violations

EVAL_SET = (50, 12345)


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- shared trained models -------------------------------------------------------------

class Trained:
    def __init__(self, target):
        start = time.perf_counter()
        self.model, self.history = train(TrainConfig(), CodecConfig(target_bpp=target))
        self.seconds = time.perf_counter() - start
        self._evals = None

    def evals(self, samples, extractor):
        if self._evals is None:
            self._evals = evaluate(self.model, samples, extractor)
        return self._evals


@pytest.fixture(scope="module")
def eval_samples():
    return synthetic_corpus(*EVAL_SET)


@pytest.fixture(scope="module")
def extractor():
    return default_extractor()


@pytest.fixture(scope="module")
def trained_runs():
    runs = {}

    def get(target):
        if target not in runs:
            runs[target] = Trained(target)
        return runs[target]

    return get


# -- 1. lossless core ------------------------------------------------------------------

def test_criterion_01_lossless_round_trip():
    rng = np.random.default_rng(2024)
    models = {}
    for levels in (2, 6, 16):
        for cond in (0, 2):
            mrng = np.random.default_rng(levels * 10 + cond)
            model = ContextModel(levels, conditioning_channels=cond, hidden=8, layers=3, rng=mrng)
            models[levels, cond] = randomize(model, mrng, 0.4)
    failures = 0
    start = time.perf_counter()
    for case in range(1000):
        levels = (2, 6, 16)[case % 3]
        cond_ch = (0, 2)[(case // 3) % 2]
        shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
        grid = rng.integers(0, levels, size=shape)
        cond = rng.normal(size=(cond_ch * shape[0],) + shape[1:]) if cond_ch else None
        model = models[levels, cond_ch]
        payload = arith.CodedPayload.from_bytes(arith.encode(grid, model, cond).to_bytes())
        back = arith.decode(payload, model, shape, cond).symbols
        failures += int(not np.array_equal(back, grid))
    elapsed = time.perf_counter() - start
    report(1, failures == 0 and elapsed < 60, f"1000 cases, {failures} failures, {elapsed:.1f} s (limit 60 s)")


# -- 2. coder optimality -----------------------------------------------------------------

def test_criterion_02_coder_overhead():
    rng = np.random.default_rng(7)
    worst = -np.inf
    for _ in range(100):
        n = int(rng.integers(1, 600))
        levels = int(rng.integers(2, 17))
        tables = [freqs_from_logits(rng.normal(scale=float(rng.uniform(0.1, 6)), size=levels)) for _ in range(n)]
        symbols = [int(rng.choice(levels, p=np.asarray(t) / FREQ_TOTAL)) for t in tables]
        payload = arith.encode_with_tables(symbols, tables)
        worst = max(worst, payload.declared_bits - arith.ideal_bits(symbols, tables))
    report(2, worst <= 32, f"max(payload bits - ideal bits) = {worst:.2f} over 100 streams (limit 32)")


# -- 3. entropy accounting -----------------------------------------------------------------

def test_criterion_03_entropy_accounting(trained_runs, eval_samples, extractor):
    run = trained_runs(0.4)
    evals = run.evals(eval_samples, extractor)
    real = float(np.mean([e.bpp for e in evals]))
    plain = float(np.mean([e.estimate_bpp for e in evals]))
    pixels = eval_samples[0].image.shape[0] * eval_samples[0].image.shape[1]
    weighted = float(np.mean([estimated_bits(run.model, s.image, s.saliency_grid(), weighted=True) / pixels
                              for s in eval_samples]))
    limit = 0.10 * plain + 0.01
    report(3, abs(real - plain) <= limit,
           f"real {real:.4f} bpp vs estimate {plain:.4f} bpp, |diff| {abs(real - plain):.4f} (limit {limit:.4f}); "
           f"mask-weighted training estimate {weighted:.4f} bpp")


# -- 4. gradient suite ------------------------------------------------------------------

def test_criterion_04_gradient_suite():
    failures, worst, checked = [], 0.0, 0
    for seed in range(50):
        for name, fn, inputs in grad_cases.all_cases(seed):
            result = grad_cases.check_case(fn, inputs)
            worst = max(worst, result.worst)
            checked += 1
            if not result.ok:
                failures.append((seed, name))
        err = grad_cases.soft_quantizer_error(seed)
        worst = max(worst, err)
        checked += 1
        if not err < grad_cases.TOLERANCE:
            failures.append((seed, "soft_quantizer"))
    report(4, not failures, f"{checked} checks over 50 seeds, worst relative error {worst:.2e} (limit 1e-4), "
                            f"failures {failures[:5]}")


# -- 5. causality audit --------------------------------------------------------------------

def test_criterion_05_causality(trained_runs):
    model = trained_runs(0.4).model
    cfg = model.config
    audits = [
        ("context1", causality_audit(model.context1, 100, (cfg.C1, 4, 4), seed=1, centers=model.codebook1.values())),
        ("context2", causality_audit(model.context2, 100, (cfg.C2, 2, 2), seed=2, centers=model.codebook2.values())),
    ]
    for levels in (2, 16):
        rng = np.random.default_rng(levels)
        rand = randomize(ContextModel(levels, conditioning_channels=1, hidden=8, layers=4, rng=rng), rng, 0.4)
        audits.append((f"random L={levels}", causality_audit(rand, 100, (3, 4, 4), seed=levels)))
    bad = {name: len(a.violations) for name, a in audits}
    report(5, all(v == 0 for v in bad.values()), f"100 trials per model, violations {bad}")


# -- 6. mask algebra -------------------------------------------------------------------------

def test_criterion_06_mask_algebra():
    bad = {c: len(mask_algebra_violations(c)) for c in range(1, 9)}
    report(6, not any(bad.values()), f"0.1 grid over [-1, C+1], C = 1..8, violations {bad}")


# -- 7. target-rate convergence ----------------------------------------------------------------

def test_criterion_07_target_rate(trained_runs):
    run = trained_runs(0.4)
    final = epoch_mean(run.history, "bpp")
    ok = 0.36 <= final <= 0.44 and run.seconds < 30 * 60
    report(7, ok, f"final-epoch mean bpp {final:.4f} (range [0.36, 0.44]), training {run.seconds:.0f} s "
                  f"(limit 1800 s)")


# -- 8. saliency steering --------------------------------------------------------------------

def _region_stats(model, sample):
    grid = sample.saliency_grid()
    bits = stage1_site_bits(model, sample.image, grid).sum(axis=0)
    a = codec_mod.analyse(model, sample.image, grid)
    with no_grad():
        out = model.decoder(Tensor(model.codebook1.values().astype(np.float32)[a.q1.symbols])).data[0]
    h, w = sample.image.shape[:2]
    recon = np.clip(out.transpose(1, 2, 0), 0, 1)[:h, :w]
    sal = sample.saliency.astype(bool)
    return (bits[grid == 1].mean(), bits[grid == 0].mean(),
            psnr(sample.image[sal], recon[sal]), psnr(sample.image[~sal], recon[~sal]))


def _sign_test(pairs):
    wins = sum(a > b for a, b in pairs)
    losses = sum(a < b for a, b in pairs)
    n = wins + losses
    return wins, losses, (binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0)


def test_criterion_08_saliency_steering(trained_runs):
    model = trained_runs(0.4).model
    stats = [_region_stats(model, s) for s in half_texture_samples(20, seed=7)]
    bw, bl, bp = _sign_test([(s[0], s[1]) for s in stats])
    pw, pl, pp = _sign_test([(s[2], s[3]) for s in stats])
    mean_bits = np.mean([s[0] for s in stats]), np.mean([s[1] for s in stats])
    mean_psnr = np.mean([s[2] for s in stats]), np.mean([s[3] for s in stats])
    report(8, bp < 0.05 and pp < 0.05 and mean_bits[0] >= mean_bits[1] and mean_psnr[0] >= mean_psnr[1],
           f"bits/site salient {mean_bits[0]:.3f} vs other {mean_bits[1]:.3f} ({bw}-{bl}, p={bp:.2g}); "
           f"PSNR salient {mean_psnr[0]:.2f} vs other {mean_psnr[1]:.2f} dB ({pw}-{pl}, p={pp:.2g})")


# -- 9. hierarchy share ---------------------------------------------------------------------

def test_criterion_09_hierarchy_share(trained_runs, eval_samples, extractor):
    evals = trained_runs(0.4).evals(eval_samples, extractor)
    share = float(np.mean([e.stage2_fraction for e in evals]))
    report(9, share < 0.15, f"mean stage-2 payload fraction {share:.4f} (limit 0.15)")


# -- 10. R-D monotonicity ---------------------------------------------------------------------

def test_criterion_10_rd_monotone(trained_runs, eval_samples, extractor):
    rows = []
    for target in (0.2, 0.4, 0.8):
        evals = trained_runs(target).evals(eval_samples, extractor)
        rows.append(tuple(float(np.mean([getattr(e, f) for e in evals])) for f in ("bpp", "mse", "dpl")))
    bpp, mse, dpl = zip(*rows)
    ok = (bpp[0] < bpp[1] < bpp[2]) and (mse[0] >= mse[1] >= mse[2]) and (dpl[0] >= dpl[1] >= dpl[2])
    detail = "; ".join(f"t={t}: bpp {b:.4f} mse {m:.5f} dpl {d:.4f}" for t, (b, m, d) in zip((0.2, 0.4, 0.8), rows))
    report(10, ok, detail)


# -- 11. metric fitting ---------------------------------------------------------------------

def test_criterion_11_metric_fitting(extractor):
    key = 1
    records = synthetic_records(80, seed=21, key_channel=key)
    weights = fit_channel_weights(records, IdentityExtractor(), steps=300)
    argmax = int(np.argmax(weights.arrays()[0]))

    metrics = {
        "mse": mse8,
        "psnr": lambda a, b: -psnr(a, b),
        "ms_ssim": lambda a, b: 1.0 - ms_ssim(a, b),
        "dpl": lambda a, b: dpl_value(a, b, extractor),
    }
    fractions = [r.fraction_a for r in records]
    cols = {name: metric_distances(fn, records) for name, fn in metrics.items()}
    singles = {name: twoafc_from_distances(da, db, fractions) for name, (da, db) in cols.items()}
    da = np.stack([cols[n][0] for n in metrics], axis=1)
    db = np.stack([cols[n][1] for n in metrics], axis=1)
    combo = fit_linear_combo(da, db, fractions, iterations=300)
    combo_score = twoafc_from_distances(combo.combine(da), combo.combine(db), fractions)

    rng = np.random.default_rng(5)
    negative = 0
    for trial in range(15):
        recs = synthetic_records(10, seed=100 + trial, size=8, key_channel=int(rng.integers(0, 3)))
        if all(r.fraction_a == 0.5 for r in recs):
            continue
        fitted = fit_channel_weights(recs, IdentityExtractor(), steps=25, lr=float(rng.uniform(0.01, 0.5)))
        negative += sum(int((w < 0).sum()) for w in fitted.arrays())
    best_single = max(singles.values())
    ok = argmax == key and combo_score >= best_single and negative == 0
    report(11, ok, f"weight argmax channel {argmax} (key {key}); combo 2AFC {combo_score:.4f} vs best single "
                   f"{best_single:.4f} {singles}; negative weights {negative}")


# -- 12. determinism --------------------------------------------------------------------------

TINY = ["--set", "epochs=1", "--set", "batch_size=4", "--set", "C1=4", "--set", "C2=2", "--set", "filters=8",
        "--set", "hyper_filters=8", "--set", "res_blocks1=1", "--set", "res_blocks2=1", "--set", "attention1=",
        "--set", "attention2=", "--set", "context_hidden=6",
        "--set", "context_layers=2", "--set", "extractor_steps=10", "--set", "rate_warmup_steps=2"]


def _cli_session(root):
    """Every subcommand once; returns the artifacts written under ``root``."""
    save_directory(root / "imgs", synthetic_corpus(2, seed=31, size=40))
    save_records(root / "recs", synthetic_records(10, seed=32, size=12))
    img = sorted((root / "imgs").glob("*.ppm"))[0]
    steps = [
        ["train", "--out", str(root / "run"), "--corpus", "synthetic:8:3", "--seed", "4", *TINY],
        ["compress", str(img), "--model", str(root / "run" / "final.hsc1"), "--saliency", str(img.with_suffix(".pgm")),
         "-o", str(root / "img.hsc"), "--seed", "4"],
        ["decompress", str(root / "img.hsc"), "--model", str(root / "run" / "final.hsc1"),
         "-o", str(root / "img.dec.ppm"), "--seed", "4"],
        ["eval", str(img), str(root / "img.dec.ppm"), "-o", str(root / "eval.csv"), "--seed", "4"],
        ["sweep", "--targets", "0.2,0.4", "--corpus", "synthetic:8:3", "--eval-corpus", "synthetic:2:9",
         "--csv", str(root / "rd.csv"), "--out-dir", str(root / "sweep"), "--seed", "4", *TINY],
        ["fit-metric", str(root / "recs"), "-o", str(root / "weights.hsc1"), "--steps", "20", "--seed", "4"],
        ["score-2afc", str(root / "recs"), "--metric", "dpl", "--weights", str(root / "weights.hsc1"),
         "-o", str(root / "score.txt"), "--seed", "4"],
    ]
    codes = [cli_main(argv) for argv in steps]
    files = sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
    return codes, files


def test_criterion_12_determinism(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    codes_a, files_a = _cli_session(first)
    codes_b, files_b = _cli_session(second)
    differing = [str(f) for f in files_a if not filecmp.cmp(first / f, second / f, shallow=False)]
    artifacts = [f for f in files_a if f.parts[0] not in ("imgs", "recs")]
    ok = codes_a == codes_b == [0] * 7 and files_a == files_b and not differing
    report(12, ok, f"7 subcommands run twice, exit codes {codes_a}, {len(artifacts)} artifacts compared, "
                   f"differing {differing}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([os.path.abspath(__file__), "-q", "-s"]))
