//! Reference implementations the library is checked against. Everything
//! here is written from the definitions, independently of the library code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use spoofprobe::{Architecture, EmbeddingMatrix, HeadModel, Label};
use spoofprobe::metrics::ScoreRecord;

pub fn random_records(rng: &mut impl Rng, max_n: usize) -> Vec<ScoreRecord> {
    let n = rng.gen_range(2..=max_n);
    // Coarse score grids force plenty of ties.
    let levels = rng.gen_range(2..=20) as f64;
    let mut out: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let label = if rng.gen_bool(0.5) { Label::Fake } else { Label::Bonafide };
            let shift = if label.is_fake() { rng.gen_range(0.0..0.4) } else { 0.0 };
            let raw: f64 = (rng.gen::<f64>() * 0.6 + shift).min(1.0);
            let score = (raw * levels).round() / levels;
            ScoreRecord::new(format!("u{i}"), score, label, "d")
        })
        .collect();
    out[0].label = Label::Bonafide;
    out[1].label = Label::Fake;
    out
}

/// AUC (percent) as the Mann-Whitney statistic over every fake/real pair.
pub fn brute_auc(records: &[ScoreRecord]) -> f64 {
    let fakes: Vec<f64> = records.iter().filter(|r| r.label.is_fake()).map(|r| r.score).collect();
    let reals: Vec<f64> = records.iter().filter(|r| !r.label.is_fake()).map(|r| r.score).collect();
    let mut wins = 0.0;
    for &f in &fakes {
        for &r in &reals {
            if f > r {
                wins += 1.0;
            } else if f == r {
                wins += 0.5;
            }
        }
    }
    100.0 * wins / (fakes.len() * reals.len()) as f64
}

/// `(fpr, tpr)` at every threshold of an exhaustive sweep, starting from the
/// threshold above every score.
pub fn brute_roc(records: &[ScoreRecord]) -> Vec<(f64, f64)> {
    let n_fake = records.iter().filter(|r| r.label.is_fake()).count() as f64;
    let n_real = records.len() as f64 - n_fake;
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = records.iter().filter(|r| r.label.is_fake() && r.score >= t).count() as f64;
        let fp = records.iter().filter(|r| !r.label.is_fake() && r.score >= t).count() as f64;
        pts.push((fp / n_real, tp / n_fake));
    }
    pts
}

/// EER (percent): where the piecewise-linear ROC meets the line
/// `fpr = 1 - tpr`, found segment by segment.
pub fn brute_eer(records: &[ScoreRecord]) -> f64 {
    let pts = brute_roc(records);
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let g0 = x0 + y0 - 1.0;
        let g1 = x1 + y1 - 1.0;
        if g0 == 0.0 {
            return 100.0 * x0;
        }
        if g0 < 0.0 && g1 >= 0.0 {
            let t = -g0 / (g1 - g0);
            return 100.0 * (x0 + t * (x1 - x0));
        }
    }
    unreachable!("the sweep always ends at (1, 1)")
}

pub fn max_rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss of a logit vector the textbook way: cross-entropy over a softmax for
/// two logits, binary cross-entropy over a sigmoid for one.
pub fn ref_loss(logits: &[f64], label: Label) -> f64 {
    let y = label.as_u8() as usize;
    if logits.len() == 2 {
        log_sum_exp(logits) - logits[y]
    } else {
        let z = logits[0];
        // -[y ln s(z) + (1-y) ln(1-s(z))] = ln(1+e^z) - y z
        log_sum_exp(&[0.0, z]) - y as f64 * z
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Head forward pass evaluated frame by frame: dense layers on every frame,
/// mean pooling after the first dense layer for the Whisper head and before
/// the MLP for the Wav2Vec head.
pub fn ref_logits(model: &HeadModel, frames: &[EmbeddingMatrix]) -> Vec<f64> {
    let p = model.params();
    match model.architecture {
        Architecture::Whisper { .. } => {
            let x = &frames[0];
            let hidden: Vec<Vec<f64>> = (0..x.rows()).map(|t| dense(p[0].1, p[1].1, x.row(t))).collect();
            let pooled: Vec<f64> = (0..hidden[0].len())
                .map(|j| hidden.iter().map(|h| h[j]).sum::<f64>() / hidden.len() as f64)
                .collect();
            dense(p[2].1, p[3].1, &pooled)
        }
        Architecture::Wav2Vec { input_dim, .. } => {
            let raw = p[6].1;
            let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let rows = frames[0].rows();
            let mut pooled = vec![0.0; input_dim];
            for t in 0..rows {
                for (l, layer) in frames.iter().enumerate() {
                    for d in 0..input_dim {
                        pooled[d] += e[l] / s * layer.get(t, d) / rows as f64;
                    }
                }
            }
            let a0: Vec<f64> = dense(p[0].1, p[1].1, &pooled).into_iter().map(|v| v.max(0.0)).collect();
            let a1: Vec<f64> = dense(p[2].1, p[3].1, &a0).into_iter().map(|v| v.max(0.0)).collect();
            dense(p[4].1, p[5].1, &a1)
        }
    }
}

pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_tensor: String,
}

fn note(report: &mut FdReport, tensor: &str, analytic: f64, numeric: f64) {
    let e = max_rel_err(analytic, numeric);
    report.checked += 1;
    if e > report.worst {
        report.worst = e;
        report.worst_tensor = tensor.to_string();
    }
}

/// Central differences of the reference loss against the library's analytic
/// gradients, for every parameter. Whisper parameters are perturbed with a
/// full reference pass; the much larger Wav2Vec MLP uses an exact partial
/// re-evaluation of only the units a parameter feeds.
pub fn fd_check(model: &HeadModel, frames: &[EmbeddingMatrix], label: Label, step: f64) -> FdReport {
    let pooled: Vec<Vec<f64>> = frames.iter().map(|f| f.mean_over_time()).collect();
    let (pred, trace) = model.forward_traced(&pooled).unwrap();
    let (_, grad_logits) = spoofprobe::trainer::loss(
        spoofprobe::trainer::LossKind::for_architecture(&model.architecture),
        &pred,
        label,
    );
    let grads = model.backward(&trace, &grad_logits).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut report = FdReport {
        checked: 0,
        worst: 0.0,
        worst_tensor: String::new(),
    };

    let full = |m: &HeadModel| ref_loss(&ref_logits(m, frames), label);
    let mut probe = model.clone();
    match model.architecture {
        Architecture::Whisper { .. } => {
            for (ti, (name, g)) in analytic.iter().enumerate() {
                for (i, &a) in g.iter().enumerate() {
                    let orig = probe.params_mut()[ti].1[i];
                    probe.params_mut()[ti].1[i] = orig + step;
                    let up = full(&probe);
                    probe.params_mut()[ti].1[i] = orig - step;
                    let down = full(&probe);
                    probe.params_mut()[ti].1[i] = orig;
                    note(&mut report, name, a, (up - down) / (2.0 * step));
                }
            }
        }
        Architecture::Wav2Vec { .. } => {
            // Layer weights change the pooled input, so they get full passes.
            let (lw_name, lw) = &analytic[6];
            for (i, &a) in lw.iter().enumerate() {
                let orig = probe.params_mut()[6].1[i];
                probe.params_mut()[6].1[i] = orig + step;
                let up = full(&probe);
                probe.params_mut()[6].1[i] = orig - step;
                let down = full(&probe);
                probe.params_mut()[6].1[i] = orig;
                note(&mut report, lw_name, a, (up - down) / (2.0 * step));
            }

            let p = model.params();
            let (w0, b0, w1, b1, w2, b2) = (p[0].1, p[1].1, p[2].1, p[3].1, p[4].1, p[5].1);
            let x = &pooled_with_weights(model, &pooled);
            let z0 = dense(w0, b0, x);
            let a0: Vec<f64> = z0.iter().map(|v| v.max(0.0)).collect();
            let z1 = dense(w1, b1, &a0);
            let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
            let h1 = a0.len();
            let h2 = a1.len();
            let logit_from = |a1: &[f64]| b2[0] + w2.iter().zip(a1).map(|(w, a)| w * a).sum::<f64>();
            let loss_of = |z: f64| ref_loss(&[z], label);

            // Output layer.
            for k in 0..h2 {
                let base = logit_from(&a1);
                let f = |d: f64| loss_of(base + d * a1[k]);
                note(&mut report, "dense2.weight", analytic[4].1[k], (f(step) - f(-step)) / (2.0 * step));
            }
            {
                let base = logit_from(&a1);
                let f = |d: f64| loss_of(base + d);
                note(&mut report, "dense2.bias", analytic[5].1[0], (f(step) - f(-step)) / (2.0 * step));
            }

            // Second hidden layer: unit o's pre-activation shifts by d * input.
            let unit1 = |o: usize, dz: f64| {
                let base = logit_from(&a1) - w2[o] * a1[o];
                loss_of(base + w2[o] * (z1[o] + dz).max(0.0))
            };
            for o in 0..h2 {
                for k in 0..h1 {
                    let num = (unit1(o, step * a0[k]) - unit1(o, -step * a0[k])) / (2.0 * step);
                    note(&mut report, "dense1.weight", analytic[2].1[o * h1 + k], num);
                }
                let num = (unit1(o, step) - unit1(o, -step)) / (2.0 * step);
                note(&mut report, "dense1.bias", analytic[3].1[o], num);
            }

            // First hidden layer: unit o feeds every second-layer unit.
            let unit0 = |o: usize, dz: f64| {
                let da = (z0[o] + dz).max(0.0) - a0[o];
                let a1p: Vec<f64> = (0..h2).map(|j| (z1[j] + w1[j * h1 + o] * da).max(0.0)).collect();
                loss_of(logit_from(&a1p))
            };
            let in_dim = x.len();
            for o in 0..h1 {
                for k in 0..in_dim {
                    let num = (unit0(o, step * x[k]) - unit0(o, -step * x[k])) / (2.0 * step);
                    note(&mut report, "dense0.weight", analytic[0].1[o * in_dim + k], num);
                }
                let num = (unit0(o, step) - unit0(o, -step)) / (2.0 * step);
                note(&mut report, "dense0.bias", analytic[1].1[o], num);
            }
        }
    }
    report
}

fn pooled_with_weights(model: &HeadModel, pooled: &[Vec<f64>]) -> Vec<f64> {
    let raw = model.params()[6].1.to_vec();
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut x = vec![0.0; pooled[0].len()];
    for (l, p) in pooled.iter().enumerate() {
        for (xd, v) in x.iter_mut().zip(p) {
            *xd += e[l] / s * v;
        }
    }
    x
}

/// Fills every parameter of `model` with draws from `[-scale, scale]`.
pub fn randomize(model: &mut HeadModel, rng: &mut impl Rng, scale: f64) {
    for (_, t) in model.params_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, tag: &str) -> EmbeddingMatrix {
    let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EmbeddingMatrix::new(rows, cols, values, tag).unwrap()
}

/// Plain logistic regression on standardized features, trained by full-batch
/// gradient descent. Returns a scoring function.
pub fn logistic_baseline(train: &[(Vec<f64>, Label)]) -> impl Fn(&[f64]) -> f64 {
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|s| s.0[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|s| (s.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-9)
        })
        .collect();
    let norm = move |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
    let xs: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, l)| (norm(x), l.as_u8() as f64)).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += err * v / n);
            gb += err / n;
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= 0.5 * (g + 1e-3 * *a));
        b -= 0.5 * gb;
    }
    move |x: &[f64]| {
        let x = norm(x);
        b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>()
    }
}

/// Published per-dataset (EER, AUC) pairs and the Average cell of each
/// model, dataset order ASVspoof 2019, ASVspoof 2021, InTheWild,
/// TIMIT-TTS, FakeOrReal.
pub const TABLE: [(&str, [(f64, f64); 5], (f64, f64)); 8] = [
    ("whisper-tiny", [(6.21, 98.45), (15.61, 92.32), (37.59, 67.37), (28.26, 79.85), (15.33, 92.83)], (20.60, 86.16)),
    ("whisper-base", [(3.43, 99.35), (12.12, 95.38), (38.34, 65.96), (19.76, 87.73), (8.44, 96.81)], (16.42, 89.05)),
    ("whisper-small", [(2.12, 99.78), (12.01, 95.11), (34.35, 71.85), (15.53, 91.85), (2.16, 99.55)], (13.23, 91.63)),
    ("whisper-medium", [(1.58, 99.87), (12.40, 92.32), (32.19, 73.16), (21.74, 87.01), (12.50, 93.64)], (16.08, 89.20)),
    ("whisper-large", [(2.00, 99.82), (11.68, 93.82), (30.40, 77.02), (23.16, 84.70), (5.08, 97.43)], (14.46, 90.56)),
    ("wav2vec2-base", [(3.94, 99.34), (15.28, 93.49), (39.83, 64.40), (24.62, 83.69), (19.21, 88.69)], (20.58, 85.92)),
    ("wav2vec2-large", [(2.54, 99.71), (13.58, 94.75), (28.23, 78.69), (24.14, 83.92), (13.07, 94.33)], (16.31, 90.28)),
    ("wav2vec2-xls-r", [(3.93, 99.29), (17.36, 89.12), (30.32, 75.99), (29.07, 75.58), (36.12, 69.12)], (23.36, 81.82)),
];

pub const TABLE_DATASETS: [&str; 5] = ["asvspoof19", "asvspoof21", "inthewild", "timit-tts+ljspeech", "fakeorreal"];

/// Smallest |pre-activation| over the Wav2Vec head's ReLU units. Central
/// differences are only meaningful when no perturbation crosses a kink.
pub fn kink_margin(model: &HeadModel, frames: &[EmbeddingMatrix]) -> f64 {
    let pooled: Vec<Vec<f64>> = frames.iter().map(|f| f.mean_over_time()).collect();
    let p = model.params();
    let x = pooled_with_weights(model, &pooled);
    let z0 = dense(p[0].1, p[1].1, &x);
    let a0: Vec<f64> = z0.iter().map(|v| v.max(0.0)).collect();
    let z1 = dense(p[2].1, p[3].1, &a0);
    z0.iter().chain(&z1).fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

pub fn whisper_case(seed: u64) -> (HeadModel, Vec<EmbeddingMatrix>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = HeadModel::init(Architecture::Whisper { input_dim: 8, hidden: 16 }, seed);
    randomize(&mut model, &mut rng, 0.5);
    (model, vec![random_matrix(&mut rng, 5, 8, "t")])
}

/// Random Wav2Vec head and layer stack. Biases of ReLU units that sit
/// within 1e-3 of their kink are pushed 2e-3 further from it.
pub fn wav2vec_case(seed: u64, input_dim: usize, num_layers: usize) -> (HeadModel, Vec<EmbeddingMatrix>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = HeadModel::init(Architecture::wav2vec(input_dim, num_layers), seed);
    randomize(&mut model, &mut rng, 0.1);
    let frames: Vec<EmbeddingMatrix> =
        (0..num_layers).map(|_| random_matrix(&mut rng, 5, input_dim, "t")).collect();
    let pooled: Vec<Vec<f64>> = frames.iter().map(|f| f.mean_over_time()).collect();
    let mut x = pooled_with_weights(&model, &pooled);
    for layer in 0..2 {
        let l = &mut model.layers[layer];
        let z = dense(&l.weights, &l.bias, &x);
        for (b, zv) in l.bias.iter_mut().zip(&z) {
            if zv.abs() <= 1e-3 {
                *b += if *zv >= 0.0 { 2e-3 } else { -2e-3 };
            }
        }
        x = dense(&l.weights, &l.bias, &x).into_iter().map(|v| v.max(0.0)).collect();
    }
    debug_assert!(kink_margin(&model, &frames) > 1e-3);
    (model, frames)
}
