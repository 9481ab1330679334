//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use neuroslice::eval::{
    cross_validate, kfold_split, sample_stddev, training_size_identities, ComparisonTable, EvalReport, FoldLearner,
    FoldLevel, ReportEcho, Sample, SelectionStrategy, PUBLISHED_SLICES_PER_SUBJECT, PUBLISHED_SUBJECTS,
    PUBLISHED_TOTAL_IMAGES, PUBLISHED_TRAINING_SIZES,
};
use neuroslice::image::ImageTensor;
use neuroslice::nn::ops::{conv2d_forward, dense_forward, gap_forward, maxpool_forward};
use neuroslice::nn::{Architecture, LayerParams, LayerSpec, Model, ModelSpec, Scalar, Tensor};
use neuroslice::select::{
    build_histogram, entropy_bits, extract_slices, rank_slices, sort_scores, Axis, EntropyScore, Histogram, RangeMode,
    SelectionConfig,
};
use neuroslice::transfer::{
    apply_transfer, load_weights, rmsprop_step, sgd_step, train, weight_name, ContainerMeta, FreezeMask,
    OptimizerKind, Regime, TrainConfig, TransferError, WeightContainer,
};
use neuroslice::volume::{parse_raw_volume, write_raw_volume, Label, Volume, VolumeError};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std).unwrap().sample(r)
}

// ---------------------------------------------------------------------------
// shared CLI workspaces
// ---------------------------------------------------------------------------

struct Ctx {
    dirs: Mutex<HashMap<u64, tempfile::TempDir>>,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuroslice"))
}

fn cli(config: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).args(args).output().unwrap()
}

fn ensure_ok(o: &Output, what: &str) -> Result<(), String> {
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{what} failed: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn train_json(epochs: usize) -> Value {
    json!({"epochs": epochs, "batch_size": 40, "optimizer": "rmsprop", "learning_rate": 0.001})
}

/// Evaluation cohort seeded `s`, auxiliary cohort seeded `1000 + s` with a
/// different texture family.
fn acceptance_config(seed: u64, regime: &str) -> Value {
    let cohort = |family: &str, seed: u64| {
        json!({"n_subjects": 40, "dims": [32, 32, 24], "class_gap": 1.0, "noise": 0.1, "family": family, "seed": seed})
    };
    json!({
        "manifest_path": "out/cohort/manifest.jsonl",
        "selection": {"k": 8},
        "input_size": 32,
        "architecture": "micro_vgg",
        "regime": regime,
        "weights_path": "out/weights/pretrained.nswt",
        "train": train_json(30),
        "cv": {"k": 5, "level": "subject", "seed": seed},
        "output_dir": "out",
        "synth": cohort("checker", seed),
        "pretrain": {"cohort": cohort("gratings", 1000 + seed), "train": train_json(30)},
        "compare": {"seeds": [1, 2, 3, 4, 5]}
    })
}

impl Ctx {
    /// Directory holding the seed's synthetic cohort, pretrained container
    /// and one config per regime.
    fn workspace(&self, seed: u64) -> Result<PathBuf, String> {
        let mut dirs = self.dirs.lock().unwrap();
        if let Some(d) = dirs.get(&seed) {
            return Ok(d.path().to_path_buf());
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        for regime in ["scratch", "head_only"] {
            let text = serde_json::to_string_pretty(&acceptance_config(seed, regime)).unwrap();
            fs::write(dir.path().join(format!("{regime}.json")), text).map_err(|e| e.to_string())?;
        }
        let cfg = dir.path().join("scratch.json");
        ensure_ok(&cli(&cfg, &["synth"]), "synth")?;
        ensure_ok(&cli(&cfg, &["--seed", &seed.to_string(), "pretrain"]), "pretrain")?;
        let path = dir.path().to_path_buf();
        dirs.insert(seed, dir);
        Ok(path)
    }
}

fn read_report(path: &Path) -> Result<EvalReport, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// 1. entropy oracle
// ---------------------------------------------------------------------------

/// Error-free sum of `a + b` as `(s, e)`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `log2 N − (Σ c log2 c) / N`, with the sum carried in double-double.
fn entropy_oracle(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &c in counts.iter().filter(|&&c| c > 0) {
        let c = c as f64;
        let l = c.log2();
        let p = c * l;
        let p_err = c.mul_add(l, -p);
        let (s, e) = two_sum(hi, p);
        hi = s;
        lo += e + p_err;
    }
    let n = n as f64;
    (n.log2() - (hi + lo) / n).max(0.0)
}

fn criterion_1(_: &Ctx) -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let bins = r.random_range(2..=1024usize);
        let max = [1u64, 10, 1000, 1_000_000][r.random_range(0..4)];
        let zero_frac: f64 = r.random();
        let mut counts: Vec<u64> = (0..bins)
            .map(|_| if r.random::<f64>() < zero_frac { 0 } else { r.random_range(0..=max) })
            .collect();
        if counts.iter().all(|&c| c == 0) {
            counts[0] = 1;
        }
        let lib = entropy_bits(&Histogram::from_counts(counts.clone(), (0.0, 1.0)));
        let err = (lib - entropy_oracle(&counts)).abs();
        worst = worst.max(err);
        check!(err <= 1e-12, "histogram with {bins} bins: error {err:e}");
    }
    for _ in 0..200 {
        let bins = r.random_range(2..=512usize);
        let mut counts = vec![0u64; bins];
        counts[r.random_range(0..bins)] = r.random_range(1..=1_000_000);
        let h = entropy_bits(&Histogram::from_counts(counts, (0.0, 1.0)));
        check!(h == 0.0 && h.is_sign_positive(), "single full bin gave {h}");
    }
    for exp in 1..=12u32 {
        let bins = 1usize << exp;
        let c = r.random_range(1..=1000u64);
        let h = entropy_bits(&Histogram::from_counts(vec![c; bins], (0.0, 1.0)));
        check!(h == exp as f64, "uniform {bins} bins gave {h}");
    }
    let mut worst_uniform = 0.0f64;
    for bins in 3..=1000usize {
        let h = entropy_bits(&Histogram::from_counts(vec![7; bins], (0.0, 1.0)));
        worst_uniform = worst_uniform.max((h - (bins as f64).log2()).abs());
    }
    check!(worst_uniform <= 1e-12, "uniform non-power-of-two error {worst_uniform:e}");
    check!(entropy_bits(&Histogram::from_counts(vec![1; 256], (0.0, 1.0))) == 8.0, "256 singleton bins");
    Ok(format!("max error {worst:.1e}; uniform non-power-of-two max error {worst_uniform:.1e}"))
}

// ---------------------------------------------------------------------------
// 2. ranking equivalence
// ---------------------------------------------------------------------------

fn random_volume(r: &mut ChaCha8Rng) -> Volume {
    let dims = [r.random_range(1..=16), r.random_range(1..=16), r.random_range(1..=40)];
    let n = dims[0] * dims[1] * dims[2];
    let levels = [0usize, 2, 3, 6][r.random_range(0..4)];
    let mut vox: Vec<f64> = (0..n)
        .map(|_| {
            if levels == 0 {
                normal(r, 3.0)
            } else {
                r.random_range(0..levels) as f64
            }
        })
        .collect();
    let at = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    // duplicate and constant z-planes
    for _ in 0..r.random_range(0..4) {
        let (a, b) = (r.random_range(0..dims[2]), r.random_range(0..dims[2]));
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                vox[at(x, y, b)] = vox[at(x, y, a)];
            }
        }
    }
    for _ in 0..r.random_range(0..3) {
        let z = r.random_range(0..dims[2]);
        let v = normal(r, 1.0);
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                vox[at(x, y, z)] = v;
            }
        }
    }
    Volume::new(dims, vox, "v").unwrap()
}

#[derive(PartialEq)]
enum TieKey {
    Zero,
    Counts(Vec<u64>),
}

fn oracle_ranking(vol: &Volume, axis: Axis, bins: usize, mode: RangeMode, k: usize) -> Vec<usize> {
    let [nx, ny, nz] = vol.dims();
    let n = [nx, ny, nz][axis as usize];
    let plane = |i: usize| -> Vec<f64> {
        let mut px = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let c = [x, y, z][axis as usize];
                    if c == i {
                        px.push(vol.get(x, y, z));
                    }
                }
            }
        }
        px
    };
    let fold_range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let vol_range = fold_range(vol.voxels());
    let mut scored: Vec<(usize, f64, TieKey)> = (0..n)
        .map(|i| {
            let px = plane(i);
            let (lo, hi) = match mode {
                RangeMode::PerVolume => vol_range,
                RangeMode::PerSlice => fold_range(&px),
            };
            if !(lo < hi) {
                return (i, 0.0, TieKey::Zero);
            }
            let mut counts = vec![0u64; bins];
            for &v in &px {
                let pos = ((v - lo) * (bins as f64 / (hi - lo))).floor();
                let b = if pos <= 0.0 { 0 } else { (pos as usize).min(bins - 1) };
                counts[b] += 1;
            }
            let mut nz: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
            nz.sort_unstable();
            if nz.len() <= 1 {
                (i, 0.0, TieKey::Zero)
            } else {
                (i, entropy_oracle(&nz), TieKey::Counts(nz))
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        if a.2 == b.2 {
            a.0.cmp(&b.0)
        } else {
            b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
        }
    });
    scored.into_iter().take(k).map(|s| s.0).collect()
}

fn criterion_2(_: &Ctx) -> Outcome {
    let mut r = rng(2);
    let mut ties = 0usize;
    for case in 0..100 {
        let vol = random_volume(&mut r);
        let axis = [Axis::X, Axis::Y, Axis::Z][r.random_range(0..3)];
        let n = vol.dims()[axis as usize];
        let bins = [2usize, 8, 16, 64, 256][r.random_range(0..5)];
        let k = r.random_range(1..=n + 3);
        for mode in [RangeMode::PerVolume, RangeMode::PerSlice] {
            let cfg = SelectionConfig { k, bins, axis, range_mode: mode };
            let lib: Vec<usize> = rank_slices(&vol, &cfg).unwrap().iter().map(|s| s.slice_index).collect();
            let oracle = oracle_ranking(&vol, axis, bins, mode, k);
            check!(lib == oracle, "case {case} {mode:?}: lib {lib:?} vs oracle {oracle:?}");

            let range = vol.value_range();
            let mut nats: Vec<EntropyScore> = extract_slices(&vol, axis)
                .iter()
                .map(|s| {
                    let rg = match mode {
                        RangeMode::PerVolume => range,
                        RangeMode::PerSlice => s.min_max(),
                    };
                    let e = if rg.0 < rg.1 { build_histogram(s, bins, rg).unwrap().entropy_nats() } else { 0.0 };
                    EntropyScore { slice_index: s.slice_index, entropy_bits: e }
                })
                .collect();
            sort_scores(&mut nats);
            ties += nats.windows(2).filter(|w| w[0].entropy_bits == w[1].entropy_bits).count();
            let by_nats: Vec<usize> = nats.iter().take(k).map(|s| s.slice_index).collect();
            check!(lib == by_nats, "case {case} {mode:?}: natural-log ranking {by_nats:?} vs {lib:?}");
        }
    }
    Ok(format!("200 rankings identical; {ties} exact ties exercised"))
}

// ---------------------------------------------------------------------------
// 3. layer oracles
// ---------------------------------------------------------------------------

struct ConvCase {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

fn conv_oracle(case: &ConvCase, x: &[f64], wt: &[f64], b: &[f64]) -> (usize, usize, Vec<f64>) {
    let ConvCase { c, h, w, o, kh, kw, stride, pad } = *case;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(o * ho * wo);
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[oc];
                for ic in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let (r, s) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                acc += wt[((oc * c + ic) * kh + u) * kw + v] * x[(ic * h + r as usize) * w + s as usize];
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (ho, wo, out)
}

fn pool_oracle(c: usize, h: usize, w: usize, win: usize, stride: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = ((h - win) / stride + 1, (w - win) / stride + 1);
    let (mut vals, mut idx) = (Vec::new(), Vec::new());
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best: Option<(f64, usize)> = None;
                for u in 0..win {
                    for v in 0..win {
                        let k = (ch * h + i * stride + u) * w + j * stride + v;
                        if best.is_none_or(|(b, _)| x[k] > b) {
                            best = Some((x[k], k));
                        }
                    }
                }
                let (b, k) = best.unwrap();
                vals.push(b);
                idx.push(k);
            }
        }
    }
    (vals, idx)
}

fn tensor<T: Scalar>(shape: &[usize], data: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect()).unwrap()
}

fn as_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// Values rounded through f32 so both precisions see identical inputs.
fn f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn criterion_3(_: &Ctx) -> Outcome {
    let mut r = rng(3);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut counts = [0usize; 4];
    let mut done = 0;
    while done < 200 {
        match done % 4 {
            0 => {
                let case = ConvCase {
                    c: r.random_range(1..=4),
                    h: r.random_range(1..=12),
                    w: r.random_range(1..=12),
                    o: r.random_range(1..=4),
                    kh: r.random_range(1..=4),
                    kw: r.random_range(1..=4),
                    stride: r.random_range(1..=3),
                    pad: r.random_range(0..=2),
                };
                if case.h + 2 * case.pad < case.kh || case.w + 2 * case.pad < case.kw {
                    continue;
                }
                let std = (2.0 / (case.c * case.kh * case.kw) as f64).sqrt();
                let x = f32_exact((0..case.c * case.h * case.w).map(|_| r.random::<f64>()).collect());
                let wt = f32_exact((0..case.o * case.c * case.kh * case.kw).map(|_| normal(&mut r, std)).collect());
                let b = f32_exact((0..case.o).map(|_| normal(&mut r, 0.1)).collect());
                let (ho, wo, want) = conv_oracle(&case, &x, &wt, &b);
                let xs = [case.c, case.h, case.w];
                let ws = [case.o, case.c, case.kh, case.kw];
                let y64 = conv2d_forward::<f64>(&tensor(&xs, &x), &tensor(&ws, &wt), &tensor(&[case.o], &b), case.stride, case.pad)
                    .unwrap();
                let y32 = conv2d_forward::<f32>(&tensor(&xs, &x), &tensor(&ws, &wt), &tensor(&[case.o], &b), case.stride, case.pad)
                    .unwrap();
                check!(y64.shape() == [case.o, ho, wo] && y32.shape() == y64.shape(), "conv shape {:?}", y64.shape());
                worst64 = worst64.max(rel_err(&as_f64(&y64), &want));
                worst32 = worst32.max(rel_err(&as_f64(&y32), &want));
            }
            1 => {
                let (c, h, w) = (r.random_range(1..=4), r.random_range(1..=12), r.random_range(1..=12));
                let (win, stride) = (r.random_range(1..=3), r.random_range(1..=3));
                if h < win || w < win {
                    continue;
                }
                // few distinct values so windows contain ties
                let x: Vec<f64> = (0..c * h * w).map(|_| r.random_range(0..4) as f64 * 0.25).collect();
                let (want, want_idx) = pool_oracle(c, h, w, win, stride, &x);
                let (y64, i64_) = maxpool_forward::<f64>(&tensor(&[c, h, w], &x), win, stride).unwrap();
                let (y32, i32_) = maxpool_forward::<f32>(&tensor(&[c, h, w], &x), win, stride).unwrap();
                check!(as_f64(&y64) == want && as_f64(&y32) == want, "max-pool values differ");
                check!(i64_ == want_idx && i32_ == want_idx, "max-pool argmax differs");
            }
            2 => {
                let (inp, out) = (r.random_range(1..=64), r.random_range(1..=10));
                let std = (2.0 / inp as f64).sqrt();
                let x = f32_exact((0..inp).map(|_| r.random::<f64>()).collect());
                let wt = f32_exact((0..inp * out).map(|_| normal(&mut r, std)).collect());
                let b = f32_exact((0..out).map(|_| normal(&mut r, 0.1)).collect());
                let want: Vec<f64> = (0..out)
                    .map(|o| b[o] + (0..inp).map(|i| wt[o * inp + i] * x[i]).sum::<f64>())
                    .collect();
                let y64 = dense_forward::<f64>(&tensor(&[inp], &x), &tensor(&[out, inp], &wt), &tensor(&[out], &b)).unwrap();
                let y32 = dense_forward::<f32>(&tensor(&[inp], &x), &tensor(&[out, inp], &wt), &tensor(&[out], &b)).unwrap();
                worst64 = worst64.max(rel_err(&as_f64(&y64), &want));
                worst32 = worst32.max(rel_err(&as_f64(&y32), &want));
            }
            _ => {
                let (c, h, w) = (r.random_range(1..=4), r.random_range(1..=12), r.random_range(1..=12));
                let x = f32_exact((0..c * h * w).map(|_| normal(&mut r, 1.0)).collect());
                let want: Vec<f64> = x.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
                let y64 = gap_forward::<f64>(&tensor(&[c, h, w], &x)).unwrap();
                let y32 = gap_forward::<f32>(&tensor(&[c, h, w], &x)).unwrap();
                worst64 = worst64.max(rel_err(&as_f64(&y64), &want));
                worst32 = worst32.max(rel_err(&as_f64(&y32), &want));
            }
        }
        counts[done % 4] += 1;
        done += 1;
    }
    check!(worst64 <= 1e-12, "F64 max relative error {worst64:e}");
    check!(worst32 <= 1e-6, "F32 max relative error {worst32:e}");
    Ok(format!(
        "{} conv, {} pool, {} dense, {} gap; max rel error F32 {worst32:.1e}, F64 {worst64:.1e}",
        counts[0], counts[1], counts[2], counts[3]
    ))
}

// ---------------------------------------------------------------------------
// 4. gradient check
// ---------------------------------------------------------------------------

fn random_params(spec: &ModelSpec, r: &mut ChaCha8Rng) -> Vec<LayerParams<f64>> {
    spec.param_shapes()
        .into_iter()
        .map(|(ws, bs, fan_in)| {
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|_| normal(r, std)).collect();
            let b: Vec<f64> = (0..bs.iter().product::<usize>()).map(|_| normal(r, 0.1)).collect();
            LayerParams { weight: tensor(&ws, &w), bias: tensor(&bs, &b) }
        })
        .collect()
}

fn criterion_4(_: &Ctx) -> Outcome {
    const H: f64 = 1e-5;
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for inst in 0..20 {
        let arch = if inst % 2 == 0 { Architecture::MicroVgg } else { Architecture::MicroGap };
        let input = [r.random_range(1..=3), r.random_range(8..=16), r.random_range(8..=16)];
        let spec = arch.spec(input, 2).unwrap();
        let mut model = Model::from_params(spec.clone(), random_params(&spec, &mut r)).unwrap();
        let x: Tensor<f64> = tensor(&input, &(0..input.iter().product()).map(|_| r.random::<f64>()).collect::<Vec<_>>());
        let label = r.random_range(0..2);
        let (_, grads) = model.backward_all(&x, label).unwrap();
        for ord in 0..spec.n_parametric() {
            let g = grads[ord].as_ref().ok_or(format!("no gradient for layer {ord}"))?;
            for bias in [false, true] {
                let analytic = if bias { g.bias.data().to_vec() } else { g.weight.data().to_vec() };
                for (i, &a) in analytic.iter().enumerate() {
                    let mut loss_at = |delta: f64| {
                        let p = &mut model.params_mut()[ord];
                        let t = if bias { &mut p.bias } else { &mut p.weight };
                        let orig = t.data()[i];
                        t.data_mut()[i] = orig + delta;
                        let l = model.loss(&x, label).unwrap();
                        let p = &mut model.params_mut()[ord];
                        let t = if bias { &mut p.bias } else { &mut p.weight };
                        t.data_mut()[i] = orig;
                        l
                    };
                    let numeric = (loss_at(H) - loss_at(-H)) / (2.0 * H);
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(err);
                    checked += 1;
                    check!(
                        err <= 1e-4,
                        "instance {inst} ({arch}, input {input:?}) {}[{i}]: analytic {a:e}, numeric {numeric:e}, rel {err:e}",
                        weight_name(&spec, ord, bias)
                    );
                }
            }
        }
    }
    Ok(format!("{checked} parameters, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. freeze invariant
// ---------------------------------------------------------------------------

fn random_images(r: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> Vec<(ImageTensor, usize)> {
    (0..n)
        .map(|i| {
            let data = (0..shape.iter().product()).map(|_| r.random::<f64>()).collect();
            (ImageTensor::new(shape[0], shape[1], shape[2], data), i % 2)
        })
        .collect()
}

fn criterion_5(_: &Ctx) -> Outcome {
    let mut r = rng(5);
    let mut notes = Vec::new();
    for arch in [Architecture::MicroVgg, Architecture::MicroGap] {
        let input = [1, 16, 16];
        let spec = arch.spec(input, 2).unwrap();
        let source = Model::<f32>::init_random(&spec, 55);
        let meta = ContainerMeta { architecture_id: Some(arch.architecture_id(input, 2)), normalization: None };
        let container = load_weights(&WeightContainer::from_model(&source, meta).encode()).unwrap();
        let (mut model, mask) = apply_transfer::<f32>(&spec, Some(&container), Regime::HeadOnly, 7).unwrap();
        let head = spec.head_ordinal().unwrap();
        check!(mask.n_trainable() == 1 && mask.trainable[head], "mask {:?}", mask.trainable);
        let head_before = model.params()[head].clone();
        let data = random_images(&mut r, 8, input);
        let cfg = TrainConfig { epochs: 50, batch_size: 4, ..TrainConfig::vgg_style() };
        train(&mut model, &data, &cfg, &mask).unwrap();
        for ord in 0..spec.n_parametric() {
            if ord == head {
                continue;
            }
            for bias in [false, true] {
                let name = weight_name(&spec, ord, bias);
                let stored = &container.tensors[&name].values;
                let p = &model.params()[ord];
                let now = if bias { p.bias.data() } else { p.weight.data() };
                let same = stored.len() == now.len() && stored.iter().zip(now).all(|(a, b)| a.to_bits() == b.to_bits());
                check!(same, "{arch}: frozen tensor {name} changed");
            }
        }
        let p = &model.params()[head];
        check!(
            p.weight.data() != head_before.weight.data() && p.bias.data() != head_before.bias.data(),
            "{arch}: head did not change"
        );
        notes.push(format!("{arch} {} frozen layers intact", spec.n_parametric() - 1));
    }
    Ok(format!("100 steps each; {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 6. optimizer contracts
// ---------------------------------------------------------------------------

fn criterion_6(_: &Ctx) -> Outcome {
    let mut r = rng(6);
    let mut w = tensor::<f64>(&[1], &[1.0]);
    sgd_step(&mut w, &tensor(&[1], &[2.0]), 1e-4).unwrap();
    check!((w.data()[0] - 0.9998).abs() <= 1e-12, "sgd example gave {}", w.data()[0]);

    for _ in 0..100 {
        let n = r.random_range(1..=64);
        let w0: Vec<f64> = (0..n).map(|_| normal(&mut r, 1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| normal(&mut r, 1.0)).collect();
        let lr = 10f64.powf(r.random_range(-5.0..0.0));
        let mut w = tensor::<f64>(&[n], &w0);
        sgd_step(&mut w, &tensor(&[n], &g), lr).unwrap();
        for i in 0..n {
            check!((w.data()[i] - (w0[i] - lr * g[i])).abs() <= 1e-12, "sgd oracle mismatch");
        }
    }
    check!(
        matches!(sgd_step(&mut tensor::<f64>(&[2], &[0.0, 0.0]), &tensor(&[3], &[0.0; 3]), 0.1), Err(TransferError::ShapeMismatch(_))),
        "sgd shape mismatch not reported"
    );

    // two successive steps against a scalar oracle
    for _ in 0..200 {
        let (lr, rho, eps) = (10f64.powf(r.random_range(-5.0..-1.0)), r.random_range(0.5..0.999), 1e-8);
        let (mut ws, mut acc_s) = (normal(&mut r, 1.0), 0.0f64);
        let mut w = tensor::<f64>(&[1], &[ws]);
        let mut acc = tensor::<f64>(&[1], &[0.0]);
        for _ in 0..2 {
            let g = normal(&mut r, 1.0);
            acc_s = rho * acc_s + (1.0 - rho) * g * g;
            ws -= lr * g / (acc_s.sqrt() + eps);
            rmsprop_step(&mut w, &tensor(&[1], &[g]), &mut acc, lr, rho, eps).unwrap();
            check!((w.data()[0] - ws).abs() <= 1e-12 && (acc.data()[0] - acc_s).abs() <= 1e-12, "rmsprop oracle mismatch");
        }
    }
    let mut w = tensor::<f64>(&[3], &[0.5, -1.0, 2.0]);
    let mut acc = tensor::<f64>(&[3], &[0.0; 3]);
    rmsprop_step(&mut w, &tensor(&[3], &[0.3, -2.0, 7.0]), &mut acc, 1e-3, 0.9, 1e-8).unwrap();
    let first: Vec<f64> = w.data().iter().zip([0.5, -1.0, 2.0]).map(|(a, b)| (a - b).abs()).collect();
    check!(first.iter().all(|d| (d - 0.003162).abs() < 1e-6), "first-step magnitudes {first:?}");
    let before = w.data().to_vec();
    let acc_before = acc.data().to_vec();
    rmsprop_step(&mut w, &tensor(&[3], &[0.0; 3]), &mut acc, 1e-3, 0.9, 1e-8).unwrap();
    check!(w.data() == &before[..], "zero gradient moved weights");
    check!(acc.data().iter().zip(&acc_before).all(|(a, b)| *a == 0.9 * b), "accumulators did not decay by rho");

    let mut w = tensor::<f64>(&[16], &[0.0; 16]);
    let mut acc = tensor::<f64>(&[16], &[0.0; 16]);
    let mut w32 = tensor::<f32>(&[16], &[0.0; 16]);
    let mut acc32 = tensor::<f32>(&[16], &[0.0; 16]);
    for _ in 0..10_000 {
        let g: Vec<f64> = (0..16)
            .map(|_| match r.random_range(0..4) {
                0 => 0.0,
                _ => normal(&mut r, 1.0) * 10f64.powf(r.random_range(-20.0..15.0)),
            })
            .collect();
        let rho = r.random_range(0.01..0.999);
        rmsprop_step(&mut w, &tensor(&[16], &g), &mut acc, 1e-3, rho, 1e-8).unwrap();
        let g32: Vec<f64> = g.iter().map(|v| v.clamp(-1e15, 1e15)).collect();
        rmsprop_step(&mut w32, &tensor(&[16], &g32), &mut acc32, 1e-3, rho as f32, 1e-8).unwrap();
        check!(acc.data().iter().all(|&a| a >= 0.0), "negative F64 accumulator");
        check!(acc32.data().iter().all(|&a| a >= 0.0), "negative F32 accumulator");
    }

    let spec = Architecture::MicroGap.spec([1, 8, 8], 2).unwrap();
    let data = random_images(&mut r, 6, [1, 8, 8]);
    for opt in [OptimizerKind::Sgd, OptimizerKind::RmsProp] {
        let cfg = TrainConfig { epochs: 3, batch_size: 4, optimizer: opt, learning_rate: 0.0, ..TrainConfig::vgg_style() };
        let init = Model::<f64>::init_random(&spec, 3);
        let mut model = init.clone();
        train(&mut model, &data, &cfg, &FreezeMask::all_trainable(spec.n_parametric())).unwrap();
        check!(model.params() == init.params(), "{opt:?} with lr = 0 changed parameters");
    }
    Ok("formula oracles, 10000 random RMSProp steps, lr = 0 no-op".into())
}

// ---------------------------------------------------------------------------
// 7. CV partition suite
// ---------------------------------------------------------------------------

/// Records, per fold, which subjects it was fitted on, and flags any test
/// example whose subject was also trained on.
struct Recorder {
    leaks: Mutex<Vec<String>>,
}

impl FoldLearner for Recorder {
    type Fitted = HashSet<String>;

    fn fit(&self, train: &[&Sample], _: usize) -> neuroslice::eval::Result<HashSet<String>> {
        Ok(train.iter().map(|s| s.subject_id.clone()).collect())
    }

    fn predict(&self, seen: &HashSet<String>, sample: &Sample) -> neuroslice::eval::Result<Label> {
        if seen.contains(&sample.subject_id) {
            self.leaks.lock().unwrap().push(sample.subject_id.clone());
        }
        Ok(if sample.slice_index % 3 == 0 { Label::AD } else { Label::HC })
    }
}

fn criterion_7(_: &Ctx) -> Outcome {
    let mut r = rng(7);
    let mut worst_sd = 0.0f64;
    for case in 0..500 {
        let n = r.random_range(2..=500usize);
        let k = r.random_range(2..=n.min(20));
        let seed = r.random::<u64>();
        let subjects: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let plan = kfold_split(&subjects, k, seed, FoldLevel::Subject).unwrap();
        let folds = plan.folds();
        let mut seen = HashSet::new();
        for f in &folds {
            for u in f {
                check!(seen.insert(u.to_string()), "case {case}: unit {u} in two folds");
            }
        }
        check!(seen.len() == n && subjects.iter().all(|s| seen.contains(s)), "case {case}: folds do not cover units");
        let sizes = plan.fold_sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        check!(sizes.len() == k && hi - lo <= 1, "case {case}: fold sizes {sizes:?}");

        let mut data = Vec::new();
        for s in &subjects {
            for slice in 0..r.random_range(2..=4) {
                data.push(Sample {
                    subject_id: s.clone(),
                    slice_index: slice,
                    input: ImageTensor::new(1, 1, 1, vec![0.0]),
                    label: if slice % 2 == 0 { Label::HC } else { Label::AD },
                });
            }
        }
        let learner = Recorder { leaks: Mutex::new(Vec::new()) };
        let report = cross_validate(&data, &plan, &learner, ReportEcho::default()).map_err(|e| e.to_string())?;
        let leaks = learner.leaks.into_inner().unwrap();
        check!(leaks.is_empty(), "case {case}: {} leaked test examples", leaks.len());
        let m = report.per_fold.iter().sum::<f64>() / k as f64;
        let sd = (report.per_fold.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
        worst_sd = worst_sd.max((report.stddev - sd).abs());
        check!((report.stddev - sd).abs() <= 1e-12, "case {case}: stddev {} vs {sd}", report.stddev);

        // slice-level plans partition slice units the same way
        let units: Vec<String> = data.iter().map(|s| s.unit_id(FoldLevel::Slice)).collect();
        let k_slice = k.min(units.len());
        let sizes = kfold_split(&units, k_slice, seed, FoldLevel::Slice).unwrap().fold_sizes();
        check!(
            sizes.iter().sum::<usize>() == units.len() && sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1,
            "case {case}: slice-level sizes {sizes:?}"
        );
    }
    check!(sample_stddev(&[0.5, 0.75, 1.0]) == 0.25, "sample_stddev of [0.5, 0.75, 1.0]");
    Ok(format!("500 plans; stddev max deviation {worst_sd:.1e}"))
}

// ---------------------------------------------------------------------------
// 8. head-only training equals softmax regression
// ---------------------------------------------------------------------------

struct SoftmaxRegression {
    w: [Vec<f64>; 2],
    b: [f64; 2],
    acc_w: [Vec<f64>; 2],
    acc_b: [f64; 2],
}

impl SoftmaxRegression {
    fn logits(&self, f: &[f64]) -> [f64; 2] {
        let z = |c: usize| self.b[c] + self.w[c].iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
        [z(0), z(1)]
    }

    fn probs(&self, f: &[f64]) -> [f64; 2] {
        let z = self.logits(f);
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let s = e[0] + e[1];
        [e[0] / s, e[1] / s]
    }

    /// One mini-batch step; returns (summed loss, correct count) before the update.
    fn step(&mut self, batch: &[(Vec<f64>, usize)], cfg: &TrainConfig) -> (f64, usize) {
        let m = self.w[0].len();
        let mut gw = [vec![0.0; m], vec![0.0; m]];
        let mut gb = [0.0; 2];
        let (mut loss, mut correct) = (0.0, 0);
        for (f, y) in batch {
            let p = self.probs(f);
            let z = self.logits(f);
            let zm = z[0].max(z[1]);
            loss += zm + ((z[0] - zm).exp() + (z[1] - zm).exp()).ln() - z[*y];
            correct += usize::from((if p[1] > p[0] { 1 } else { 0 }) == *y);
            for c in 0..2 {
                let d = p[c] - f64::from(u8::from(c == *y));
                gb[c] += d;
                for j in 0..m {
                    gw[c][j] += d * f[j];
                }
            }
        }
        let n = batch.len() as f64;
        let lr = cfg.learning_rate;
        let update = |w: &mut f64, acc: &mut f64, g: f64| match cfg.optimizer {
            OptimizerKind::Sgd => *w -= lr * g,
            OptimizerKind::RmsProp => {
                *acc = cfg.rmsprop_decay * *acc + (1.0 - cfg.rmsprop_decay) * g * g;
                *w -= lr * g / (acc.sqrt() + cfg.rmsprop_epsilon);
            }
        };
        for c in 0..2 {
            for j in 0..m {
                update(&mut self.w[c][j], &mut self.acc_w[c][j], gw[c][j] / n);
            }
            update(&mut self.b[c], &mut self.acc_b[c], gb[c] / n);
        }
        (loss, correct)
    }
}

fn criterion_8(_: &Ctx) -> Outcome {
    let mut r = rng(8);
    let (d, h, w, m, n, batch) = (3usize, 4usize, 4usize, 6usize, 20usize, 5usize);
    let spec = ModelSpec::new(
        [d, h, w],
        vec![LayerSpec::conv(m, 1, 1, 0), LayerSpec::ReLU, LayerSpec::GlobalAvgPool, LayerSpec::dense(2), LayerSpec::Softmax],
    )
    .unwrap();
    let conv_w: Vec<f64> = (0..m * d).map(|_| normal(&mut r, 1.0)).collect();
    let conv_b: Vec<f64> = (0..m).map(|_| normal(&mut r, 0.1)).collect();
    let head_w: Vec<f64> = (0..2 * m).map(|_| normal(&mut r, 0.1)).collect();
    let head_b = vec![0.0, 0.0];
    let params = vec![
        LayerParams { weight: tensor(&[m, d, 1, 1], &conv_w), bias: tensor(&[m], &conv_b) },
        LayerParams { weight: tensor(&[2, m], &head_w), bias: tensor(&[2], &head_b) },
    ];
    let init = Model::<f64>::from_params(spec, params).unwrap();
    let mask = FreezeMask { trainable: vec![false, true] };

    // fixed features computed independently of the library
    let feature = |x: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|o| {
                (0..h * w)
                    .map(|p| (conv_b[o] + (0..d).map(|c| conv_w[o * d + c] * x[c * h * w + p]).sum::<f64>()).max(0.0))
                    .sum::<f64>()
                    / (h * w) as f64
            })
            .collect()
    };
    // labels from a hyperplane in feature space, keeping the pool's two
    // extremes so the classes are separated by a margin
    let dir: Vec<f64> = (0..m).map(|_| normal(&mut r, 1.0)).collect();
    let mut pool: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..10 * n)
        .map(|_| {
            let x: Vec<f64> = (0..d * h * w).map(|_| r.random::<f64>()).collect();
            let f = feature(&x);
            (f.iter().zip(&dir).map(|(a, b)| a * b).sum(), x, f)
        })
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut picked: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for i in 0..n / 2 {
        let lo = &pool[i];
        let hi = &pool[pool.len() - 1 - i];
        picked.push((lo.1.clone(), lo.2.clone(), 0));
        picked.push((hi.1.clone(), hi.2.clone(), 1));
    }
    let data: Vec<(ImageTensor, usize)> =
        picked.iter().map(|(x, _, y)| (ImageTensor::new(d, h, w, x.clone()), *y)).collect();
    let feats: Vec<Vec<f64>> = picked.iter().map(|p| p.1.clone()).collect();
    let labels: Vec<usize> = picked.iter().map(|p| p.2).collect();
    let oracle_data: Vec<(Vec<f64>, usize)> = feats.into_iter().zip(labels).collect();

    let mut notes = Vec::new();
    for (opt, lr) in [(OptimizerKind::Sgd, 2.0), (OptimizerKind::RmsProp, 0.05)] {
        let epochs = 200 / (n / batch);
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            optimizer: opt,
            learning_rate: lr,
            shuffle: false,
            ..TrainConfig::vgg_style()
        };
        let mut oracle = SoftmaxRegression {
            w: [head_w[..m].to_vec(), head_w[m..].to_vec()],
            b: [0.0, 0.0],
            acc_w: [vec![0.0; m], vec![0.0; m]],
            acc_b: [0.0; 2],
        };
        let mut oracle_hist = Vec::new();
        let mut checkpoints = Vec::new();
        for _ in 0..epochs {
            let (mut loss, mut correct) = (0.0, 0);
            for chunk in oracle_data.chunks(batch) {
                let (l, c) = oracle.step(chunk, &cfg);
                loss += l;
                correct += c;
            }
            oracle_hist.push((loss / n as f64, correct as f64 / n as f64));
            checkpoints.push((oracle.w.clone(), oracle.b));
        }
        let mut model = init.clone();
        let hist = train(&mut model, &data, &cfg, &mask).unwrap();
        check!(hist.len() == epochs, "{opt:?}: {} history entries", hist.len());
        for (e, (s, o)) in hist.iter().zip(&oracle_hist).enumerate() {
            check!(
                (s.loss - o.0).abs() <= 1e-8 && s.train_accuracy == o.1,
                "{opt:?} epoch {e}: loss {} vs {}, accuracy {} vs {}",
                s.loss,
                o.0,
                s.train_accuracy,
                o.1
            );
        }
        let mut worst = 0.0f64;
        for e in [1, 5, 10, 25, epochs] {
            let cfg_e = TrainConfig { epochs: e, ..cfg.clone() };
            let mut m_e = init.clone();
            train(&mut m_e, &data, &cfg_e, &mask).unwrap();
            let (ow, ob) = &checkpoints[e - 1];
            let p = &m_e.params()[1];
            let want: Vec<f64> = ow[0].iter().chain(&ow[1]).copied().collect();
            let err = p
                .weight
                .data()
                .iter()
                .zip(&want)
                .chain(p.bias.data().iter().zip(ob.iter()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err);
            check!(err <= 1e-8, "{opt:?}: head after {} steps differs by {err:e}", e * n / batch);
            check!(m_e.params()[0] == init.params()[0], "{opt:?}: frozen backbone moved");
        }
        let final_acc = hist.last().unwrap().train_accuracy;
        let first_perfect = hist.iter().position(|s| s.train_accuracy == 1.0);
        check!(
            first_perfect.is_some_and(|e| e < 50),
            "{opt:?}: separable set not fitted within 50 epochs (first perfect epoch {first_perfect:?})"
        );
        notes.push(format!(
            "{opt:?} max head deviation {worst:.1e}, accuracy 1.0 from epoch {}, final {final_acc}",
            first_perfect.unwrap()
        ));
    }
    Ok(format!("200 steps; {}", notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 9, 10, 13: end-to-end runs through the CLI
// ---------------------------------------------------------------------------

fn criterion_9(ctx: &Ctx) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 1..=3u64 {
        let dir = ctx.workspace(seed)?;
        let s = seed.to_string();
        let mut means = Vec::new();
        for regime in ["scratch", "head_only"] {
            let o = cli(&dir.join(format!("{regime}.json")), &["--seed", &s, "train-eval"]);
            ensure_ok(&o, &format!("train-eval {regime} seed {seed}"))?;
            means.push(read_report(&dir.join(format!("out/reports/train_eval_{regime}.json")))?.mean);
        }
        let (scratch, head) = (means[0], means[1]);
        lines.push(format!("seed {seed}: head-only {head:.3}, scratch {scratch:.3}"));
        if !(head >= 0.90 && head >= scratch) {
            failures.push(seed);
        }
    }
    check!(failures.is_empty(), "seeds {failures:?} failed: {}", lines.join("; "));
    Ok(lines.join("; "))
}

fn criterion_10(ctx: &Ctx) -> Outcome {
    let dir = ctx.workspace(1)?;
    let o = cli(&dir.join("head_only.json"), &["--seed", "1", "compare"]);
    ensure_ok(&o, "compare")?;
    let text = fs::read_to_string(dir.join("out/reports/compare.json")).map_err(|e| e.to_string())?;
    let table: ComparisonTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    check!(table.rows.len() == 10, "{} rows", table.rows.len());
    let strategies: HashSet<_> = table.rows.iter().map(|r| format!("{:?}", r.strategy)).collect();
    check!(
        strategies == HashSet::from(["Entropy".to_string(), "Random".to_string()]),
        "strategies {strategies:?}"
    );
    let mean_of = |s: SelectionStrategy| {
        let v: Vec<f64> = table.rows.iter().filter(|r| r.strategy == s).map(|r| r.mean).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (ent, rnd) = (mean_of(SelectionStrategy::Entropy), mean_of(SelectionStrategy::Random));
    check!((ent - table.mean_entropy).abs() < 1e-12 && (rnd - table.mean_random).abs() < 1e-12, "table means");
    check!(ent >= rnd, "mean(Entropy) {ent:.4} < mean(Random) {rnd:.4}");
    Ok(format!("mean(Entropy) {ent:.4}, mean(Random) {rnd:.4}, gap {:+.4}", ent - rnd))
}

fn without_timestamp(path: &Path) -> Result<String, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim_start().starts_with("\"generated_at\"")).collect::<Vec<_>>().join("\n"))
}

fn criterion_13(ctx: &Ctx) -> Outcome {
    let dir = ctx.workspace(1)?;
    let mut outputs = Vec::new();
    for run in ["det-a", "det-b"] {
        let out = dir.join(run);
        let o = cli(
            &dir.join("scratch.json"),
            &["--seed", "1", "--deterministic", "--output", out.to_str().unwrap(), "train-eval"],
        );
        ensure_ok(&o, run)?;
        let json = fs::read_to_string(out.join("reports/train_eval_scratch.json")).map_err(|e| e.to_string())?;
        check!(json.contains("\"generated_at\""), "{run}: no timestamp key");
        outputs.push((
            without_timestamp(&out.join("reports/train_eval_scratch.json"))?,
            fs::read(out.join("reports/train_eval_scratch.txt")).map_err(|e| e.to_string())?,
        ));
    }
    check!(outputs[0].0 == outputs[1].0, "JSON reports differ outside generated_at");
    check!(outputs[0].1 == outputs[1].1, "text reports differ");
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join("det-a/reports/train_eval_scratch.json")).unwrap())
        .map_err(|e| e.to_string())?;
    Ok(format!("identical reports, per-fold {:?}", report.per_fold))
}

// ---------------------------------------------------------------------------
// 11. arithmetic identities
// ---------------------------------------------------------------------------

fn criterion_11(_: &Ctx) -> Outcome {
    check!(PUBLISHED_SUBJECTS * PUBLISHED_SLICES_PER_SUBJECT == 6_400, "subjects x slices");
    check!(PUBLISHED_TOTAL_IMAGES == 6_400 && PUBLISHED_TOTAL_IMAGES * 8 % 10 == 0, "total images");
    check!(PUBLISHED_TOTAL_IMAGES * 8 / 10 == 5_120, "80% of total");
    check!(PUBLISHED_TRAINING_SIZES.iter().any(|r| r.training_size == Some(5_120)), "5120 reference row");
    let ids = training_size_identities();
    check!(ids.len() == 2 && ids.iter().all(|i| i.holds), "library identities {ids:?}");
    check!(ids[0].computed == 6_400 && ids[1].computed == 5_120, "computed {ids:?}");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = EvalReport {
        per_fold: vec![0.75, 1.0],
        mean: 0.875,
        stddev: sample_stddev(&[0.75, 1.0]),
        training_size: 10,
        training_sizes: vec![10, 10],
        total_examples: 20,
        config: ReportEcho { regime: Some(Regime::HeadOnly), ..ReportEcho::default() },
        generated_at: None,
    };
    let path = dir.path().join("run.json");
    fs::write(&path, serde_json::to_string(&report).unwrap()).unwrap();
    let o = bin().arg("--output").arg(dir.path().join("out")).arg("report").arg(&path).output().unwrap();
    ensure_ok(&o, "report")?;
    let stdout = String::from_utf8_lossy(&o.stdout);
    for line in ["identity 200 x 32 = 6400 (published 6400): ok", "identity 6400 x 0.8 = 5120 (published 5120): ok"] {
        check!(stdout.contains(line), "missing {line:?} in:\n{stdout}");
    }
    check!(
        stdout.lines().any(|l| l.contains("Inception V4 (transfer learning) [published reference]") && l.contains("96.25 (1.2)")),
        "reference accuracy row missing"
    );
    check!(
        stdout.lines().any(|l| l.contains("[published reference]") && l.contains("5120")),
        "reference training-size row missing"
    );
    Ok("200 x 32 = 6400 and 6400 x 0.8 = 5120 verified by library and report command".into())
}

// ---------------------------------------------------------------------------
// 12. format roundtrips
// ---------------------------------------------------------------------------

fn criterion_12(_: &Ctx) -> Outcome {
    let mut r = rng(12);
    for i in 0..100 {
        let dims = [r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=12)];
        let vox: Vec<f64> = (0..dims.iter().product())
            .map(|_| match r.random_range(0..3) {
                0 => f32::from_bits(r.random_range(0..0x7f80_0000u32)) as f64 * if r.random() { 1.0 } else { -1.0 },
                1 => r.random_range(-1000..1000) as f64,
                _ => normal(&mut r, 100.0) as f32 as f64,
            })
            .collect();
        let vol = Volume::new(dims, vox, "x").unwrap();
        let bytes = write_raw_volume(&vol);
        let back = parse_raw_volume(&bytes).unwrap();
        check!(back.dims() == dims, "volume {i}: dims");
        check!(
            back.voxels().iter().zip(vol.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "volume {i}: voxels differ"
        );
        let cut = r.random_range(0..bytes.len());
        let err = parse_raw_volume(&bytes[..cut]).unwrap_err();
        let expected = if cut < 6 { matches!(err, VolumeError::BadMagic) } else { matches!(err, VolumeError::TruncatedData { .. }) };
        check!(expected, "volume {i} cut at {cut}: {err:?}");
        let mut bad = bytes.clone();
        bad[r.random_range(0..6)] ^= 0x5a;
        check!(matches!(parse_raw_volume(&bad), Err(VolumeError::BadMagic)), "volume {i}: corrupt header accepted");
    }

    for i in 0..100u64 {
        let arch = if i % 2 == 0 { Architecture::MicroVgg } else { Architecture::MicroGap };
        let input = [r.random_range(1..=3), r.random_range(8..=20), r.random_range(8..=20)];
        let spec = arch.spec(input, 2).unwrap();
        let model = Model::<f32>::init_random(&spec, r.random());
        let meta = ContainerMeta { architecture_id: Some(arch.architecture_id(input, 2)), normalization: None };
        let bytes = WeightContainer::from_model(&model, meta).encode();
        let c = load_weights(&bytes).map_err(|e| format!("container {i}: {e}"))?;
        for (ord, p) in model.params().iter().enumerate() {
            for (bias, t) in [(false, &p.weight), (true, &p.bias)] {
                let stored = &c.tensors[&weight_name(&spec, ord, bias)];
                check!(stored.shape == t.shape(), "container {i}: shape");
                check!(
                    stored.values.iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "container {i}: values differ"
                );
            }
        }
        check!(c.encode() == bytes, "container {i}: re-encoding differs");

        // past the header every cut lands inside a length-prefixed field
        let header = 4 + 2 + 2 + u16::from_le_bytes([bytes[6], bytes[7]]) as usize + 4;
        let cut = r.random_range(header..bytes.len());
        check!(
            matches!(load_weights(&bytes[..cut]), Err(TransferError::TruncatedData { .. })),
            "container {i} cut at {cut}"
        );
        let mut bad = bytes.clone();
        bad[r.random_range(0..4)] ^= 0x20;
        check!(matches!(load_weights(&bad), Err(TransferError::BadMagic)), "container {i}: bad magic accepted");
        let mut bad = bytes.clone();
        bad[4] = 9;
        check!(matches!(load_weights(&bad), Err(TransferError::VersionUnsupported(_))), "container {i}: version");
        // a repeated first tensor record
        let first_len = {
            let name_len = u16::from_le_bytes([bytes[header], bytes[header + 1]]) as usize;
            let rank = bytes[header + 2 + name_len] as usize;
            let dims_at = header + 3 + name_len;
            let count: usize = (0..rank)
                .map(|d| u32::from_le_bytes(bytes[dims_at + 4 * d..dims_at + 4 * d + 4].try_into().unwrap()) as usize)
                .product();
            3 + name_len + 4 * rank + 4 * count
        };
        let mut dup = bytes.clone();
        let n = u32::from_le_bytes(bytes[header - 4..header].try_into().unwrap()) + 1;
        dup[header - 4..header].copy_from_slice(&n.to_le_bytes());
        dup.extend_from_slice(&bytes[header..header + first_len]);
        check!(matches!(load_weights(&dup), Err(TransferError::DuplicateName(_))), "container {i}: duplicate name");
    }
    Ok("100 RAWVOL and 100 NSWT roundtrips bit-exact; truncation and corruption classified".into())
}

// ---------------------------------------------------------------------------

type Criterion = fn(&Ctx) -> Outcome;

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion, Duration); 13] = [
        (1, "entropy oracle", criterion_1, Duration::from_secs(1)),
        (2, "ranking equivalence", criterion_2, Duration::from_secs(10)),
        (3, "layer oracles", criterion_3, Duration::from_secs(30)),
        (4, "gradient check", criterion_4, Duration::from_secs(120)),
        (5, "freeze invariant", criterion_5, Duration::from_secs(30)),
        (6, "optimizer contracts", criterion_6, Duration::from_secs(10)),
        (7, "cv partition", criterion_7, Duration::from_secs(5)),
        (8, "head-only softmax regression", criterion_8, Duration::from_secs(30)),
        (9, "transfer beats scratch", criterion_9, Duration::from_secs(600)),
        (10, "entropy beats random selection", criterion_10, Duration::from_secs(900)),
        (11, "arithmetic identities", criterion_11, Duration::from_secs(5)),
        (12, "format roundtrips", criterion_12, Duration::from_secs(5)),
        (13, "determinism", criterion_13, Duration::from_secs(1200)),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx { dirs: Mutex::new(HashMap::new()) };
    let mut failed = 0;
    for (n, name, f, budget) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&ctx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({:.1} s) {detail}", took.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({:.1} s) {e}", took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
