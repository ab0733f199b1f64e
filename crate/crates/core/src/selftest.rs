//! Built-in verification suite behind `volformer selftest`.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{Dataset, LrCache};
use crate::degrade::{degrade, fft3d, ifft3d, truncate_kspace};
use crate::error::{TensorError, TrainError};
use crate::gradcheck::{check_model, op_suite_errors};
use crate::metrics::{psnr, Psnr};
use crate::oracle::{window_attention_reference, AttnWeights};
use crate::swin3d::model::{windowed_attention, AttnContext, AttnParams};
use crate::swin3d::{window_partition, window_reverse, ModelConfig, ParamStore, RelativePositionIndex};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, TrainConfig, Trainer};
use crate::volume::{load_volume, save_volume, synth_phantom, Volume};

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Also run the overfit check.
    pub full: bool,
    /// Swap two entries of every relative position index used by the suite,
    /// to prove the checks catch a broken bias lookup.
    pub corrupt_bias_index: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn index_for(m: usize, opts: &SelftestOptions) -> RelativePositionIndex {
    let mut idx = RelativePositionIndex::new(m);
    if opts.corrupt_bias_index {
        idx.corrupt(0, 1);
    }
    idx
}

/// Max abs difference between the shifted-window fast path and the
/// physical-partition oracle over both layer kinds.
pub fn swmsa_oracle_error(grid: [usize; 3], m: usize, seed: u64, index: RelativePositionIndex) -> Result<f64, TensorError> {
    let (c, heads) = (8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (2 * m - 1).pow(3);
    let mut store = ParamStore::<f32>::new();
    store.insert("a.qkv.weight", Tensor::randn(&[c, 3 * c], 0.5, &mut rng));
    store.insert("a.qkv.bias", Tensor::randn(&[3 * c], 0.1, &mut rng));
    store.insert("a.rel_bias", Tensor::randn(&[rows, heads], 0.5, &mut rng));
    store.insert("a.proj.weight", Tensor::randn(&[c, c], 0.5, &mut rng));
    store.insert("a.proj.bias", Tensor::randn(&[c], 0.1, &mut rng));
    let n: usize = grid.iter().product();
    let x = Tensor::<f32>::randn(&[n, c], 1.0, &mut rng);
    let mut ctx = AttnContext::new(grid, m, heads)?;
    ctx.rel_index = index;
    let w = AttnWeights {
        qkv_w: store.get("a.qkv.weight").expect("inserted"),
        qkv_b: store.get("a.qkv.bias").expect("inserted"),
        rel_bias: store.get("a.rel_bias").expect("inserted"),
        proj_w: store.get("a.proj.weight").expect("inserted"),
        proj_b: store.get("a.proj.bias").expect("inserted"),
    };
    let mut worst = 0.0f64;
    for shifted in [false, true] {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = windowed_attention(&mut tape, xv, &AttnParams::from_bound(&bound, "a"), &ctx, shifted)?;
        let fast = tape.value(y).cast::<f64>();
        let slow = window_attention_reference(&x, &w, grid, m, if shifted { m / 2 } else { 0 }, heads);
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    Ok(worst)
}

/// `(distinct indices == (2M−1)³, every equal-delta pair shares an index)`.
pub fn relative_index_holds(idx: &RelativePositionIndex) -> (bool, bool) {
    let m = idx.window();
    let n = idx.tokens();
    let distinct: std::collections::HashSet<_> = idx.as_slice().iter().collect();
    let coord = |t: usize| [(t / (m * m)) as i64, ((t / m) % m) as i64, (t % m) as i64];
    let mut by_delta: HashMap<[i64; 3], usize> = HashMap::new();
    let mut consistent = true;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (coord(i), coord(j));
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            consistent &= *by_delta.entry(d).or_insert(idx.get(i, j)) == idx.get(i, j);
        }
    }
    (distinct.len() == idx.table_rows(), consistent)
}

/// Outcome of training a model to overfit one phantom.
#[derive(Clone, Debug)]
pub struct OverfitOutcome {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub model_psnr: Psnr,
    pub baseline_psnr: Psnr,
    pub seconds: f64,
}

impl OverfitOutcome {
    /// Model PSNR minus baseline PSNR, when both are finite.
    pub fn gain_db(&self) -> Option<f64> {
        Some(self.model_psnr.finite()? - self.baseline_psnr.finite()?)
    }
}

/// Trains `model` on a single normalized phantom of edge `size` and
/// compares against the trilinear reconstruction of the degraded input.
pub fn overfit_phantom(model: ModelConfig, train: TrainConfig, size: usize, seed: u64) -> Result<OverfitOutcome, TrainError> {
    let started = Instant::now();
    let vol = synth_phantom(seed, [size; 3])?;
    let data = Dataset::from_volumes(vec![vol], train.factors, &mut LrCache::default())?;
    let mut trainer = Trainer::new(model, train)?;
    let mut losses = Vec::new();
    while trainer.step < trainer.config.iterations {
        losses.push(trainer.train_step(&data)?);
    }
    let pair = &data.pairs[0];
    let sr = trainer
        .model
        .predict(&pair.lr.data)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let metric = |x: &Tensor<f32>| psnr(x, &pair.hr.data, 1.0).map_err(|e| TrainError::Data(e.to_string()));
    Ok(OverfitOutcome {
        steps: trainer.step,
        losses,
        model_psnr: metric(&sr)?,
        baseline_psnr: metric(&pair.lr.data)?,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Model and training settings of the overfit check.
pub fn overfit_setup() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig::toy();
    let train = TrainConfig {
        lr: 2e-3,
        batch: 4,
        iterations: 2000,
        crop: 16,
        checkpoint_interval: 0,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    (model, train)
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String), String>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn roundtrips() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f32>::randn(&[8, 8, 4, 3], 1.0, &mut rng);
    let e = |e: TensorError| e.to_string();
    let part = window_reverse(&window_partition(&x, 4).map_err(e)?, [8, 8, 4], 4).map_err(e)? == x;
    let roll = x.roll3d([3, -2, 1]).map_err(e)?.roll3d([-3, 2, -1]).map_err(e)? == x;
    let perm = x.permute(&[2, 0, 3, 1]).map_err(e)?.permute(&[1, 3, 0, 2]).map_err(e)?.reshape(&[8, 8, 4, 3]).map_err(e)? == x;

    let dir = std::env::temp_dir().join(format!("volformer-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.vol");
    let v = synth_phantom(3, [16, 16, 16]).map_err(|e| e.to_string())?;
    save_volume(&v, &path).map_err(|e| e.to_string())?;
    let vol = load_volume(&path).map_err(|e| e.to_string())? == v;
    let _ = std::fs::remove_dir_all(&dir);

    let trainer = Trainer::new(
        ModelConfig::toy(),
        TrainConfig {
            crop: 8,
            ..TrainConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let bytes = trainer.checkpoint().to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?.to_bytes() == bytes;
    Ok((
        part && roll && perm && vol && ckpt,
        format!("partition={part} roll={roll} permute={perm} volume={vol} checkpoint={ckpt}"),
    ))
}

fn fft_properties() -> Result<(bool, String), String> {
    let e = |e: crate::degrade::DegradeError| e.to_string();
    let v = synth_phantom(5, [16, 16, 16]).map_err(|e| e.to_string())?;
    let k = fft3d(&v);
    let spatial: f64 = v.voxels().iter().map(|&x| x as f64 * x as f64).sum();
    let parseval = (k.energy() / k.len() as f64 - spatial).abs() / spatial;
    let back = ifft3d(&k).real_part().map_err(e)?;
    let inverse = back
        .iter()
        .zip(v.voxels())
        .fold(0.0f64, |m, (a, &b)| m.max((a - b as f64).abs()));
    let c = Volume::from_raw([16, 16, 16], vec![0.4; 4096], "c").map_err(|e| e.to_string())?;
    let fixed = degrade(&c, [2, 2, 1])
        .map_err(e)?
        .voxels()
        .iter()
        .fold(0.0f64, |m, &x| m.max((x as f64 - 0.4).abs()));
    let t = truncate_kspace(&fft3d(&c), [2, 2, 1]).map_err(e)?;
    let ok = parseval < 1e-4 && inverse < 1e-5 && fixed < 1e-6 && t.dims == [8, 8, 16];
    Ok((
        ok,
        format!("parseval_rel={parseval:.2e} inverse_max={inverse:.2e} constant_max={fixed:.2e}"),
    ))
}

/// Runs every check, reporting each result through `report` as it finishes.
pub fn run_selftest(opts: SelftestOptions, mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut record = |r: CheckResult| {
        report(&r);
        results.push(r);
    };
    record(check("gradient_ops", || {
        let errs = op_suite_errors(1).map_err(|e| e.to_string())?;
        let worst = errs.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
        Ok((worst < 1e-4, format!("max_rel_error={worst:.2e} over {} ops", errs.len())))
    }));
    record(check("gradient_model", || {
        let errs = check_model(&ModelConfig::toy(), [8, 8, 8], 1, 2).map_err(|e| e.to_string())?;
        let worst = errs.iter().fold(0.0f64, |m, p| m.max(p.rel_error));
        Ok((worst < 1e-3, format!("max_rel_error={worst:.2e} over {} tensors", errs.len())))
    }));
    record(check("relative_index", || {
        let mut ok = true;
        for m in 2..=4 {
            let (count, delta) = relative_index_holds(&index_for(m, &opts));
            ok &= count && delta;
        }
        Ok((ok, "M in 2..=4".into()))
    }));
    record(check("swmsa_oracle", || {
        let mut worst = 0.0f64;
        for grid in [[8, 8, 8], [16, 8, 8]] {
            let err = swmsa_oracle_error(grid, 4, 7, index_for(4, &opts)).map_err(|e| e.to_string())?;
            worst = worst.max(err);
        }
        Ok((worst < 1e-5, format!("max_abs_diff={worst:.2e}")))
    }));
    record(check("roundtrips", roundtrips));
    record(check("fft", fft_properties));
    if opts.full {
        record(check("overfit", || {
            let (model, train) = overfit_setup();
            let o = overfit_phantom(model, train, 32, 0).map_err(|e| e.to_string())?;
            let gain = o.gain_db().unwrap_or(f64::NAN);
            Ok((
                gain >= 1.0,
                format!(
                    "model_psnr={} baseline_psnr={} gain_db={gain:.3} steps={} seconds={:.0}",
                    o.model_psnr, o.baseline_psnr, o.steps, o.seconds
                ),
            ))
        }));
    }
    results
}
