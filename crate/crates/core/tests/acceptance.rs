//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};

use scribble_cod::crnet::{Ablation, CrNet, CrNetConfig, Init, Lfe, ParamStore};
use scribble_cod::data::{synth_generate, Label, ScribbleMap};
use scribble_cod::metrics::{e_measure, mae, s_measure, weighted_fbeta};
use scribble_cod::objectives::{
    boundary_regions, channel_significance, context_affinity_loss, rcv_loss, select_significant_channels,
    semantic_significance_loss, LossConfig,
};
use scribble_cod::pipeline::{predict_image, DataSource, StepLog, Trainer};
use scribble_cod::views::{sample_view, OpSet, ViewConfig, ViewTransform};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Check {
    let results = common::gradient_suite();
    let worst = results.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    for (name, err) in &results {
        ensure(*err <= 1e-4, || format!("{name}: relative error {err:e}"))?;
    }
    Ok(format!("{} losses, worst {} at {:.1e}", results.len(), worst.0, worst.1))
}

fn reliability_bias() -> Check {
    let mut rng = common::rng(40);
    let a = common::random_map(&mut rng, 16, 16);
    // the hat map is the mirror image, so both arguments see gradients of
    // equal size before the bias
    let b = Array2::from_shape_fn((16, 16), |(y, x)| a[[y, 15 - x]]);
    let valid = Array2::from_elem((16, 16), true);
    let mut reference = None;
    let mut worst = 0.0f64;
    for gamma in [0.0, 0.3, 0.9] {
        let va = Var::from_tensor(&common::batch_tensor(std::slice::from_ref(&a), DType::F64)).unwrap();
        let vb = Var::from_tensor(&common::batch_tensor(std::slice::from_ref(&b), DType::F64)).unwrap();
        let loss = rcv_loss(va.as_tensor(), vb.as_tensor(), &valid, 0.85, gamma).map_err(|e| e.to_string())?;
        let value = common::scalar(&loss);
        match reference {
            None => reference = Some(value),
            Some(r) => ensure(value == r, || format!("value at gamma {gamma} is {value}, expected {r}"))?,
        }
        let grads = loss.backward().unwrap();
        let norm = |v: &Var| common::values(grads.get(v.as_tensor()).unwrap()).iter().map(|g| g * g).sum::<f64>().sqrt();
        let ratio = norm(&vb) / norm(&va);
        let want = (1.0 + gamma) / (1.0 - gamma);
        let err = (ratio - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-3, || format!("gamma {gamma}: gradient ratio {ratio}, expected {want}"))?;
    }
    Ok(format!("value {:.6} for all gamma, ratio error {worst:.1e}", reference.unwrap()))
}

fn oracle_equivalence() -> Check {
    let mut worst = 0.0f64;
    let mut track = |what: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("{what}: {got} vs oracle {want}"))
    };
    for seed in 0..6u64 {
        let mut rng = common::rng(100 + seed);
        let (h, w) = (16 + 3 * seed as usize, 32 - 2 * seed as usize);
        let b = 2;
        let preds: Vec<_> = (0..b).map(|_| common::random_map(&mut rng, h, w)).collect();
        let images: Vec<_> = (0..b).map(|_| common::random_image(&mut rng, h, w)).collect();
        let cfg = LossConfig {
            kernel_window: 3 + 2 * (seed as usize % 3),
            sigma_c: 0.3,
            block_size: 8,
            top_channels: 3,
            boundary_fraction: 0.2,
            ..Default::default()
        };
        let x = common::batch_tensor(&preds, DType::F64);
        let ca = common::scalar(&context_affinity_loss(&x, &images, &cfg).map_err(|e| e.to_string())?);
        track("context affinity", ca, common::context_affinity_oracle(&preds, &images, &cfg))?;

        let masks: Vec<_> = (0..b).map(|_| common::random_mask(&mut rng, h, w)).collect();
        let confident: Vec<_> = preds
            .iter()
            .zip(&masks)
            .map(|(p, m)| Array2::from_shape_fn((h, w), |(y, x)| if m[[y, x]] { 0.75 + 0.25 * p[[y, x]] } else { 0.25 * p[[y, x]] }))
            .collect();
        let features: Vec<Array3<f32>> = (0..b)
            .map(|_| Array3::from_shape_fn((6, h, w), |_| rand::Rng::random_range(&mut rng, -1.0f32..1.0)))
            .collect();
        let scribbles: Vec<_> = (0..b).map(|_| common::random_scribble(&mut rng, h, w, 0.05)).collect();
        let ss = semantic_significance_loss(&common::batch_tensor(&confident, DType::F64), &features, &scribbles, &cfg, 60)
            .map_err(|e| e.to_string())?;
        let want = common::semantic_oracle(&confident, &features, &scribbles, &cfg, 60);
        ensure(want > 0.0, || "semantic case selected no blocks".into())?;
        track("semantic significance", common::scalar(&ss), want)?;

        for (f, p) in features.iter().zip(&confident) {
            let sig = channel_significance(f.view(), p.view()).map_err(|e| e.to_string())?;
            let oracle = common::channel_significance_oracle(f, p);
            for (g, o) in sig.iter().zip(&oracle) {
                track("channel significance", *g, *o)?;
            }
            ensure(select_significant_channels(&sig, 3) == common::top_channels_oracle(&oracle, 3), || {
                "channel selection differs".into()
            })?;
        }

        for (p, m) in confident.iter().zip(&masks) {
            let (pv, mv) = (p.view(), m.view());
            track("MAE", mae(pv, mv).unwrap(), common::mae_oracle(p, m))?;
            track("S-measure", s_measure(pv, mv).unwrap(), common::s_measure_oracle(p, m))?;
            track("E-measure", e_measure(pv, mv).unwrap(), common::e_measure_oracle(p, m))?;
            track("weighted F", weighted_fbeta(pv, mv).unwrap(), common::weighted_f_oracle(p, m))?;
        }
    }
    Ok(format!("6 cases up to 32x32, worst abs error {worst:.1e}"))
}

fn blocks_of(pred: &Array2<f64>, scribble: &ScribbleMap, cfg: &LossConfig) -> Vec<(usize, usize)> {
    boundary_regions(pred.view(), scribble, cfg).iter().map(|b| (b.top, b.left)).collect()
}

/// Fills a 20×20 block of `map` in raster order with `(count, value)` runs.
fn fill_block(map: &mut Array2<f64>, top: usize, left: usize, runs: &[(usize, f64)]) {
    let mut values = runs.iter().flat_map(|&(n, v)| std::iter::repeat_n(v, n));
    for y in top..top + 20 {
        for x in left..left + 20 {
            map[[y, x]] = values.next().unwrap_or(0.5);
        }
    }
}

fn boundary_suite() -> Check {
    let cfg = LossConfig::default();
    let none = ScribbleMap::unlabeled(40, 40);
    let mut checked = 0;
    let mut expect = |name: &str, map: &Array2<f64>, scribble: &ScribbleMap, want: Vec<(usize, usize)>| {
        checked += 1;
        let got = blocks_of(map, scribble, &cfg);
        let oracle: Vec<(usize, usize)> = common::boundary_oracle(map, scribble, &cfg).iter().map(|b| (b.0, b.1)).collect();
        ensure(got == want && oracle == want, || format!("{name}: got {got:?}, oracle {oracle:?}, expected {want:?}"))
    };

    // 30% rule: exactly 120 of 400 pixels per class qualifies, 119 does not
    let mut map = Array2::from_elem((40, 40), 0.5);
    fill_block(&mut map, 0, 0, &[(120, 0.9), (120, 0.1)]);
    fill_block(&mut map, 0, 20, &[(119, 0.9), (281, 0.1)]);
    fill_block(&mut map, 20, 0, &[(281, 0.9), (119, 0.1)]);
    fill_block(&mut map, 20, 20, &[(200, 0.95), (200, 0.05)]);
    expect("30% rule", &map, &none, vec![(0, 0), (20, 20)])?;

    // 0.8 / 0.2 rule: the thresholds themselves are unclassified
    let mut map = Array2::from_elem((40, 40), 0.5);
    fill_block(&mut map, 0, 0, &[(200, 0.8), (200, 0.1)]);
    fill_block(&mut map, 0, 20, &[(200, 0.9), (200, 0.2)]);
    fill_block(&mut map, 20, 0, &[(200, 0.800001), (200, 0.199999)]);
    fill_block(&mut map, 20, 20, &[(200, 0.81), (200, 0.19)]);
    expect("0.8/0.2 rule", &map, &none, vec![(20, 0), (20, 20)])?;

    // no classified pixel anywhere
    let flat = Array2::from_elem((40, 40), 0.5);
    expect("degenerate", &flat, &none, vec![])?;
    let mid = Array2::from_shape_fn((40, 40), |(y, x)| 0.2 + 0.6 * ((y * 40 + x) as f64 + 0.5) / 1600.0);
    expect("degenerate ramp", &mid, &none, vec![])?;

    // scribbles classify pixels the prediction leaves uncertain
    let mut scribble = ScribbleMap::unlabeled(40, 40);
    for y in 0..20 {
        for x in 20..40 {
            scribble.set(y, x, if x < 30 { Label::Foreground } else { Label::Background });
        }
    }
    expect("scribble override", &flat, &scribble, vec![(0, 20)])?;
    Ok(format!("{checked} handcrafted 40x40 cases"))
}

fn network_contracts() -> Check {
    let dev = Device::Cpu;
    let net = CrNet::new(CrNetConfig::default(), DType::F32, &dev).map_err(|e| e.to_string())?;
    let mut runs = 0;
    for size in [64, 96, 320] {
        for b in [1, 2, 4] {
            let x = common::random_batch(size as u64 + b as u64, b, size, size, DType::F32);
            let out = net.forward(&x, false).map_err(|e| e.to_string())?;
            common::check_outputs(&out, b, size, size, 64).map_err(|e| format!("{size}px batch {b}: {e}"))?;
            runs += 1;
        }
    }
    let out = net.forward(&common::random_batch(9, 2, 64, 64, DType::F32), true).map_err(|e| e.to_string())?;
    common::check_outputs(&out, 2, 64, 64, 64).map_err(|e| format!("training mode: {e}"))?;

    // LFE: sigmoid gates can only shrink activations
    let mut store = ParamStore::new(DType::F64, dev.clone());
    let mut init = Init::new(&mut store, 1);
    let lfe = Lfe::new(&mut init, "lfe", 32).map_err(|e| e.to_string())?;
    drop(init);
    let x = Tensor::randn(0.0f64, 2.0, (2, 32, 20, 16), &dev).unwrap();
    let y = lfe.forward(&x, true).map_err(|e| e.to_string())?;
    for (a, b) in common::values(&y).iter().zip(common::values(&x)) {
        ensure(a.abs() <= b.abs() && a * b >= 0.0, || format!("LFE amplified {b} to {a}"))?;
    }

    for ablation in Ablation::ALL {
        let net = CrNet::new(CrNetConfig::default().with_ablation(ablation), DType::F32, &dev).map_err(|e| e.to_string())?;
        let out = net.forward(&common::random_batch(5, 1, 64, 64, DType::F32), true).map_err(|e| e.to_string())?;
        common::check_outputs(&out, 1, 64, 64, 64).map_err(|e| format!("{ablation:?}: {e}"))?;
    }
    Ok(format!("{runs} size/batch runs, LFE, {} ablations", Ablation::ALL.len()))
}

fn view_alignment() -> Check {
    let mut rng = common::rng(77);
    let mut worst = 0.0f64;
    let mut seen = [false; 16];
    for k in 0..100 {
        let bits = k % 16;
        let ops = OpSet {
            resize: bits & 1 != 0,
            flip: bits & 2 != 0,
            translate: bits & 4 != 0,
            crop: bits & 8 != 0,
        };
        let cfg = ViewConfig {
            ops,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            flip_prob: 0.5,
            max_translate_frac: 0.3,
            crop_area: (0.4, 0.95),
        };
        let h = 24 + (k * 7) % 25;
        let w = 24 + (k * 11) % 25;
        let t: ViewTransform = sample_view(&cfg, &mut rng, (h, w));
        let map = common::random_map(&mut rng, h, w);
        let (out, valid) = t.apply_to_map(&map.mapv(|v| v as f32)).map_err(|e| e.to_string())?;
        let (want, want_valid) = common::view_oracle(&t, &map.mapv(|v| v as f32 as f64));
        ensure(valid == want_valid, || format!("transform {k}: validity differs for {t:?}"))?;
        for ((o, e), v) in out.iter().zip(want.iter()).zip(valid.iter()) {
            if *v {
                worst = worst.max((*o as f64 - e).abs());
            }
        }
        ensure(worst <= 1e-6, || format!("transform {k}: error {worst:e} for {t:?}"))?;
        seen[bits] = true;
    }
    ensure(seen.iter().all(|&s| s), || "not every operation combination was drawn".into())?;
    Ok(format!("100 transforms, 16 combinations, worst {worst:.1e}"))
}

fn smoke_config() -> scribble_cod::pipeline::TrainConfig {
    let mut c = scribble_cod::pipeline::TrainConfig {
        input_size: 96,
        batch_size: 4,
        max_steps: Some(200),
        max_lr: 1e-2,
        ..Default::default()
    };
    c.net.depth = 18;
    c.net.width = 32;
    c.net.channels = 32;
    c
}

fn smoke_run() -> Result<(Vec<StepLog>, Trainer, Duration), String> {
    let samples = synth_generate(1, 10, 96).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(smoke_config(), DataSource::Memory(samples), &Device::Cpu).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let logs = t.run_steps(200).map_err(|e| e.to_string())?;
    Ok((logs, t, start.elapsed()))
}

fn smoke_training() -> Check {
    let (logs, trainer, elapsed) = smoke_run()?;
    ensure(logs.len() == 200, || format!("{} steps ran", logs.len()))?;
    let pce: Vec<f64> = logs.iter().map(|l| l.breakdown.pce).collect();
    let first = pce[..10].iter().sum::<f64>() / 10.0;
    let last = pce[190..].iter().sum::<f64>() / 10.0;
    ensure(last <= 0.5 * first, || format!("pce moving average {first:.4} -> {last:.4}"))?;

    let samples = synth_generate(1, 10, 96).map_err(|e| e.to_string())?;
    let (mut agree, mut labeled) = (0usize, 0usize);
    for s in &samples {
        let p = predict_image(trainer.net(), &s.image, 96).map_err(|e| e.to_string())?;
        for ((r, c), &v) in p.indexed_iter() {
            match s.scribble.get(r, c) {
                Label::Foreground => {
                    labeled += 1;
                    agree += usize::from(v > 0.5);
                }
                Label::Background => {
                    labeled += 1;
                    agree += usize::from(v <= 0.5);
                }
                Label::Unlabeled => {}
            }
        }
    }
    let agreement = agree as f64 / labeled as f64;
    ensure(agreement >= 0.9, || format!("agreement {agreement:.4}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {:.0}s", elapsed.as_secs_f64()))?;

    let (again, _, _) = smoke_run()?;
    let drift = logs
        .iter()
        .zip(&again)
        .map(|(a, b)| (a.breakdown.total - b.breakdown.total).abs().max((a.breakdown.pce - b.breakdown.pce).abs()))
        .fold(0.0f64, f64::max);
    ensure(drift <= 1e-6, || format!("re-run drifts by {drift:e}"))?;
    Ok(format!(
        "pce {first:.4} -> {last:.4}, agreement {:.1}%, {:.0}s per run, re-run drift {drift:.1e}",
        100.0 * agreement,
        elapsed.as_secs_f64()
    ))
}

fn schedule_conformance() -> Check {
    let mut config = common::tiny_train(64, 12);
    config.loss.iv_start_epoch = 2;
    config.loss.w_ss_ramp_epochs = 3;
    config.loss.w_ss_max = 0.3;
    config.epochs = 6;
    let samples = synth_generate(2, 4, 64).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(config.clone(), DataSource::Memory(samples), &Device::Cpu).map_err(|e| e.to_string())?;
    let logs = t.run_steps(12).map_err(|e| e.to_string())?;
    let mut active = 0;
    for l in &logs {
        let b = &l.breakdown;
        if l.epoch < 2 {
            ensure(b.iv == 0.0, || format!("iv {} at epoch {}", b.iv, l.epoch))?;
        } else if b.iv > 0.0 {
            active += 1;
        }
        let want = 0.3 * (l.epoch as f64 / 3.0).min(1.0);
        ensure(b.w_ss == want, || format!("w_ss {} at epoch {}, expected {want}", b.w_ss, l.epoch))?;
        if b.w_ss == 0.0 {
            ensure(b.ss == 0.0, || format!("ss {} with zero weight", b.ss))?;
        }
    }
    let epochs = logs.last().map(|l| l.epoch + 1).unwrap_or(0);
    ensure(active > 0, || "iv never became active".into())?;
    Ok(format!("{} steps over {epochs} epochs, iv active on {active}", logs.len()))
}

fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.safetensors");
    let config = common::tiny_train(64, 4);
    let data = synth_generate(6, 4, 64).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(config.clone(), DataSource::Memory(data.clone()), &Device::Cpu).map_err(|e| e.to_string())?;
    t.run_steps(3).map_err(|e| e.to_string())?;
    t.save(&path).map_err(|e| e.to_string())?;

    let batch = synth_generate(99, 2, 64).map_err(|e| e.to_string())?;
    let mut view = ViewTransform::identity(64, 64);
    view.resize_scale = 0.75;
    view.hflip = true;
    view.translate = (3, -2);
    let before = t.evaluate_batch(&batch, Some(&view), 3).map_err(|e| e.to_string())?;
    let restored = Trainer::resume(config, DataSource::Memory(data), &path, &Device::Cpu).map_err(|e| e.to_string())?;
    let after = restored.evaluate_batch(&batch, Some(&view), 3).map_err(|e| e.to_string())?;
    ensure(before == after, || format!("{before:?}\n!=\n{after:?}"))?;
    Ok(format!("total {:.6} reproduced bit for bit", before.total))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient suite", gradient_suite),
        ("reliability bias", reliability_bias),
        ("oracle equivalence", oracle_equivalence),
        ("boundary regions", boundary_suite),
        ("network contracts", network_contracts),
        ("view alignment", view_alignment),
        ("smoke training", smoke_training),
        ("schedule conformance", schedule_conformance),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let limits = [60, 0, 120, 0, 120, 0, 0, 0, 0];
    let mut failed = 0;
    for ((name, check), limit) in criteria.into_iter().zip(limits) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(detail) if limit > 0 && secs > limit as f64 => Err(format!("{detail}; over the {limit}s budget")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
