//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Runs the full desk-scale benchmark (tens of minutes
//! on one CPU core).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use turbo_i2i::checkpoint::{digest, save_generator};
use turbo_i2i::data::EdgeConfig;
use turbo_i2i::generator::{AdapterSpec, BranchKind, GeneratorState};
use turbo_i2i::objectives::LossWeights;
use turbo_i2i::perceptual::{frechet_distance, lpips_like, FeatureNet, FeatureStats};
use turbo_i2i::toy::ToyBenchmark;
use turbo_i2i::trainer::{
    finetune_diversity, run_variant, DomainImages, Metrics, PairedData, Trained, UnpairedData,
    Variant,
};
use turbo_i2i::types::{LatentMap, TensorImage};

type Outcome = std::result::Result<String, String>;

struct Gate {
    failures: Vec<&'static str>,
}

impl Gate {
    fn check(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                println!("FAIL  {name}: {msg} [{secs:.1}s]");
                self.failures.push(name);
            }
        }
    }
}

fn verdict(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn final_metrics(t: &Trained) -> Result<&Metrics, String> {
    t.history
        .final_metrics()
        .ok_or_else(|| "no metrics recorded".to_string())
}

fn first_metrics(t: &Trained) -> Result<&Metrics, String> {
    t.history
        .first_metrics()
        .ok_or_else(|| "no metrics recorded".to_string())
}

fn max_abs_diff(a: &TensorImage, b: &TensorImage) -> f64 {
    a.tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn mean_pairwise_lpips(net: &FeatureNet, imgs: &[TensorImage]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..imgs.len() {
        for j in i + 1..imgs.len() {
            s += lpips_like(net, &imgs[i], &imgs[j]).unwrap();
            n += 1;
        }
    }
    s / n as f64
}

fn bare(backbone: &GeneratorState) -> GeneratorState {
    let mut s = backbone.clone();
    s.adapters = Default::default();
    s.adapter_spec = None;
    s
}

fn zero_delta_identity(backbone: &GeneratorState, data: &UnpairedData) -> Outcome {
    let plain = bare(backbone);
    let specs = [
        AdapterSpec::default(),
        AdapterSpec {
            skips: false,
            ..AdapterSpec::default()
        },
        AdapterSpec {
            skips: false,
            branch: Some(BranchKind::Controlnet),
            ..AdapterSpec::default()
        },
        AdapterSpec {
            skips: false,
            branch: Some(BranchKind::Lightweight),
            ..AdapterSpec::default()
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for probe in 0..10 {
        let spec = specs[probe % specs.len()].clone();
        let mut adapted = plain.clone();
        adapted.attach_adapters(spec.clone()).map_err(e2s)?;
        let x = &data.held_x[rng.gen_range(0..data.held_x.len())];
        let z = LatentMap::seeded_noise(x.height(), x.width(), rng.gen());
        let gamma = match probe {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..=1.0),
        };
        let target = if probe % 2 == 0 { "night" } else { "day" };
        let got = adapted.translate(x, &z, gamma, target).map_err(e2s)?;
        let want = if spec.branch.is_some() {
            plain.backbone_sample(&z, target)
        } else {
            plain.translate(x, &z, gamma, target)
        }
        .map_err(e2s)?;
        worst = worst.max(max_abs_diff(&got, &want));
    }
    verdict(
        worst < 1e-6,
        format!("max |adapted - backbone| = {worst:.3e} over 10 probes (< 1e-6)"),
    )
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = common::grad_suite::all();
    let secs = t.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    let mut ok = secs < 300.0;
    for (name, r) in &reports {
        ok &= r.probes.len() >= common::grad_suite::PROBES && r.passes(common::grad_suite::TOL);
        parts.push(format!("{name} {:.1e}", r.max_rel_err()));
    }
    verdict(
        ok,
        format!(
            "max rel err [{}] (< 1e-3), runtime {secs:.1}s (< 300s)",
            parts.join(", ")
        ),
    )
}

fn fid_oracles() -> Outcome {
    let st = |mean: Vec<f64>, cov: Vec<f64>| FeatureStats {
        mean,
        cov,
        count: 2,
    };
    let a = st(vec![0.3, -0.2], vec![2.0, 0.5, 0.5, 1.0]);
    let cases = [
        ("a = b", frechet_distance(&a, &a.clone()).map_err(e2s)?, 0.0),
        (
            "mean shift, I",
            frechet_distance(
                &st(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
                &st(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
            )
            .map_err(e2s)?,
            1.0,
        ),
        (
            "var 1 vs 4",
            frechet_distance(&st(vec![0.0], vec![1.0]), &st(vec![0.0], vec![4.0])).map_err(e2s)?,
            1.0,
        ),
    ];
    let worst = cases
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let detail: Vec<String> = cases
        .iter()
        .map(|(n, g, w)| format!("{n}: {g:.9} vs {w}"))
        .collect();
    verdict(worst < 1e-6, format!("{} (tol 1e-6)", detail.join("; ")))
}

fn per_pixel_std(outs: &[TensorImage]) -> f64 {
    let n = outs.len() as f64;
    let len = outs[0].tensor().numel();
    let mut total = 0.0;
    for i in 0..len {
        let vals: Vec<f64> = outs.iter().map(|o| o.tensor().data()[i]).collect();
        let m = vals.iter().sum::<f64>() / n;
        total += (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    }
    total / len as f64
}

fn gamma_determinism(full: &Trained, div: &Trained, x: &TensorImage) -> Outcome {
    let zs: Vec<LatentMap> = (0..8)
        .map(|i| LatentMap::seeded_noise(x.height(), x.width(), 500 + i))
        .collect();
    let mut invariant = true;
    for model in [&full.state, &div.state] {
        let outs: Vec<TensorImage> = zs
            .iter()
            .map(|z| model.translate(x, z, 1.0, "night").unwrap())
            .collect();
        invariant &= outs
            .iter()
            .all(|o| o.tensor().data() == outs[0].tensor().data());
    }
    let outs: Vec<TensorImage> = zs
        .iter()
        .map(|z| div.state.translate(x, z, 0.5, "night").unwrap())
        .collect();
    let std = per_pixel_std(&outs);
    verdict(
        invariant && std > 0.0,
        format!("gamma=1 bitwise invariant over 8 z: {invariant}; gamma=0.5 mean per-pixel std {std:.4e} (> 0)"),
    )
}

fn main() {
    let started = Instant::now();
    let mut gate = Gate {
        failures: Vec::new(),
    };
    let bench = ToyBenchmark::default();
    let data = bench.data().expect("benchmark data");
    let tmp = tempfile::tempdir().expect("tempdir");

    println!(
        "acceptance: pretraining toy backbone ({} steps)",
        bench.pretrain.steps
    );
    let backbone = bench.pretrain(&data).map(|(s, _)| s);

    gate.check("zero-delta identity", || {
        zero_delta_identity(backbone.as_ref().map_err(e2s)?, &data)
    });
    gate.check("gradient suite", gradient_suite);
    gate.check("closed-form FID oracles", fid_oracles);

    let cfg = &bench.adapt;
    let run = |v: Variant, d: &UnpairedData| -> Result<Trained, String> {
        let t = Instant::now();
        let bb = backbone.as_ref().map_err(e2s)?;
        let r = run_variant(v, bb, &bench.adapters, d, cfg).map_err(e2s);
        if let Ok(tr) = &r {
            let m = tr.history.final_metrics().unwrap();
            println!(
                "  trained {v} on {} images in {:.0}s: fid {:.4} dino {:.3} psnr {:.2}",
                d.x.len(),
                t.elapsed().as_secs_f64(),
                m.fid,
                m.dino_struct,
                m.psnr
            );
        }
        r
    };
    let full = run(Variant::Full, &data);
    let b = run(Variant::B, &data);
    let d = run(Variant::D, &data);
    let a = run(Variant::A, &data);

    gate.check("desk-scale unpaired training", || {
        let full = full.as_ref().map_err(Clone::clone)?;
        let b = b.as_ref().map_err(Clone::clone)?;
        let (f0, f1) = (first_metrics(full)?.fid, final_metrics(full)?.fid);
        let (sf, sb) = (
            final_metrics(full)?.dino_struct,
            final_metrics(b)?.dino_struct,
        );
        verdict(
            f1 <= 0.5 * f0 && sf < sb,
            format!("FULL FID {f0:.3} -> {f1:.4} (<= 50%); DINO-Struct FULL {sf:.3} < B {sb:.3}"),
        )
    });
    gate.check("skip-connection effect", || {
        let f = final_metrics(full.as_ref().map_err(Clone::clone)?)?;
        let dm = final_metrics(d.as_ref().map_err(Clone::clone)?)?;
        verdict(
            f.dino_struct < dm.dino_struct && f.psnr >= dm.psnr + 3.0,
            format!(
                "DINO-Struct FULL {:.3} < D {:.3}; recon PSNR FULL {:.2} dB vs D {:.2} dB (gain {:+.2} >= 3)",
                f.dino_struct,
                dm.dino_struct,
                f.psnr,
                dm.psnr,
                f.psnr - dm.psnr
            ),
        )
    });
    gate.check("pretraining effect", || {
        let f = final_metrics(full.as_ref().map_err(Clone::clone)?)?.fid;
        let fa = final_metrics(a.as_ref().map_err(Clone::clone)?)?.fid;
        verdict(
            fa >= 1.5 * f,
            format!("FID A {fa:.4} vs FULL {f:.4} (ratio {:.2} >= 1.5)", fa / f),
        )
    });
    gate.check("conflict reproduction", || {
        let bb = backbone.as_ref().map_err(e2s)?;
        let b = b.as_ref().map_err(Clone::clone)?;
        let net = FeatureNet::new(cfg.metric_seed);
        let size = data.held_x[0].height();
        let zs: Vec<LatentMap> = (0..8)
            .map(|i| LatentMap::seeded_noise(size, size, 700 + i))
            .collect();
        let base: Vec<TensorImage> = zs
            .iter()
            .map(|z| bb.backbone_sample(z, "night").unwrap())
            .collect();
        let x = &data.held_x[0];
        let outs: Vec<TensorImage> = zs
            .iter()
            .map(|z| b.state.translate(x, z, 1.0, "night").unwrap())
            .collect();
        let (sb, s0) = (
            mean_pairwise_lpips(&net, &outs),
            mean_pairwise_lpips(&net, &base),
        );
        verdict(
            sb < 0.25 * s0,
            format!(
                "B z-sensitivity {sb:.5} vs backbone {s0:.5} ({:.1}% < 25%)",
                100.0 * sb / s0
            ),
        )
    });

    let full_n = data.x.len().min(data.y.len());
    let small = data
        .subset(10, cfg.seed)
        .map_err(e2s)
        .and_then(|s| run(Variant::Full, &s));
    let again = data
        .subset(full_n, cfg.seed)
        .map_err(e2s)
        .and_then(|s| run(Variant::Full, &s));

    gate.check("dataset-size sweep", || {
        let f10 = final_metrics(small.as_ref().map_err(Clone::clone)?)?.fid;
        let ff = final_metrics(again.as_ref().map_err(Clone::clone)?)?.fid;
        verdict(
            f10 >= ff,
            format!("FID(n=10) {f10:.4} >= FID(n={full_n}) {ff:.4}"),
        )
    });
    gate.check("determinism", || {
        let save = |t: &Trained, name: &str| -> Result<String, String> {
            let p = tmp.path().join(name);
            save_generator(&t.state, Some(&t.aux), &p, Some("full")).map_err(e2s)?;
            digest(&p).map_err(e2s)
        };
        let d1 = save(full.as_ref().map_err(Clone::clone)?, "run1")?;
        let d2 = save(again.as_ref().map_err(Clone::clone)?, "run2")?;
        verdict(
            d1 == d2,
            format!("checkpoint sha256 {}.. vs {}..", &d1[..16], &d2[..16]),
        )
    });

    gate.check("gamma determinism", || {
        let full = full.as_ref().map_err(Clone::clone)?;
        let night = DomainImages {
            domain: data.domain_y.clone(),
            images: data.y.iter().chain(&data.held_y).cloned().collect(),
        };
        let paired = PairedData::from_edges(&night, &EdgeConfig::default(), 10, 0).map_err(e2s)?;
        let dcfg = turbo_i2i::trainer::TrainConfig {
            steps: 100,
            eval_every: 0,
            weights: LossWeights::paired(),
            ..cfg.clone()
        };
        let div = finetune_diversity(full.state.clone(), &paired, &dcfg).map_err(e2s)?;
        gamma_determinism(full, &div, &paired.held_inputs[0])
    });

    println!(
        "acceptance: {} failed, total {:.0}s",
        gate.failures.len(),
        started.elapsed().as_secs_f64()
    );
    if !gate.failures.is_empty() {
        println!("failed: {}", gate.failures.join(", "));
        std::process::exit(1);
    }
}
