//! Edge map -> night photo, trained with reconstruction, adversarial, and
//! embedding-alignment losses, then finetuned for noise-controlled diversity.

use turbo_i2i::data::EdgeConfig;
use turbo_i2i::generator::AdapterSpec;
use turbo_i2i::objectives::LossWeights;
use turbo_i2i::toy::ToyBenchmark;
use turbo_i2i::trainer::{finetune_diversity, train_paired, DomainImages, PairedData, TrainConfig};
use turbo_i2i::types::LatentMap;

fn main() -> turbo_i2i::Result<()> {
    let mut bench = ToyBenchmark::default();
    bench.pretrain.steps = 600;
    let data = bench.data()?;
    let (mut state, _) = bench.pretrain(&data)?;
    state.attach_adapters(AdapterSpec::default())?;

    let night = DomainImages {
        domain: "night".into(),
        images: data.y.clone(),
    };
    let pairs = PairedData::from_edges(&night, &EdgeConfig::default(), 20, 0)?;
    let cfg = TrainConfig {
        steps: 150,
        eval_every: 50,
        weights: LossWeights::paired(),
        ..bench.adapt.clone()
    };
    let paired = train_paired(state, &pairs, &cfg)?;
    for (s, m) in paired.history.metrics() {
        println!(
            "paired step {s:>4}: fid {:.4} psnr vs target {:.2} dB",
            m.fid, m.psnr
        );
    }

    let div = finetune_diversity(paired.state, &pairs, &TrainConfig { steps: 100, ..cfg })?;
    let gammas: Vec<f64> = div.history.records.iter().filter_map(|r| r.gamma).collect();
    println!("sampled gammas (first 10): {:?}", &gammas[..10]);

    let edge = &pairs.held_inputs[0];
    for gamma in [1.0, 0.5] {
        let outs: Vec<_> = (0..4)
            .map(|s| {
                div.state
                    .translate(edge, &LatentMap::seeded_noise(64, 64, s), gamma, "night")
            })
            .collect::<turbo_i2i::Result<_>>()?;
        let spread = outs[1..]
            .iter()
            .map(|o| {
                o.tensor()
                    .data()
                    .iter()
                    .zip(outs[0].tensor().data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        println!("gamma {gamma}: max pixel spread over 4 noise maps {spread:.4}");
    }
    Ok(())
}
