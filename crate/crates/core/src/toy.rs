//! The desk-scale benchmark: a 64x64 synthetic day/night set, a pretrained
//! toy backbone, and the adaptation settings used for ablations and sweeps.

use serde::{Deserialize, Serialize};

use crate::data::{gen_two_domain_dataset, SceneSpec};
use crate::error::Result;
use crate::generator::{AdapterSpec, GeneratorConfig, GeneratorState};
use crate::objectives::LossWeights;
use crate::trainer::{pretrain_backbone, DomainImages, History, TrainConfig, UnpairedData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBenchmark {
    pub scenes: SceneSpec,
    pub scene_count: usize,
    pub held_out: usize,
    pub generator: GeneratorConfig,
    pub adapters: AdapterSpec,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
}

impl Default for ToyBenchmark {
    fn default() -> Self {
        ToyBenchmark {
            scenes: SceneSpec::default(),
            scene_count: 250,
            held_out: 50,
            generator: GeneratorConfig::default(),
            adapters: AdapterSpec::default(),
            pretrain: TrainConfig {
                steps: 2000,
                batch_size: 4,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                steps: 2000,
                batch_size: 4,
                lr: 3e-4,
                d_lr_mult: 30.0,
                eval_every: 500,
                weights: LossWeights {
                    lambda_gan: 1.0,
                    ..LossWeights::unpaired()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl ToyBenchmark {
    /// Unpaired day->night data with the last `held_out` scenes held out.
    pub fn data(&self) -> Result<UnpairedData> {
        let ds = gen_two_domain_dataset(self.scene_count, &self.scenes)?;
        let (train, test) = ds.split(self.held_out)?;
        Ok(UnpairedData {
            domain_x: self.scenes.domain_a.clone(),
            domain_y: self.scenes.domain_b.clone(),
            x: train.x,
            y: train.y,
            held_x: test.x,
            held_y: test.y,
        })
    }

    /// Pretrains the backbone on the training images of both domains.
    pub fn pretrain(&self, data: &UnpairedData) -> Result<(GeneratorState, History)> {
        let sets = [
            DomainImages {
                domain: data.domain_x.clone(),
                images: data.x.clone(),
            },
            DomainImages {
                domain: data.domain_y.clone(),
                images: data.y.clone(),
            },
        ];
        pretrain_backbone(self.generator.clone(), &sets, &self.pretrain)
    }
}
