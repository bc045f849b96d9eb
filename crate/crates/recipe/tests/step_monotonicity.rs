//! Seeded statistical checks that later recipe steps beat earlier ones at
//! an equal training budget. Mean over 5 seeds.

use tempora_core::data::Scheme;
use tempora_core::interface::InterfaceConfig;
use tempora_recipe::config::{FrameSampling, RecipeConfig};
use tempora_recipe::report::mean_sd;
use tempora_recipe::run::run;
use tempora_recipe::tasks::Suite;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn mean_accuracy(cfg: &RecipeConfig) -> f64 {
    let acc: Vec<f64> = SEEDS.iter().map(|&s| run(cfg, s).unwrap().report.accuracy).collect();
    println!("{}: {:?}", cfg.name, acc);
    mean_sd(&acc).0
}

#[test]
fn order_qa_step1_qformer_sa_beats_step0_linear() {
    let linear = RecipeConfig {
        name: "step0 linear".into(),
        ..RecipeConfig::default()
    };
    let sa = RecipeConfig {
        name: "step1 qformer_sa".into(),
        step: 1,
        interface: InterfaceConfig::qformer_sa(2).with_queries(8),
        ..RecipeConfig::default()
    };
    let (l, q) = (mean_accuracy(&linear), mean_accuracy(&sa));
    assert!(q > l, "step1 qformer_sa {q:.3} does not beat step0 linear {l:.3}");
}

#[test]
fn long_clip_recall_step3_beats_step2() {
    let mut step2 = RecipeConfig {
        name: "step2 random 16 frames".into(),
        step: 2,
        interface: InterfaceConfig::qformer_sa(2).with_queries(8),
        schemes: Scheme::ALL.to_vec(),
        ..RecipeConfig::default()
    };
    step2.data.suite = Suite::LongClips;
    step2.data.eval_clips = 200;
    step2.train.temporal_steps = 1000;
    step2.train.finetune_steps = 1000;
    let step3 = RecipeConfig {
        name: "step3 bank B=16".into(),
        step: 3,
        bank_capacity: Some(16),
        ..step2.clone()
    };
    step2.data.sampling = FrameSampling::Random { frames: 16 };
    let (two, three) = (mean_accuracy(&step2), mean_accuracy(&step3));
    assert!(three > two, "step3 {three:.3} does not beat step2 {two:.3}");
}
