//! Success-rate evaluation of a text-conditioned behaviour-cloning baseline
//! on training and held-out levels, next to the scripted expert.

use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::eval::{evaluate, evaluate_agent, ExpertAgent};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::policy::{train_policy, PolicyConfig, PolicyKind, TrainingData};
use mmrl::worldgrid::*;

fn main() -> anyhow::Result<()> {
    let task = TaskId::Corridor;
    let expert = evaluate_agent(&ExpertAgent, task, Split::Test, 50, 7, 0)?;
    println!("expert solves {}/50 test levels", expert.iter().filter(|o| o.success).count());

    let bundle = EncoderBundle::new(EncoderConfig::default(), 0)?;
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(task, Split::Train, 60, 1)?;
    let cfg = PolicyConfig {
        width: 32,
        blocks: 1,
        heads: 2,
        mlp_hidden: 64,
        epochs: 5,
        windows_per_trajectory: Some(8),
        ..PolicyConfig::for_task(PolicyKind::BcText, task)
    };
    let data = TrainingData::Demos {
        task,
        trajectories: &demos.records,
        instruction: instruction_for(task, Split::Train),
    };
    let (model, _) = train_policy(&cfg, &bundle, &cache, &data)?;
    for split in [Split::Train, Split::Test] {
        let instruction = instruction_for(task, split);
        let r = evaluate(&model, &bundle, &cache, task, split, 20, 7, 0, Some(&instruction))?;
        println!(
            "{split}: success {:.2}, expert-normalized {:.2} ({:?})",
            r.success_rate, r.expert_normalized_score, r.instruction
        );
    }
    Ok(())
}
