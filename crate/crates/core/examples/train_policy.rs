//! Return-conditioned policy training on labeled demonstrations, with a
//! checkpoint round trip.

use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::policy::{train_policy, PolicyConfig, PolicyKind, PolicyModel, TrainingData};
use mmrl::reward::{label_returns, RewardKind, RewardModel};
use mmrl::worldgrid::*;

fn main() -> anyhow::Result<()> {
    let task = TaskId::Corridor;
    let bundle = EncoderBundle::new(EncoderConfig::default(), 0)?;
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(task, Split::Train, 60, 1)?;
    let reward = RewardModel::new(&bundle, &cache, RewardKind::Text, &instruction_for(task, Split::Train))?;
    let labeled = label_returns(&demos, &reward, 1.0, None)?;

    let cfg = PolicyConfig {
        width: 32,
        blocks: 1,
        heads: 2,
        mlp_hidden: 64,
        epochs: 5,
        windows_per_trajectory: Some(8),
        ..PolicyConfig::for_task(PolicyKind::ArpDt, task)
    };
    let (model, report) = train_policy(&cfg, &bundle, &cache, &TrainingData::Labeled(&labeled))?;
    println!(
        "{} windows/epoch, loss {:.3} -> {:.3}",
        report.windows_per_epoch,
        report.initial_loss,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    println!("target return {:?}, norm constant {:?}", model.meta.target_return, model.meta.norm_constant);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("policy.bin");
    model.save(&path)?;
    let back = PolicyModel::load(&path)?;
    println!("checkpoint round trip keeps fingerprint: {}", back.fingerprint() == model.fingerprint());
    Ok(())
}
