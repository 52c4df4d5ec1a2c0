//! Reward labeling: score every demonstration frame against the instruction,
//! turn rewards into normalized returns and pick the rollout target.

use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::reward::{label_returns, target_return, RewardKind, RewardModel};
use mmrl::worldgrid::*;

fn main() -> anyhow::Result<()> {
    let bundle = EncoderBundle::new(EncoderConfig::default(), 0)?;
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(TaskId::MazeI, Split::Train, 40, 1)?;
    let instruction = instruction_for(TaskId::MazeI, Split::Train);
    for kind in [RewardKind::Text, RewardKind::GoalImage] {
        let model = RewardModel::new(&bundle, &cache, kind, &instruction)?;
        let labeled = label_returns(&demos, &model, 1.0, None)?;
        let first = &labeled.records[0];
        println!(
            "{kind:?}: norm constant {}, target return {:.4}, first episode returns {:.3} -> {:.3}",
            labeled.meta.norm_constant,
            target_return(&labeled.stats(), 0.9)?,
            first.returns[0],
            first.returns[first.returns.len() - 1],
        );
    }
    Ok(())
}
