//! Per-step reward curves along expert demonstrations, written as CSV, with
//! the rank correlation between time and reward for each curve.

use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::eval::{export_reward_curves, median_time_reward_spearman};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::worldgrid::*;

fn main() -> anyhow::Result<()> {
    let bundle = EncoderBundle::new(EncoderConfig::default(), 0)?;
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(TaskId::MazeII, Split::Test, 10, 3)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("curves.csv");
    let curves = export_reward_curves(&bundle, &cache, &demos.records, &instruction_for(TaskId::MazeII, Split::Train), &path)?;
    let (median, rhos, skipped) = median_time_reward_spearman(&curves)?;
    println!("{} curves written to {}", curves.len(), path.display());
    println!("per-curve rank correlation {rhos:.2?}, median {median:.3}, skipped {skipped}");
    print!("{}", std::fs::read_to_string(&path)?.lines().take(4).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
