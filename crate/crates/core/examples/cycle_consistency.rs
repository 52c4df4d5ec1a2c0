//! Cycle consistency of hidden-state sequences: the nearest-neighbour
//! measure on hand-made sequences, then the three pair types for a policy.

use mmrl::config::RunConfig;
use mmrl::eval::{cycle_consistency, cycle_suite};
use mmrl::pipeline::Workspace;
use mmrl::worldgrid::TaskId;

fn main() -> anyhow::Result<()> {
    let a = vec![vec![0.0], vec![1.0], vec![2.0]];
    let b = vec![vec![2.0], vec![2.0], vec![2.0]];
    println!("identical sequences: {:.2}%", cycle_consistency(&a, &a)?);
    println!("collapsed partner:   {:.2}%", cycle_consistency(&a, &b)?);

    let mut cfg = RunConfig::for_task(TaskId::Corridor);
    cfg.encoder.pretrained = false;
    cfg.finetune.epochs = 2;
    cfg.demos.n = 40;
    cfg.policy.epochs = 3;
    cfg.policy.windows_per_trajectory = Some(8);
    let mut ws = Workspace::new(0);
    let model = ws.policy(&cfg)?;
    let bundle = ws.reward_bundle(&cfg)?;
    let cache = ws.cache(&bundle);
    for r in cycle_suite(&model, &bundle, &cache, cfg.task, 4, cfg.eval.seed, 10)? {
        println!("{:?}: {:?} over {} pairs", r.pair_type, r.percentage, r.pairs.len());
    }
    Ok(())
}
