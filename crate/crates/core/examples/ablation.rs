//! An ablation grid over the return-prediction switch on a small base
//! configuration, saved as a CSV table and text summary.

use mmrl::config::{AblationGrid, RunConfig};
use mmrl::pipeline::{run_ablation, Workspace};
use mmrl::worldgrid::TaskId;

fn main() -> anyhow::Result<()> {
    let grid_name = std::env::args().nth(1).unwrap_or_else(|| "return-prediction".into());
    let mut base = RunConfig::for_task(TaskId::Corridor);
    base.encoder.pretrained = false;
    base.demos.n = 40;
    base.finetune.epochs = 2;
    base.policy.epochs = 3;
    base.policy.windows_per_trajectory = Some(8);
    base.eval.episodes = 20;

    let grid = AblationGrid::preset(&grid_name)?;
    let mut ws = Workspace::new(0);
    let report = run_ablation(&mut ws, &grid, &base);
    let dir = tempfile::tempdir()?;
    report.save(dir.path())?;
    print!("{}", report.summary());
    print!("{}", std::fs::read_to_string(dir.path().join("ablation.csv"))?);
    Ok(())
}
