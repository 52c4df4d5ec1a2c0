//! Expert demonstrations: generate a dataset, save it as JSON lines and
//! load it back.

use mmrl::expert::{generate_demos, DemoDataset};
use mmrl::worldgrid::{Split, TaskId};

fn main() -> anyhow::Result<()> {
    let n = std::env::args().nth(1).map_or(Ok(50), |s| s.parse())?;
    let demos = generate_demos(TaskId::Corridor, Split::Train, n, 1)?;
    let lengths: Vec<usize> = demos.records.iter().map(|t| t.len()).collect();
    println!(
        "{} demos, mean length {:.1}, all successful: {}",
        demos.records.len(),
        lengths.iter().sum::<usize>() as f64 / n as f64,
        demos.records.iter().all(|t| t.success)
    );
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demos.jsonl");
    demos.save(&path)?;
    let back = DemoDataset::load(&path)?;
    println!("round trip through {} equal: {}", path.display(), back == demos);
    let (train, val) = demos.split_indices();
    println!("train/validation split: {} / {}", train.len(), val.len());
    Ok(())
}
