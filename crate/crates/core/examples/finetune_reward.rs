//! Adapter fine-tuning with the value-implicit and inverse-dynamics
//! objectives, comparing how well rewards track progress before and after.

use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::eval::{median_time_reward_spearman, reward_curves};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::finetune::{finetune, FinetuneConfig};
use mmrl::reward::RewardKind;
use mmrl::worldgrid::*;

fn main() -> anyhow::Result<()> {
    let task = TaskId::Corridor;
    let bundle = EncoderBundle::new(EncoderConfig::default(), 0)?;
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(task, Split::Train, 100, 1)?;
    let held_out = generate_demos(task, Split::Test, 20, 2)?;
    let instruction = instruction_for(task, Split::Train);

    // Random towers stand in for pre-trained ones here.
    let cfg = FinetuneConfig {
        epochs: 5,
        scratch: true,
        ..FinetuneConfig::for_task(task)
    };
    let (tuned, report) = finetune(&bundle, &cache, &demos.records, &instruction, &cfg)?;
    for e in &report.epochs {
        println!("epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("selected epoch {}", report.selected_epoch);
    for (name, b) in [("frozen", &bundle), ("fine-tuned", &tuned)] {
        let (curves, _) = reward_curves(b, &cache, &held_out.records, &instruction, RewardKind::Text, None)?;
        println!("{name}: median time/reward rank correlation {:.3}", median_time_reward_spearman(&curves)?.0);
    }
    println!("towers unchanged: {}", tuned.tower_fingerprint() == bundle.tower_fingerprint());
    Ok(())
}
