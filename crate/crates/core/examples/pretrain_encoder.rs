//! Contrastive pre-training of the vision and text towers on captioned
//! frames, then top-1 retrieval on held-out pairs.

use mmrl::encoder::{caption_corpus, EncoderBundle, EncoderConfig, PretrainConfig};

fn main() -> anyhow::Result<()> {
    let pairs = std::env::args().nth(1).map_or(Ok(256), |s| s.parse())?;
    let cfg = PretrainConfig {
        pairs,
        epochs: 3,
        ..PretrainConfig::default()
    };
    let mut bundle = EncoderBundle::new(EncoderConfig::default(), 0)?;
    let held_out = caption_corpus(128, 99);
    println!("retrieval before: {:.3}", bundle.retrieval_top1(&held_out, 32)?);
    let report = bundle.pretrain_contrastive(&caption_corpus(pairs, 0), &cfg)?;
    println!("epoch losses: {:?}", report.epoch_loss);
    println!("retrieval after:  {:.3}", bundle.retrieval_top1(&held_out, 32)?);
    println!("tower fingerprint {}", bundle.tower_fingerprint());
    Ok(())
}
