use gradtape::{grad_check, Graph, Tensor};
use mmrl::encoder::*;
use mmrl::features::FeatureCache;
use mmrl::worldgrid::*;
use mmrl::Error;
use proptest::prelude::*;

fn bundle(seed: u64) -> EncoderBundle {
    EncoderBundle::new(EncoderConfig::default(), seed).unwrap()
}

fn frame(task: TaskId, seed: u64, cell: Option<Cell>) -> Observation {
    let level = make_level(task, Split::Test, seed);
    render(&level, cell.unwrap_or(level.agent_start))
}

/// Direct evaluation of the symmetric contrastive loss.
fn contrastive_oracle(img: &[Vec<f64>], txt: &[Vec<f64>], temperature: f64) -> f64 {
    let n = img.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / temperature;
    let ce = |row: &dyn Fn(usize) -> Vec<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let l = row(i);
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - l[i]
            })
            .sum::<f64>()
            / n as f64
    };
    let it = ce(&|i| txt.iter().map(|t| dot(&img[i], t)).collect());
    let ti = ce(&|i| img.iter().map(|v| dot(&txt[i], v)).collect());
    0.5 * (it + ti)
}

#[test]
fn embeddings_are_unit_length_and_sized() {
    let b = bundle(0);
    assert_eq!(b.config.feature_dim(), 96);
    let z = b.encode_image(&frame(TaskId::MazeI, 1, None)).unwrap();
    assert_eq!(z.len(), 32);
    assert!((z.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    let t = b.encode_text(&instruction_for(TaskId::Corridor, Split::Train)).unwrap();
    assert!((t.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
}

#[test]
fn adapters_are_separate_from_the_towers() {
    let mut b = bundle(3);
    let (fp, tower) = (b.fingerprint(), b.tower_fingerprint());
    let adapters = b.adapter_params();
    assert!(!adapters.is_empty());
    assert!(adapters.iter().all(|&id| b.params.name(id).starts_with(ADAPTER_PREFIX)));
    for &id in &adapters {
        b.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.01);
    }
    assert_ne!(b.fingerprint(), fp);
    assert_eq!(b.tower_fingerprint(), tower);

    b.freeze_towers();
    for id in b.params.ids() {
        assert_eq!(b.params.is_trainable(id), adapters.contains(&id));
    }
}

#[test]
fn feature_cache_matches_direct_encoding() {
    let b = bundle(1);
    let cache = FeatureCache::new(&b);
    let level = make_level(TaskId::MazeII, Split::Train, 77);
    let cells = vec![level.agent_start, level.objects[0].cell];
    let cached = cache.frames(&b, &level, &cells, 1.0).unwrap();
    let direct = b
        .image_features(&cells.iter().map(|&c| render(&level, c)).collect::<Vec<_>>().iter().collect::<Vec<_>>())
        .unwrap();
    for (c, d) in cached.iter().zip(&direct) {
        assert!(c.iter().zip(d).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    assert_eq!(cache.len(), 2);

    let mut other = bundle(2);
    other.meta.pretrained = true;
    assert!(matches!(cache.frames(&other, &level, &cells, 1.0), Err(Error::Fingerprint { .. })));
}

#[test]
fn bundles_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let mut b = bundle(4);
    b.meta.pretrained = true;
    b.save(&path).unwrap();
    let back = EncoderBundle::load(&path).unwrap();
    assert_eq!(back.fingerprint(), b.fingerprint());
    assert_eq!(back.meta, b.meta);
    let obs = frame(TaskId::Corridor, 5, None);
    assert_eq!(back.encode_image(&obs).unwrap(), b.encode_image(&obs).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(EncoderBundle::load(&path).is_err());
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(EncoderBundle::load(&path).is_err());
}

#[test]
fn contrastive_loss_matches_oracle_and_gradients() {
    let img: Vec<Vec<f64>> = (0..4).map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4).collect()).collect();
    let txt: Vec<Vec<f64>> = (0..4).map(|i| (0..6).map(|j| ((i * 2 + j * 5) % 7) as f64 * 0.1 - 0.3).collect()).collect();
    let ti = Tensor::new(vec![4, 6], img.concat()).unwrap();
    let tt = Tensor::new(vec![4, 6], txt.concat()).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.constant(ti.clone()), g.constant(tt.clone()));
    let loss = contrastive_loss(&mut g, a, b, 0.07).unwrap();
    assert!((g.value(loss).item() - contrastive_oracle(&img, &txt, 0.07)).abs() < 1e-10);

    let err = grad_check(
        |g, x| {
            let t = g.constant(tt.clone());
            contrastive_loss(g, x, t, 0.5).map_err(|e| gradtape::GradError::Invalid(e.to_string()))
        },
        &ti,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let mut g = Graph::new();
    let one = g.constant(Tensor::new(vec![1, 6], img[0].clone()).unwrap());
    assert!(contrastive_loss(&mut g, one, one, 0.07).is_err());
}

#[test]
fn short_pretraining_lowers_the_loss() {
    let pairs = caption_corpus(64, 9);
    assert_eq!(pairs.iter().map(|p| &p.caption).collect::<Vec<_>>(), caption_corpus(64, 9).iter().map(|p| &p.caption).collect::<Vec<_>>());
    let mut b = bundle(5);
    let tower = b.tower_fingerprint();
    let adapter_values: Vec<Vec<f64>> = b.adapter_params().iter().map(|&id| b.params.get(id).data().to_vec()).collect();
    let before = b.contrastive_eval(&pairs, 32, 0.07).unwrap();
    let cfg = PretrainConfig {
        pairs: 64,
        epochs: 4,
        lr: 2e-3,
        ..PretrainConfig::default()
    };
    let report = b.pretrain_contrastive(&pairs, &cfg).unwrap();
    assert_eq!(report.epoch_loss.len(), 4);
    assert!(b.meta.pretrained);
    assert_ne!(b.tower_fingerprint(), tower);
    let after_values: Vec<Vec<f64>> = b.adapter_params().iter().map(|&id| b.params.get(id).data().to_vec()).collect();
    assert_eq!(adapter_values, after_values);
    let after = b.contrastive_eval(&pairs, 32, 0.07).unwrap();
    assert!(after < before, "{before} -> {after}");
    let r = b.retrieval_top1(&pairs, 32).unwrap();
    assert!((0.0..=1.0).contains(&r));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn encoding_is_independent_of_batch_composition(
        seeds in prop::collection::vec(any::<u64>(), 2..5),
        task in prop::sample::select(TaskId::ALL.to_vec()),
    ) {
        let b = bundle(6);
        let frames: Vec<Observation> = seeds.iter().map(|&s| frame(task, s, None)).collect();
        let refs: Vec<&Observation> = frames.iter().collect();
        let together = b.encode_images(&refs).unwrap();
        let mut reversed = refs.clone();
        reversed.reverse();
        let rev = b.encode_images(&reversed).unwrap();
        for (i, f) in frames.iter().enumerate() {
            let alone = b.encode_image(f).unwrap();
            for (x, y) in alone.iter().zip(&together[i]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in alone.iter().zip(&rev[frames.len() - 1 - i]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
