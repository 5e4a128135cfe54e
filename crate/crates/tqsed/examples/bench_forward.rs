//! Scratch timing harness (not shipped).
use std::time::Instant;
use tqsed::audio::{stft, StftParams, Waveform};
use tqsed::separation::{DprnnConfig, LookupTextEncoder, MaskKind, SeparationConfig, SeparationModel, TextQuery, TextEncoder};

fn main() {
    let cfg = SeparationConfig {
        sample_rate: 16_000,
        stft: StftParams::new(0.064, 0.032),
        widths: vec![6, 12, 24],
        dprnn: Some(DprnnConfig::new(16)),
        embedding_dim: 16,
        mask_kind: MaskKind::MagnitudeMask,
    };
    let model = SeparationModel::new(cfg, 1).unwrap();
    let enc = LookupTextEncoder::new(&["a".into(), "b".into()], 16, 2).unwrap();
    let x = Waveform::new((0..80_000).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(), 16_000).unwrap();
    let q = TextQuery::new("a").unwrap();

    let t0 = Instant::now();
    let spec = stft(&x, &model.config.stft).unwrap();
    println!("stft: {:?} ({} x {})", t0.elapsed(), spec.frames(), spec.bins());

    let emb = enc.encode(&q).unwrap();
    let t1 = Instant::now();
    let masked = model.separation_forward(&spec, &emb).unwrap();
    println!("forward: {:?}", t1.elapsed());
    let t2 = Instant::now();
    let _ = tqsed::audio::istft(&masked).unwrap();
    println!("istft: {:?}", t2.elapsed());

    let t3 = Instant::now();
    for _ in 0..3 {
        let _ = model.separate(&x, &q, &enc).unwrap();
    }
    println!("separate x3: {:?}", t3.elapsed());

    let ablated = SeparationModel::new(SeparationConfig { dprnn: None, ..model.config.clone() }, 1).unwrap();
    let t4 = Instant::now();
    for _ in 0..3 {
        let _ = ablated.separate(&x, &q, &enc).unwrap();
    }
    println!("ablated separate x3: {:?}", t4.elapsed());
}
