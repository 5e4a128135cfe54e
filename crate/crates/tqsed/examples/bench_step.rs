//! Scratch timing harness for one training step (not shipped).
use std::time::Instant;
use ndarray::{ArrayD, IxDyn};
use tqsed::audio::{stft, StftParams, Waveform};
use tqsed::nn::Binding;
use tqsed::separation::{DprnnConfig, LookupTextEncoder, MaskKind, SeparationConfig, SeparationModel, TextQuery};
use tqsed::tensor::{Graph, SpecGeometry};

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
    let b = 8usize;
    let n = 16_000usize;
    let resolved = model.config.stft.resolve(16_000).unwrap();
    let geom = SpecGeometry { stft: resolved, source_length: n };
    let (tf, bins) = (geom.frames(), geom.bins());
    println!("batch {b}, frames {tf}, bins {bins}");

    let x = Waveform::new((0..n).map(|i| (i as f64 * 0.07).sin() * 0.3).collect(), 16_000).unwrap();
    let spec = stft(&x, &model.config.stft).unwrap();
    let mut mags = ArrayD::zeros(IxDyn(&[b, tf, bins]));
    let mut re = ArrayD::zeros(IxDyn(&[b, tf, bins]));
    let mut im = ArrayD::zeros(IxDyn(&[b, tf, bins]));
    let target = ArrayD::zeros(IxDyn(&[b, n]));
    for bi in 0..b { for t in 0..tf { for f in 0..bins {
        let c = spec.values[[t, f]];
        mags[[bi,t,f]] = c.norm(); re[[bi,t,f]] = c.re; im[[bi,t,f]] = c.im;
    }}}

    // merge params
    let mut work = tqsed::nn::Params::new();
    for (k,v) in model.params.iter() { work.insert(k, v.clone()); }
    for (k,v) in enc.params.iter() { work.insert(k, v.clone()); }
    let queries = vec![TextQuery::new("a").unwrap(); b];

    for round in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let bind = Binding::bind(&mut g, &work);
        let emb = enc.embed_batch(&mut g, &bind, &queries).unwrap();
        let t1 = Instant::now();
        let mask = model.build_mask(&mut g, &bind, &mags, emb);
        let t2 = Instant::now();
        let mre = g.mul_const(mask, &re);
        let mim = g.mul_const(mask, &im);
        let wave = g.istft_batch(mre, mim, &geom);
        let diff = g.sub_const(wave, &target);
        let ad = g.abs(diff);
        let loss = g.mean_all(ad);
        let t3 = Instant::now();
        g.backward(loss);
        let t4 = Instant::now();
        println!("round {round}: bind {:?} | fwd {:?} | istft+loss {:?} | backward {:?} | total {:?}",
            t1-t0, t2-t1, t3-t2, t4-t3, t4-t0);
    }
}
