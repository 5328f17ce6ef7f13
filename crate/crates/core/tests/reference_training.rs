use flexsel_core::model::{
    forward_with_attention, relevance_scores, train_reference, ReferenceTraining,
};
use flexsel_core::probe::{build_haystack, HaystackSpec};
use flexsel_core::{ModelConfig, ModelWeights, TokenSequence};

const PAYLOADS: usize = 4;

/// Haystacks whose query does not reveal the payload, labelled by payload.
fn dataset(range: std::ops::Range<u64>) -> Vec<(TokenSequence, usize, Vec<usize>)> {
    range
        .map(|i| {
            let payload = i as usize % PAYLOADS;
            let h = build_haystack(&HaystackSpec {
                frames: 8,
                tokens_per_frame: 4,
                payload,
                query: Some(PAYLOADS),
                feature_dim: 8,
                payload_offset: 3.0,
                seed: 500 + i,
                ..Default::default()
            })
            .unwrap();
            (h.sequence, payload, h.relevant)
        })
        .collect()
}

#[test]
fn trained_decoder_concentrates_on_needles() {
    let cfg = ModelConfig {
        layers: 4,
        heads: 2,
        hidden: 32,
        ffn: 64,
        visual_dim: 8,
        vocab: 8,
        max_len: 64,
        classes: PAYLOADS,
        seed: 1,
    };
    let mut w = ModelWeights::init(&cfg).unwrap();
    let train: Vec<(TokenSequence, usize)> = dataset(0..400)
        .into_iter()
        .map(|(s, y, _)| (s, y))
        .collect();
    let opts = ReferenceTraining {
        epochs: 6,
        batch_size: 16,
        lr: 3e-3,
        seed: 2,
    };
    let curve = train_reference(&cfg, &mut w, &train, &opts).unwrap();
    println!("loss curve {curve:?}");

    let test = dataset(10_000..10_050);
    let mut best = 0.0f64;
    for layer in 1..=cfg.layers {
        let mut ratio = 0.0;
        for (seq, _, relevant) in &test {
            let rec = forward_with_attention(&cfg, &w, seq).unwrap().record;
            let s = relevance_scores(&rec, layer).unwrap();
            let mass: f64 = relevant.iter().map(|&g| s.values[g]).sum();
            let uniform = relevant.len() as f64 / seq.visual_len() as f64;
            ratio += mass / uniform;
        }
        ratio /= test.len() as f64;
        println!("layer {layer}: needle mass / uniform = {ratio:.3}");
        best = best.max(ratio);
    }
    assert!(best > 2.0, "best layer ratio {best}");
}
