//! Shared inputs for the criterion benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsgkd::bpe::{train_bpe, BpeVocab};
use dsgkd::corpus::{generate, Document, GeneratorConfig, Split};
use dsgkd::encoder::{Encoder, EncoderConfig, IdBatch};
use dsgkd::textprep::{KnowledgeMask, Lexicon};
use dsgkd::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

pub fn random_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    let scores = labels.iter().map(|&y| rng.gen_range(0.0..1.0) * 0.7 + 0.3 * y as f64).collect();
    (scores, labels)
}

pub struct TextFixture {
    pub docs: Vec<Document>,
    pub lexicon: Lexicon,
    pub vocab: BpeVocab,
}

/// A small generated corpus and a tokenizer trained on its training split.
pub fn text_fixture(n_train: usize, vocab_size: usize) -> TextFixture {
    let mut cfg = GeneratorConfig::default();
    cfg.apply("n_train", &n_train.to_string()).expect("key");
    let g = generate(&cfg).expect("generate");
    let vocab = train_bpe(
        g.student.iter().filter(|d| d.split == Split::Train).map(|d| d.text.as_str()),
        vocab_size,
    )
    .expect("bpe");
    TextFixture {
        docs: g.student,
        lexicon: g.lexicon,
        vocab,
    }
}

pub fn encoder(layers: usize, hidden: usize, heads: usize, max_len: usize) -> Encoder {
    let cfg = EncoderConfig {
        layers,
        hidden,
        heads,
        max_len,
        ffn_mult: 4,
        vocab_size: 1024,
        dropout: 0.1,
    };
    Encoder::new(cfg, 1).expect("encoder")
}

/// Random ids with every row of full length and three knowledge words each.
pub fn id_batch(batch: usize, len: usize, seed: u64) -> (IdBatch, Vec<KnowledgeMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<Vec<u32>> = (0..batch)
        .map(|_| {
            let mut r: Vec<u32> = (0..len).map(|_| rng.gen_range(4..1024)).collect();
            r[0] = dsgkd::bpe::CLS_ID;
            r[len - 1] = dsgkd::bpe::SEP_ID;
            r
        })
        .collect();
    let rows: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
    let masks = (0..batch)
        .map(|_| {
            let mut v = vec![0u32; len];
            for (j, start) in [2usize, len / 2, len - 4].into_iter().enumerate() {
                v[start] = j as u32 + 1;
                v[start + 1] = j as u32 + 1;
            }
            KnowledgeMask::from_values(v).expect("mask")
        })
        .collect();
    (IdBatch::new(&rows).expect("batch"), masks)
}
