use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use disambig_bench::{blobs, gaussian};
use disambig_core::baselines::{kbr_rewrite, ReplacementDictionary};
use disambig_core::nnkit::{EncoderClassifier, Seq2Seq, Tokenizer, TransformerConfig};
use disambig_core::pretrain::{contrastive_loss, ContrastiveForm};
use disambig_core::pseudolabel::{fit_gmm, GmmConfig};
use disambig_core::rewrite::PerturbationObjective;
use ndarray::Array2;

const SENTENCES: [&str; 4] = [
    "the cardiac silhouette is prominent.",
    "mild pulmonary edema with small bilateral pleural effusions.",
    "unremarkable mediastinal contours. no hilar lymphadenopathy.",
    "patent airways with streaky opacities at the lung bases.",
];

fn contrastive(c: &mut Criterion) {
    let h = gaussian(32, 64, 1);
    let labels: Vec<usize> = (0..32).map(|i| i % 5).collect();
    c.bench_function("contrastive_loss 32x64", |b| {
        b.iter(|| contrastive_loss(black_box(&h), &labels, 0.07, ContrastiveForm::LogOfSum))
    });
}

fn kbr(c: &mut Criterion) {
    let dict = ReplacementDictionary::shipped();
    c.bench_function("kbr_rewrite", |b| {
        b.iter(|| SENTENCES.iter().map(|s| kbr_rewrite(black_box(s), &dict).len()).sum::<usize>())
    });
}

fn gmm(c: &mut Criterion) {
    let x = blobs(200, 2);
    c.bench_function("fit_gmm 600x2 k3", |b| b.iter(|| fit_gmm(black_box(&x), &GmmConfig::new(3, 1, 0)).unwrap()));
}

fn forward(c: &mut Criterion) {
    let tok = Tokenizer::from_texts(SENTENCES, 1).unwrap();
    let cfg = TransformerConfig::desk(tok.len()).with_dims(64, 4, 128);
    let generator = Seq2Seq::new(cfg.clone(), 3);
    let classifier = EncoderClassifier::new(cfg, 2, 4);
    let ids = tok.encode(SENTENCES[1]);
    c.bench_function("seq2seq next_token", |b| b.iter(|| generator.next_token(black_box(&ids), &ids[..4], None).unwrap()));
    c.bench_function("classifier predict", |b| b.iter(|| classifier.predict(black_box(&ids)).unwrap()));
    let objective = PerturbationObjective::new(&generator, &classifier, gaussian(1, 64, 5), &ids[..4], &ids[5..], 1, 0.01);
    let delta = Array2::zeros((1, 64));
    c.bench_function("perturbation objective", |b| b.iter(|| objective.evaluate(black_box(&delta)).unwrap()));
}

criterion_group!(benches, contrastive, kbr, gmm, forward);
criterion_main!(benches);
