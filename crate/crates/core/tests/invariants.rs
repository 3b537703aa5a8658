use disambig_core::eval::{cohen_kappa, pll, AgreementTable};
use disambig_core::nnkit::checkpoint::{Checkpoint, CheckpointInfo, LossWeights, ModelKind};
use disambig_core::nnkit::tokenizer::{join_tokens, EOS, MASK};
use disambig_core::nnkit::{EncoderClassifier, MaskedLm, Seq2Seq, Tokenizer, TransformerConfig};
use disambig_core::pretrain::{contrastive_loss, mask_for_infilling, ContrastiveForm};
use disambig_core::rewrite::{geometric_fusion, perturb_step, rewrite_text, Decision, RewriteConfig, RewriteModels, RewriteMode};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const WORDS: [&str; 12] = [
    "the", "heart", "is", "normal", "enlarged", "cardiac", "contour", "with", "mild", "edema", "no", "effusion",
];

fn tokenizer() -> Tokenizer {
    Tokenizer::from_texts([WORDS.join(" ").as_str(), "."], 1).unwrap()
}

fn models(tok: &Tokenizer, lambda2: f64, seed: u64) -> RewriteModels {
    let cfg = TransformerConfig::tiny(tok.len());
    let mut info = CheckpointInfo::new(ModelKind::Seq2seq, "generator", cfg.clone(), tok);
    info.loss_weights = Some(LossWeights { lambda1: 1.0, lambda2 });
    let generator = Checkpoint { model: Seq2Seq::new(cfg.clone(), seed), tokenizer: tok.clone(), info };
    let clf = |role: &str, s| {
        let mut info = CheckpointInfo::new(ModelKind::Classifier, role, cfg.clone(), tok);
        info.n_classes = Some(2);
        Checkpoint { model: EncoderClassifier::new(cfg.clone(), 2, s), tokenizer: tok.clone(), info }
    };
    RewriteModels::new(generator, Some(clf("ambiguity", seed + 1)), clf("decision", seed + 2)).unwrap()
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 2..10).prop_map(|w| format!("{}.", w.join(" ")))
}

fn batch() -> impl Strategy<Value = (Array2<f64>, Vec<u8>)> {
    (2usize..8, 2usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-1.0f64..1.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap()),
            prop::collection::vec(0u8..3, n),
        )
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let a = Array1::from(v);
        let z = a.sum();
        a / z
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_ignores_row_scale_and_order((x, labels) in batch(), scale in 0.1f64..10.0) {
        prop_assume!(x.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        for form in [ContrastiveForm::LogOfSum, ContrastiveForm::SumOfLogs] {
            let base = contrastive_loss(&x, &labels, 0.1, form);
            let scaled = contrastive_loss(&(&x * scale), &labels, 0.1, form);
            prop_assert!((base.value - scaled.value).abs() < 1e-9);
            let n = labels.len();
            let order: Vec<usize> = (0..n).rev().collect();
            let flipped = x.select(ndarray::Axis(0), &order);
            let flipped_labels: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
            prop_assert!((base.value - contrastive_loss(&flipped, &flipped_labels, 0.1, form).value).abs() < 1e-9);
        }
        prop_assert!(contrastive_loss(&x, &labels, 0.1, ContrastiveForm::LogOfSum).value >= -1e-12);
    }

    #[test]
    fn perturb_step_moves_against_the_gradient(
        g in prop::collection::vec(-2.0f64..2.0, 6),
        step in 0.001f64..1.0,
        gamma in 0.0f64..1.0,
    ) {
        let grad = Array2::from_shape_vec((1, 6), g).unwrap();
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let h = Array2::zeros((1, 6));
        let moved = perturb_step(&h, &grad, step, gamma).unwrap();
        prop_assert!((&moved * &grad).sum() < 0.0);
        let len = moved.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expected = step * norm / (norm.powf(gamma) + 1e-10);
        prop_assert!((len - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn fusion_is_a_distribution_between_its_inputs(p in distribution(7), q in distribution(7), w in 0.0f64..=1.0) {
        let f = geometric_fusion(&p, &q, w);
        prop_assert!((f.sum() - 1.0).abs() < 1e-12);
        let ends = (geometric_fusion(&p, &q, 1.0), geometric_fusion(&p, &q, 0.0));
        for i in 0..7 {
            prop_assert!((ends.0[i] - p[i]).abs() < 1e-12 && (ends.1[i] - q[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_is_symmetric_and_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let table = AgreementTable { pairs: pairs.clone() };
        let swapped = AgreementTable { pairs: pairs.iter().map(|&(a, b)| (b, a)).collect() };
        match (cohen_kappa(&table), cohen_kappa(&swapped)) {
            (Ok(k), Ok(s)) => {
                prop_assert!((k - s).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
        let identical = AgreementTable { pairs: pairs.iter().map(|&(a, _)| (a, a)).collect() };
        prop_assert_eq!(cohen_kappa(&identical).unwrap(), 1.0);
    }

    #[test]
    fn infilling_masks_only_content(text in sentence(), ratio in 0.05f64..1.0, seed in any::<u64>()) {
        let tok = tokenizer();
        let ids = tok.encode(&text);
        let masked = mask_for_infilling(&ids, ratio, seed);
        prop_assert_eq!(masked.len(), ids.len());
        let changed: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != masked[i]).collect();
        prop_assert!(!changed.is_empty());
        prop_assert!(changed.iter().all(|&i| masked[i] == MASK && ids[i] > EOS));
        prop_assert_eq!(masked, mask_for_infilling(&ids, ratio, seed));
    }

    #[test]
    fn uniform_mlm_scores_minus_log_vocab(text in sentence()) {
        let tok = tokenizer();
        let mut mlm = MaskedLm::new(TransformerConfig::tiny(tok.len()), 3);
        mlm.zero_output();
        prop_assert!((pll(&text, &mlm, &tok).unwrap() + (tok.len() as f64).ln()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rewrites_keep_length_and_unmasked_tokens(text in sentence(), seed in 0u64..50, abnormal in any::<bool>()) {
        let tok = tokenizer();
        let y = Decision::from_abnormal(abnormal);
        for (mode, lambda2) in [(RewriteMode::Full, 1.0), (RewriteMode::NoDetectNoContrastive, 0.0)] {
            let m = models(&tok, lambda2, seed);
            let cfg = RewriteConfig { mode, iterations: 3, max_length: 12, ..RewriteConfig::default() };
            let trace = rewrite_text(&text, y, &m, &cfg).unwrap();
            prop_assert_eq!(trace.output_tokens.len(), trace.tokens.len());
            prop_assert_eq!(&trace.output, &join_tokens(trace.output_tokens.iter().map(String::as_str)));
            let regenerated = trace.regenerated_positions();
            for i in 0..trace.tokens.len() {
                if !regenerated.contains(&i) {
                    prop_assert_eq!(&trace.output_tokens[i], &trace.tokens[i]);
                }
            }
            if mode == RewriteMode::Full {
                prop_assert_eq!(&regenerated, &trace.masked_positions);
            }
            prop_assert_eq!(&trace, &rewrite_text(&text, y, &m, &cfg).unwrap());
        }
    }
}
